"""Generation backends and parsing of raw generations into relation instances."""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Mapping, Protocol

import requests

from .graph import MSDC_TAXONOMY, TOKEN_RE, DiscourseGraph, RelationInstance, Taxonomy, format_relations

if TYPE_CHECKING:
    from .engine import Sample

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Generation failed after the retry policy was exhausted."""


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_new_tokens: int = 256
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    # step identity; oracles replay from it, remote backends ignore it
    dialogue_id: str | None = None
    step_units: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


# ---------------------------------------------------------------------------
# remote


@dataclass
class RemoteBackend:
    """Client for a chat-completion style JSON-over-HTTP endpoint.

    Sends ``{model, messages, temperature, max_tokens, stop}`` (or ``prompt``
    instead of ``messages`` when ``chat`` is false) and reads the text from
    ``choices[0].message.content`` / ``choices[0].text``. Every failure
    (transport error, timeout, non-2xx status, unreadable body) is retried
    with bounded exponential backoff.
    """

    url: str
    model: str = ""
    auth_env: str | None = None
    timeout_ms: int = 60_000
    max_attempts: int = 3
    concurrency: int = 4
    chat: bool = True
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    sleep: Callable[[float], None] = time.sleep
    session: requests.Session = field(default_factory=requests.Session, repr=False)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self._slots = threading.BoundedSemaphore(max(1, self.concurrency))

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _payload(self, request: GenerationRequest) -> dict:
        payload: dict = {
            "model": self.model,
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        if self.chat:
            payload["messages"] = [{"role": "user", "content": request.prompt}]
        else:
            payload["prompt"] = request.prompt
        return payload

    @staticmethod
    def _extract(body: object) -> str:
        if isinstance(body, dict):
            choices = body.get("choices")
            if isinstance(choices, list) and choices:
                first = choices[0]
                if isinstance(first, dict):
                    msg = first.get("message")
                    if isinstance(msg, dict) and isinstance(msg.get("content"), str):
                        return msg["content"]
                    if isinstance(first.get("text"), str):
                        return first["text"]
            for key in ("text", "generated_text"):
                if isinstance(body.get(key), str):
                    return body[key]
        if isinstance(body, list) and body and isinstance(body[0], dict):
            return RemoteBackend._extract(body[0])
        raise ValueError("response carries no generated text")

    def generate(self, request: GenerationRequest) -> str:
        payload = self._payload(request)
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._slots:
                    resp = self.session.post(
                        self.url, json=payload, headers=self._headers(), timeout=self.timeout_ms / 1000
                    )
                if not 200 <= resp.status_code < 300:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                return self._extract(resp.json())
            except (requests.RequestException, BackendError, ValueError) as exc:
                last = exc
                log.warning("generation attempt %d/%d failed: %s", attempt, self.max_attempts, exc)
                if attempt < self.max_attempts:
                    self.sleep(min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1)))
        raise BackendError(f"giving up after {self.max_attempts} attempts: {last}") from last


# ---------------------------------------------------------------------------
# oracles


class OracleBackend:
    """Replays the gold relations that target the request's step units."""

    def __init__(self, gold: Mapping[str, DiscourseGraph]):
        self.gold = gold

    def _gold_for(self, request: GenerationRequest) -> list[RelationInstance]:
        if request.dialogue_id is None:
            raise BackendError("oracle backends need the step identity on the request")
        try:
            graph = self.gold[request.dialogue_id]
        except KeyError:
            raise BackendError(f"no gold graph for dialogue {request.dialogue_id}") from None
        return sorted(graph.targeting(request.step_units))

    def generate(self, request: GenerationRequest) -> str:
        return format_relations(self._gold_for(request))


def step_seed(seed: int, *parts: object) -> int:
    """Stable 64-bit seed from a run seed and a step identity."""
    h = hashlib.sha256(repr((seed,) + parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


class NoisyOracleBackend(OracleBackend):
    """Gold replay with independent drops and relabels, fully determined by ``seed``."""

    def __init__(
        self,
        gold: Mapping[str, DiscourseGraph],
        taxonomy: Taxonomy,
        p_drop: float = 0.0,
        p_relabel: float = 0.0,
        seed: int = 0,
    ):
        if not (0.0 <= p_drop <= 1.0 and 0.0 <= p_relabel <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        super().__init__(gold)
        self.codes = taxonomy.codes
        self.p_drop = p_drop
        self.p_relabel = p_relabel
        self.seed = seed

    def generate(self, request: GenerationRequest) -> str:
        rng = random.Random(step_seed(self.seed, request.dialogue_id, tuple(request.step_units)))
        out = []
        for rel in self._gold_for(request):
            if rng.random() < self.p_drop:
                continue
            if rng.random() < self.p_relabel:
                others = [c for c in self.codes if c != rel.label]
                if others:
                    rel = RelationInstance(rel.source, rel.target, rng.choice(others))
            out.append(rel)
        return format_relations(out)


def noisy_oracle(
    gold: Mapping[str, DiscourseGraph],
    p_drop: float,
    p_relabel: float,
    seed: int,
    taxonomy: Taxonomy = MSDC_TAXONOMY,
) -> NoisyOracleBackend:
    return NoisyOracleBackend(gold, taxonomy, p_drop, p_relabel, seed)


class ScriptedBackend:
    """Returns canned outputs keyed by (dialogue_id, step_units); for tests and replays."""

    def __init__(self, outputs: Mapping[tuple[str, tuple[int, ...]], str], default: str = ""):
        self.outputs = dict(outputs)
        self.default = default

    def generate(self, request: GenerationRequest) -> str:
        return self.outputs.get((request.dialogue_id or "", tuple(request.step_units)), self.default)


# ---------------------------------------------------------------------------
# output parsing


class RejectReason(str, Enum):
    BAD_SYNTAX = "bad_syntax"
    UNKNOWN_LABEL = "unknown_label"
    OUT_OF_WINDOW = "out_of_window"
    BAD_ORDER = "bad_order"
    TARGET_NOT_IN_TURN = "target_not_in_turn"
    DUPLICATE = "duplicate"


@dataclass
class ParsedOutput:
    accepted: list[RelationInstance] = field(default_factory=list)
    rejected: list[tuple[str, RejectReason]] = field(default_factory=list)


# Anything shaped like ``Name(...)`` (or an unclosed ``Name(...``) that is not a well-formed token.
NEAR_MISS_RE = re.compile(r"[A-Za-z][A-Za-z_\-]*\s?\((?:[^()\n]{0,40}\)|[^()\s]{0,40})")


def parse_output(raw: str, sample: Sample, taxonomy: Taxonomy) -> ParsedOutput:
    """Classify every relation-like token in ``raw``; never raises on text input.

    A token is accepted iff its code is in the taxonomy, ``l <= i < j <= m``
    for the sample window ``[l, m]``, ``j`` is a current-turn unit, and the
    same triple was not already accepted.
    """
    out = ParsedOutput()
    lo, hi = sample.window_start, sample.window_end
    turn = set(sample.current_turn)
    seen: set[RelationInstance] = set()
    covered: list[tuple[int, int]] = []
    for m in TOKEN_RE.finditer(raw):
        covered.append(m.span())
        token = m.group(0)
        code = m.group(1)
        if code not in taxonomy:
            out.rejected.append((token, RejectReason.UNKNOWN_LABEL))
            continue
        if len(m.group(2)) > 18 or len(m.group(3)) > 18:
            # no window is that large; also keeps int() away from huge digit runs
            out.rejected.append((token, RejectReason.OUT_OF_WINDOW))
            continue
        i, j = int(m.group(2)), int(m.group(3))
        if i >= j:
            out.rejected.append((token, RejectReason.BAD_ORDER))
        elif i < lo or j > hi:
            out.rejected.append((token, RejectReason.OUT_OF_WINDOW))
        elif j not in turn:
            out.rejected.append((token, RejectReason.TARGET_NOT_IN_TURN))
        else:
            rel = RelationInstance(i, j, code)
            if rel in seen:
                out.rejected.append((token, RejectReason.DUPLICATE))
            else:
                seen.add(rel)
                out.accepted.append(rel)
    for m in NEAR_MISS_RE.finditer(raw):
        s, e = m.span()
        if not any(s < ce and cs < e for cs, ce in covered):
            out.rejected.append((m.group(0), RejectReason.BAD_SYNTAX))
    return out


# ---------------------------------------------------------------------------


BACKEND_KINDS = ("remote", "oracle", "noisy")


def make_backend(
    conf: Mapping[str, object],
    *,
    gold: Mapping[str, DiscourseGraph] | None = None,
    taxonomy: Taxonomy | None = None,
) -> Backend:
    """Build a backend from the ``backend`` section of a run config."""
    kind = conf.get("kind", "oracle")
    if kind == "remote":
        if not conf.get("url"):
            raise ValueError("backend.url is required for the remote backend")
        return RemoteBackend(
            url=str(conf["url"]),
            model=str(conf.get("model", "")),
            auth_env=conf.get("auth_env") or None,  # type: ignore[arg-type]
            timeout_ms=int(conf.get("timeout_ms", 60_000)),  # type: ignore[arg-type]
            max_attempts=int(conf.get("max_attempts", 3)),  # type: ignore[arg-type]
            concurrency=int(conf.get("concurrency", 4)),  # type: ignore[arg-type]
            chat=bool(conf.get("chat", True)),
        )
    if kind in ("oracle", "noisy"):
        if gold is None:
            raise ValueError(f"backend kind {kind!r} needs gold graphs")
        if kind == "oracle":
            return OracleBackend(gold)
        if taxonomy is None:
            raise ValueError("noisy backend needs a taxonomy")
        return NoisyOracleBackend(
            gold,
            taxonomy,
            float(conf.get("p_drop", 0.0)),  # type: ignore[arg-type]
            float(conf.get("p_relabel", 0.0)),  # type: ignore[arg-type]
            int(conf.get("seed", 0)),  # type: ignore[arg-type]
        )
    raise ValueError(f"unknown backend kind {kind!r}; expected one of {BACKEND_KINDS}")
