"""Incremental discourse parsing harness for multiparty dialogue."""

__version__ = "0.1.0"
