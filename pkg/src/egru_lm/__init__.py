"""Event-based GRU language models with weight pruning and event-driven sparse inference."""

__version__ = "0.1.0"
