"""conv2bench: multi-turn chat logs in, calibrated checklist benchmarks out."""

__version__ = "0.1.0"
