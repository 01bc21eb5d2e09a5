"""Cross-layer monitoring and benchmarking for applications spread over several clouds."""

__version__ = "0.1.0"
