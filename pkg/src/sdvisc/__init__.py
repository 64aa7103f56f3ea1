"""Software-defined virtual synchronous condenser co-simulation toolkit."""
__version__ = "0.1.0"
