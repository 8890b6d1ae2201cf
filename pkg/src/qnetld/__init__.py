"""Large-deviation rate functions for Jackson and processor-sharing networks."""

__version__ = "0.1.0"
