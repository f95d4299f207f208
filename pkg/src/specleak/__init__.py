"""specleak: a desk-scale testbed for speculative-decoding traffic leaks."""

__version__ = "0.1.0"
