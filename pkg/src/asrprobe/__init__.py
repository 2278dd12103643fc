"""Layer-wise speech reconstruction probes for small CTC recognizers."""

__version__ = "0.1.0"
