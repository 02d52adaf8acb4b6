"""Open ASEP simulator and verification lab for its height function,
Gärtner transform and discrete Robin heat-kernel machinery."""

__version__ = "0.1.0"
