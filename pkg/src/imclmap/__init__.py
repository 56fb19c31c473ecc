"""Spiral MRSI simulation, reconstruction and IMCL/EMCL indicator mapping."""

__version__ = "0.1.0"
