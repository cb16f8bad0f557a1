"""Self-ensembling (mean teacher) visual domain adaptation on numpy."""

__version__ = "0.1.0"
