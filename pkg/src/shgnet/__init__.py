"""Dual-modality (autofluorescence + SHG) tissue classification pipeline."""

__version__ = "0.1.0"

LABELS = ("normal", "fibrosis", "cancer")
BINARY_LABELS = ("non_cancer", "cancer")
