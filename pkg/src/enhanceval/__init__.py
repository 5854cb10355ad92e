"""Evaluation engine for enhancing-tumour predictions from non-contrast MRI."""

__version__ = "0.1.0"

DEFAULT_SEED = 20240601
