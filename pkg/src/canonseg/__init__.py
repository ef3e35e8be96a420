"""Text-prompted segmentation with symmetry-aware canonicalization, on phantoms."""

__version__ = "0.1.0"
