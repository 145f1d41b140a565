"""Open-vocabulary segmentation with attribute-rich class prompts and fused dual-encoder features."""

__version__ = "0.1.0"
