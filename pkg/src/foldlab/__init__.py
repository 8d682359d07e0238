"""foldlab: a desk-scale laboratory for transformer depth compression via
gated block removal, grouped parameter sharing, and LoRA + distillation
recovery."""

__version__ = "0.1.0"
