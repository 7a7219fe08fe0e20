"""Low-complexity acoustic scene classification toolkit.

Depthwise-separable CNN with residual normalization, teacher-logit
distillation, int8 quantization-aware training, and a reproducible CLI,
all on a minimal numpy-backed autodiff engine.
"""

__version__ = "0.1.0"
