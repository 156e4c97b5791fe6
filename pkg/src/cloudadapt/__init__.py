"""Self-ensembling domain adaptation for 3D point clouds.

A labeled source domain and an unlabeled target domain are trained jointly:
a student network optimizes supervised, reconstruction, soft-classification
and consistency objectives while a teacher network tracks the student by
exponential moving average and supplies the soft and consistency targets.
Everything runs on a small from-scratch reverse-mode autodiff core; the
quadratic geometry kernels have a compiled fast path with a numpy fallback.
"""

from . import (autodiff, cli, datasets, ema, geometry, kernels, losses,
               mixup, models, trainer, verification)

__all__ = [
    "autodiff", "cli", "datasets", "ema", "geometry", "kernels", "losses",
    "mixup", "models", "trainer", "verification",
]

__version__ = "0.1.0"
