"""Teacher lifecycle: initialization as a deep copy of the student and the
exponential-moving-average weight update applied once per optimizer step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter
from .models import ModelParams


@dataclass
class EmaState:
    momentum: float = 0.99
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"ema momentum must be in [0, 1), got {self.momentum}")


def init_teacher(student: ModelParams) -> ModelParams:
    """Deep copy of the student's parameter values; the teacher is never
    trained directly, so its gradients stay zero."""
    copied = {
        name: Parameter(name, p.value.copy())
        for name, p in student.params.items()
    }
    return ModelParams(student.arch, copied)


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    if teacher.params.keys() != student.params.keys():
        raise ValueError("ema_update: parameter name sets differ")
    for name, tp in teacher.params.items():
        sp = student.params[name]
        if tp.value.shape != sp.value.shape:
            raise ValueError(
                f"ema_update: shape mismatch for {name}: "
                f"{tp.value.shape} vs {sp.value.shape}")
        np.multiply(tp.value, momentum, out=tp.value)
        tp.value += (1.0 - momentum) * sp.value
