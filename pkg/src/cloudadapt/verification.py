"""Finite-difference verification sweep over every autodiff primitive and
over the full joint loss on a tiny model.

Random cases are sampled away from kinks (relu/leaky_relu zero crossings,
reduce_max ties, nearest-neighbor ties) where the one-sided derivative makes
central differences meaningless.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import models
from .autodiff import Parameter, Tensor
from .ema import init_teacher
from .trainer import DomainBatch

KINK_MARGIN = 1e-3


def _away_from_zero(rng, shape):
    x = rng.uniform(-2.0, 2.0, size=shape)
    bump = np.where(x >= 0, KINK_MARGIN, -KINK_MARGIN)
    return x + bump


def _separated(rng, shape, axis):
    """Random values whose top-2 gap along ``axis`` exceeds the kink margin."""
    if shape[axis] < 2:
        return rng.uniform(-2.0, 2.0, size=shape)
    while True:
        x = rng.uniform(-2.0, 2.0, size=shape)
        top2 = np.sort(x, axis=axis)
        gap = np.take(top2, -1, axis=axis) - np.take(top2, -2, axis=axis)
        if np.min(gap) > KINK_MARGIN:
            return x


def primitive_cases(rng):
    """Yield (name, build) pairs; build(param) returns the op output."""
    def rand_shape():
        return (int(rng.integers(1, 6)), int(rng.integers(1, 6)))

    n, m, k = (int(rng.integers(2, 6)) for _ in range(3))
    rhs = Tensor(rng.normal(size=(k, m)))
    yield "matmul", (n, k), lambda p: ad.matmul(p, rhs)
    s = rand_shape()
    other = Tensor(rng.normal(size=s))
    yield "add", s, lambda p: ad.add(p, other)
    yield "sub", s, lambda p: ad.sub(other, p)
    yield "mul_elementwise", s, lambda p: ad.mul_elementwise(p, other)
    yield "scalar_mul", s, lambda p: ad.scalar_mul(p, 1.7)
    yield "square", s, lambda p: ad.square(p)
    yield "relu", s, lambda p: ad.relu(p)
    yield "leaky_relu", s, lambda p: ad.leaky_relu(p)
    yield "concat_last_axis", s, lambda p: ad.concat_last_axis(p, other)
    yield "reduce_sum", s, lambda p: ad.reduce_sum(ad.square(p))
    yield "reduce_mean_over_axis", s, lambda p: ad.reduce_mean_over_axis(p, 1)
    yield "reduce_max_over_axis", s, lambda p: ad.reduce_max_over_axis(p, 1)
    yield "log_softmax", s, lambda p: ad.log_softmax(p)
    rows = int(rng.integers(2, 6))
    idx = rng.integers(0, s[0], size=rows)
    yield "gather_rows", s, lambda p: ad.gather_rows(p, idx)
    f = int(rng.integers(1, 6))
    yield "broadcast_rows", (f,), lambda p: ad.broadcast_rows(p, 4)


def check_primitives(cases_per_op: int = 50, seed: int = 0,
                     h: float = 1e-5, tol: float = 1e-4) -> dict:
    """Run ``cases_per_op`` random finite-difference checks per primitive."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    failures = []
    for _ in range(cases_per_op):
        for name, shape, build in primitive_cases(rng):
            if name in ("relu", "leaky_relu"):
                data = _away_from_zero(rng, shape)
            elif name == "reduce_max_over_axis":
                data = _separated(rng, shape, axis=1)
            else:
                data = rng.normal(size=shape)
            param = Parameter("x", data)
            w = rng.normal(size=build(param.tensor).shape)

            def f(build=build, param=param, w=w):
                out = build(param.tensor)
                return ad.reduce_sum(ad.mul_elementwise(out, Tensor(w)))

            rep = ad.finite_difference_check(f, [param], h=h, tol=tol)
            worst[name] = max(worst.get(name, 0.0), rep["max_rel_err"])
            if not rep["ok"]:
                failures.append((name, rep["max_rel_err"]))
    return {"per_op": worst, "max_rel_err": max(worst.values()),
            "failures": failures, "ok": not failures}


def tiny_model(seed: int = 4):
    """M=16, k=4, F=16, C=3 model pair with a slightly perturbed teacher."""
    arch = models.ArchSpec(
        num_classes=3, points=16, k=4, edgeconv_widths=(8, 8), feature_dim=16,
        classifier_hidden=8, seg_hidden=8, decoder_widths=(16, 16, 8, 3),
        dynamic_graph=False)
    student = models.ModelParams.init(arch, seed=seed)
    teacher = init_teacher(student)
    rng = np.random.default_rng(seed + 1)
    for p in teacher.parameters():
        p.value += 0.01 * rng.normal(size=p.value.shape)
    return student, teacher


def check_full_loss(mode: str = "classification", seed: int = 4,
                    h: float = 1e-5, tol: float = 1e-4) -> dict:
    """Finite-difference check of the complete joint objective."""
    student, teacher = tiny_model(seed)
    rng = np.random.default_rng(seed + 2)
    b = 2
    src = rng.normal(size=(b, 16, 3))
    tgt = rng.normal(size=(b, 16, 3))
    if mode == "classification":
        labels = rng.integers(0, 3, size=b)
    else:
        labels = rng.integers(0, 3, size=(b, 16))
    batch = DomainBatch(source_clouds=src, target_clouds=tgt, source_labels=labels)
    lam = 0.2 if mode == "classification" else 0.05

    def f():
        return L.total_loss(batch, student, teacher, lam, mode=mode).total_tensor

    return ad.finite_difference_check(f, student.parameters(), h=h, tol=tol)


def run_gradcheck(cases_per_op: int = 50, seed: int = 0, log=print) -> bool:
    """Full sweep; returns True when everything is within tolerance."""
    prim = check_primitives(cases_per_op=cases_per_op, seed=seed)
    for name, err in sorted(prim["per_op"].items()):
        log(f"primitive {name:22s} max rel err {err:.3e}")
    ok = prim["ok"]
    for mode in ("classification", "segmentation"):
        rep = check_full_loss(mode=mode, seed=4)
        log(f"full {mode} loss        max rel err {rep['max_rel_err']:.3e} "
            f"({'ok' if rep['ok'] else 'FAIL'})")
        ok = ok and rep["ok"]
    log("gradcheck " + ("PASSED" if ok else "FAILED"))
    return ok
