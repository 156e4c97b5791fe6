"""Joint training loop over a labeled source domain and an unlabeled target
domain: Adam with cosine-annealed learning rate, per-step teacher EMA
update, per-epoch evaluation, metrics CSV and binary checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import models, mixup
from .autodiff import backward, no_grad
from .datasets import Dataset
from .ema import EmaState, ema_update, init_teacher
from .geometry import jitter
from .models import ArchSpec, ModelParams


class TrainDivergedError(RuntimeError):
    """Raised when a loss component goes non-finite; names the first one."""


@dataclass
class TrainConfig:
    mode: str = "classification"      # or "segmentation"
    variant: str = "sen"              # "sen" | "source_only" | "autoencoder"
    batch_size: int = 32
    epochs: int = 150
    lr0: float = 1e-3
    lr_min: float = 0.0
    lam: float = 0.2
    ema_momentum: float = 0.99
    pm_alpha: float = 0.2
    pm_prob: float = 0.25
    use_pm: bool = False
    k: int = 8
    points: int = 64
    num_classes: int = 6
    seed: int = 0
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.02
    dynamic_graph: bool = True
    edgeconv_widths: tuple = (32, 64)
    feature_dim: int = 128
    classifier_hidden: int = 64
    seg_hidden: int = 64
    decoder_widths: tuple = (128, 128, 64, 3)

    @classmethod
    def classification(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def segmentation(cls, **overrides) -> "TrainConfig":
        base = cls(mode="segmentation", batch_size=16, epochs=200, lam=0.05,
                   num_classes=3)
        return replace(base, **overrides)

    def arch(self) -> ArchSpec:
        return ArchSpec(
            num_classes=self.num_classes, points=self.points, k=self.k,
            edgeconv_widths=tuple(self.edgeconv_widths),
            feature_dim=self.feature_dim,
            classifier_hidden=self.classifier_hidden,
            seg_hidden=self.seg_hidden,
            decoder_widths=tuple(self.decoder_widths),
            dynamic_graph=self.dynamic_graph)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edgeconv_widths"] = list(self.edgeconv_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


@dataclass
class DomainBatch:
    source_clouds: np.ndarray            # (B, M, 3)
    target_clouds: np.ndarray            # (B, M, 3)
    source_labels: np.ndarray | None = None       # (B,) or (B, M)
    source_soft_labels: np.ndarray | None = None  # (B, C) when mixed

    def __post_init__(self):
        if self.source_clouds.shape[0] != self.target_clouds.shape[0]:
            raise ValueError("source and target batch sizes must match")


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"cosine_lr: need 0 <= step <= total, got {step}/{total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / total))


class AdamState:
    def __init__(self, model: ModelParams, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {n: np.zeros_like(p.value) for n, p in model.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in model.params.items()}


def adam_step(model: ModelParams, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update from the accumulated gradients."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in model.params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _predict_batched(model: ModelParams, clouds: np.ndarray, mode: str,
                     batch: int = 64) -> np.ndarray:
    preds = []
    with no_grad():
        for i in range(0, clouds.shape[0], batch):
            chunk = clouds[i:i + batch]
            if mode == "classification":
                enc = models.encode_batch(chunk, model, mode="global")
                logits = models.classify_batch(enc.global_, model)
                preds.append(np.argmax(logits.data, axis=1))
            else:
                enc = models.encode_batch(chunk, model, mode="per_point")
                logits = models.segment_batch(enc.pointwise, model)
                b, m = chunk.shape[0], chunk.shape[1]
                preds.append(np.argmax(logits.data, axis=1).reshape(b, m))
    return np.concatenate(preds)


def mean_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """Per-sample mean IoU over classes present in the ground truth, averaged
    over samples."""
    scores = []
    for i in range(pred.shape[0]):
        ious = []
        for c in range(num_classes):
            gt = truth[i] == c
            if not gt.any():
                continue
            pd = pred[i] == c
            tp = np.sum(pd & gt)
            fp = np.sum(pd & ~gt)
            fn = np.sum(~pd & gt)
            ious.append(tp / (tp + fp + fn))
        scores.append(float(np.mean(ious)))
    return float(np.mean(scores))


def evaluate(model: ModelParams, dataset: Dataset, mode: str | None = None) -> float:
    """Mean accuracy (classification) or mean IoU (segmentation)."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    mode = mode or dataset.mode
    pred = _predict_batched(model, dataset.clouds, mode)
    if mode == "classification":
        return float(np.mean(pred == dataset.labels))
    return mean_iou(pred, dataset.labels, dataset.num_classes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SENC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelParams
    ema: EmaState
    adam: AdamState | None


def save_checkpoint(model: ModelParams, ema_state: EmaState,
                    adam_state: AdamState | None, path) -> None:
    arch_json = json.dumps(asdict(model.arch), sort_keys=True).encode()
    digest = hashlib.md5(arch_json).digest()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(arch_json)))
        fh.write(arch_json)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            fh.write(p.value.astype("<f8").tobytes())
        fh.write(struct.pack("<dQ", ema_state.momentum, ema_state.step))
        if adam_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Qddd", adam_state.step, adam_state.beta1,
                                 adam_state.beta2, adam_state.eps))
            for name in model.params:
                fh.write(adam_state.m[name].astype("<f8").tobytes())
                fh.write(adam_state.v[name].astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        return struct.unpack_from(fmt, raw, off), off + size

    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,), off = take("<I", 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = raw[off:off + 16]
    off += 16
    (alen,), off = take("<I", off)
    arch_json = raw[off:off + alen]
    off += alen
    if hashlib.md5(arch_json).digest() != digest:
        raise CheckpointError(f"{path}: architecture digest mismatch")
    arch_dict = json.loads(arch_json)
    for key in ("edgeconv_widths", "decoder_widths"):
        arch_dict[key] = tuple(arch_dict[key])
    arch = ArchSpec(**arch_dict)

    (count,), off = take("<I", off)
    params = {}
    for _ in range(count):
        (nlen,), off = take("<I", off)
        name = raw[off:off + nlen].decode()
        off += nlen
        (rank,), off = take("<I", off)
        dims, off = take(f"<{rank}I", off)
        size = int(np.prod(dims)) if rank else 1
        nbytes = 8 * size
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        value = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims)
        off += nbytes
        params[name] = ad.Parameter(name, value.copy())
    model = ModelParams(arch, params)

    (momentum, estep), off = take("<dQ", off)
    ema = EmaState(momentum=momentum, step=estep)
    (flag,), off = take("<B", off)
    adam = None
    if flag:
        (astep, b1, b2, eps), off = take("<Qddd", off)
        adam = AdamState(model, beta1=b1, beta2=b2, eps=eps)
        adam.step = astep
        for name, p in model.params.items():
            size = p.value.size
            for slot in (adam.m, adam.v):
                if off + 8 * size > len(raw):
                    raise CheckpointError(f"{path}: truncated checkpoint")
                slot[name] = np.frombuffer(
                    raw, dtype="<f8", count=size, offset=off
                ).reshape(p.value.shape).copy()
                off += 8 * size
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(model=model, ema=ema, adam=adam)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "l_s", "l_soft", "l_t", "l_cons", "total", "lr")


@dataclass
class TrainReport:
    config: TrainConfig
    rows: list = field(default_factory=list)   # one dict per epoch
    student: ModelParams | None = None
    teacher: ModelParams | None = None

    def metric_name(self) -> str:
        return "acc" if self.config.mode == "classification" else "miou"

    def csv_header(self) -> list[str]:
        m = self.metric_name()
        return list(METRIC_COLUMNS) + [f"student_{m}", f"teacher_{m}"]

    def write_csv(self, path) -> None:
        header = self.csv_header()
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in self.rows:
                fh.write(",".join(
                    str(row["epoch"]) if c == "epoch" else repr(row[c])
                    for c in header) + "\n")


def _jitter_batch(clouds: np.ndarray, cfg: TrainConfig,
                  rng: np.random.Generator) -> np.ndarray:
    noise = np.clip(rng.normal(0.0, cfg.jitter_sigma, size=clouds.shape),
                    -cfg.jitter_clip, cfg.jitter_clip)
    return clouds + noise


def _mix_source(clouds: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator):
    """Random within-batch pairing; one Beta draw per mixed pair.

    Each sample is mixed with probability ``pm_prob`` so the batch keeps a
    blend of original and interpolated samples (augmentation, not
    replacement); unmixed samples carry their one-hot label."""
    b = clouds.shape[0]
    perm = rng.permutation(b)
    mixed = np.array(clouds, copy=True)
    soft = np.zeros((b, cfg.num_classes))
    for i in range(b):
        if rng.random() >= cfg.pm_prob:
            soft[i, int(labels[i])] = 1.0
            continue
        gamma = mixup.sample_gamma(cfg.pm_alpha, rng=rng)
        ms = mixup.pointmixup(clouds[i], int(labels[i]), clouds[perm[i]],
                              int(labels[perm[i]]), gamma, cfg.num_classes,
                              seed=int(rng.integers(2 ** 32)))
        mixed[i] = ms.cloud
        soft[i] = ms.soft_label
    return mixed, soft


def _check_finite(parts: dict) -> None:
    for name, value in parts.items():
        if not np.isfinite(value):
            raise TrainDivergedError(f"non-finite loss component {name!r} = {value}")


def _step_loss(cfg: TrainConfig, batch: DomainBatch, student: ModelParams,
               teacher: ModelParams) -> L.LossBreakdown:
    if cfg.variant == "sen":
        return L.total_loss(batch, student, teacher, cfg.lam, mode=cfg.mode,
                            use_pm=cfg.use_pm and cfg.mode == "classification")
    if cfg.variant == "source_only":
        if cfg.mode == "classification":
            enc = models.encode_batch(batch.source_clouds, student, mode="global")
            logp = ad.log_softmax(models.classify_batch(enc.global_, student))
            if batch.source_soft_labels is not None:
                l_s = L.soft_ce_loss(logp, batch.source_soft_labels)
            else:
                l_s = L.ce_loss(logp, batch.source_labels)
        else:
            enc = models.encode_batch(batch.source_clouds, student, mode="per_point")
            logp = ad.log_softmax(models.segment_batch(enc.pointwise, student))
            l_s = L.ce_loss(logp, np.asarray(batch.source_labels).reshape(-1))
        return L.LossBreakdown(l_s=l_s.item(), l_soft=0.0, l_t=0.0, l_cons=0.0,
                               total=l_s.item(), lam=0.0, total_tensor=l_s)
    if cfg.variant == "autoencoder":
        enc = models.encode_batch(batch.target_clouds, student, mode="global")
        decoded = models.decode_batch(enc.global_, student)
        m = batch.target_clouds.shape[-2]
        l_t = ad.scalar_mul(L.recon_loss(decoded, batch.target_clouds), 1.0 / m)
        return L.LossBreakdown(l_s=0.0, l_soft=0.0, l_t=l_t.item(), l_cons=0.0,
                               total=l_t.item(), lam=0.0, total_tensor=l_t)
    raise ValueError(f"unknown variant {cfg.variant!r}")


def train(cfg: TrainConfig, source: Splits, target: Splits,
          run_dir=None, eval_split: str = "test", log=None) -> TrainReport:
    """Run the full joint loop; returns per-epoch metrics and both models.

    ``target`` labels are used only for evaluation, never for training.
    """
    if len(source.train) == 0 or len(target.train) == 0:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    # Mixup draws come from their own stream so that toggling use_pm leaves
    # the shuffle/jitter randomness untouched (paired comparisons per seed).
    mix_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x504D]))
    student = ModelParams.init(cfg.arch(), seed=int(rng.integers(2 ** 32)))
    teacher = init_teacher(student)
    adam = AdamState(student)
    ema_state = EmaState(momentum=cfg.ema_momentum)

    report = TrainReport(config=cfg)
    metric = report.metric_name()
    eval_ds = getattr(target, eval_split)
    steps_per_epoch = max(1, min(len(source.train), len(target.train)) // cfg.batch_size)

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        src_order = rng.permutation(len(source.train))
        tgt_order = rng.permutation(len(target.train))
        sums = {"l_s": 0.0, "l_soft": 0.0, "l_t": 0.0, "l_cons": 0.0, "total": 0.0}

        for step in range(steps_per_epoch):
            si = src_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            ti = tgt_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            src_clouds = _jitter_batch(source.train.clouds[si], cfg, rng)
            tgt_clouds = _jitter_batch(target.train.clouds[ti], cfg, rng)
            src_labels = source.train.labels[si]
            soft = None
            if (cfg.use_pm and cfg.mode == "classification"
                    and cfg.variant in ("sen", "source_only")):
                src_clouds, soft = _mix_source(src_clouds, src_labels, cfg,
                                               mix_rng)
            batch = DomainBatch(source_clouds=src_clouds, target_clouds=tgt_clouds,
                                source_labels=src_labels, source_soft_labels=soft)

            student.zero_grad()
            breakdown = _step_loss(cfg, batch, student, teacher)
            _check_finite(breakdown.components())
            backward(breakdown.total_tensor)
            adam_step(student, adam, lr)
            ema_update(teacher, student, cfg.ema_momentum)
            ema_state.step += 1
            for key in sums:
                sums[key] += breakdown.components()[key]

        row = {"epoch": epoch, "lr": lr}
        for key, total in sums.items():
            row[key] = total / steps_per_epoch
        row[f"student_{metric}"] = evaluate(student, eval_ds, cfg.mode)
        row[f"teacher_{metric}"] = evaluate(teacher, eval_ds, cfg.mode)
        report.rows.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  total {row['total']:.4f}  "
                f"student_{metric} {row[f'student_{metric}']:.3f}  lr {lr:.2e}")

    report.student = student
    report.teacher = teacher
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(run_dir / "metrics.csv")
        save_checkpoint(student, ema_state, adam, run_dir / "student.ckpt")
        save_checkpoint(teacher, ema_state, None, run_dir / "teacher.ckpt")
        with open(run_dir / "config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return report
