"""Procedural domain-shifted point cloud datasets plus the PCDS binary
format.

Shapes are sampled uniformly on analytic surfaces, normalized to the unit
sphere, and pushed through a domain profile (occlusion behind a random
half-space, density-biased subsampling, Gaussian noise, then FPS to the
final count). A clean profile and a noisy profile over the same shape
families give a source/target pair with a shared label space.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import farthest_point_sample, normalize_unit_sphere

# shared part-label space in segmentation mode
PART_SIDE, PART_TOP, PART_BOTTOM = 0, 1, 2
NUM_PART_CLASSES = 3

FAMILIES = ("sphere", "box", "cylinder", "cone", "torus", "plane_cross")


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    scale_jitter: tuple = (0.7, 1.3)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")


@dataclass(frozen=True)
class DomainProfile:
    noise_sigma: float = 0.0
    occlusion_fraction: float = 0.0
    density_bias: float = 0.0
    dropout_fraction: float = 0.0

    def __post_init__(self):
        if self.occlusion_fraction + self.dropout_fraction >= 0.9:
            raise ValueError("occlusion + dropout must stay below 0.9")


CLEAN_PROFILE = DomainProfile()
SHIFTED_PROFILE = DomainProfile(
    noise_sigma=0.04, occlusion_fraction=0.1, density_bias=3.0,
    dropout_fraction=0.45)


# ---------------------------------------------------------------------------
# analytic surface sampling
# ---------------------------------------------------------------------------

def _sample_sphere(n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    labels = np.where(v[:, 2] > 0.3, PART_TOP,
                      np.where(v[:, 2] < -0.3, PART_BOTTOM, PART_SIDE))
    return v, labels


def _sample_box(n, rng, extents):
    ex, ey, ez = extents
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    labels = np.full(n, PART_SIDE)
    for i in range(n):
        f = face[i]
        if f < 2:                      # +-x side faces
            pts[i] = (ex * (1 if f == 0 else -1), ey * u[i, 0], ez * u[i, 1])
        elif f < 4:                    # +-y side faces
            pts[i] = (ex * u[i, 0], ey * (1 if f == 2 else -1), ez * u[i, 1])
        else:                          # top / bottom
            pts[i] = (ex * u[i, 0], ey * u[i, 1], ez * (1 if f == 4 else -1))
            labels[i] = PART_TOP if f == 4 else PART_BOTTOM
    return pts, labels


def _sample_cylinder(n, rng, radius, height):
    lateral = 2 * np.pi * radius * 2 * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        if part[i] == 0:
            z = rng.uniform(-height, height)
            pts[i] = (radius * np.cos(theta[i]), radius * np.sin(theta[i]), z)
            labels[i] = PART_SIDE
        else:
            r = radius * np.sqrt(rng.uniform())
            z = height if part[i] == 1 else -height
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), z)
            labels[i] = PART_TOP if part[i] == 1 else PART_BOTTOM
    return pts, labels


def _sample_cone(n, rng, radius, height):
    slant = np.sqrt(radius ** 2 + (2 * height) ** 2)
    lateral = np.pi * radius * slant
    base = np.pi * radius ** 2
    on_base = rng.uniform(size=n) < base / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        if on_base[i]:
            r = radius * np.sqrt(rng.uniform())
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), -height)
            labels[i] = PART_BOTTOM
        else:
            # area element grows linearly from apex to rim
            t = np.sqrt(rng.uniform())
            r = radius * t
            z = height - 2 * height * t
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), z)
            labels[i] = PART_TOP if z > height * 0.3 else PART_SIDE
    return pts, labels


def _sample_torus(n, rng, major, minor):
    pts = np.empty((n, 3))
    count = 0
    while count < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * (n - count))
        v = rng.uniform(0, 2 * np.pi, size=2 * (n - count))
        # rejection on the surface-area weight (major + minor*cos v)
        accept = rng.uniform(size=v.size) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        take = min(u.size, n - count)
        uu, vv = u[:take], v[:take]
        pts[count:count + take, 0] = (major + minor * np.cos(vv)) * np.cos(uu)
        pts[count:count + take, 1] = (major + minor * np.cos(vv)) * np.sin(uu)
        pts[count:count + take, 2] = minor * np.sin(vv)
        count += take
    labels = np.where(pts[:, 2] > minor * 0.4, PART_TOP,
                      np.where(pts[:, 2] < -minor * 0.4, PART_BOTTOM, PART_SIDE))
    return pts, labels


def _sample_plane_cross(n, rng):
    # two unit squares intersecting at a right angle along the z axis
    which = rng.uniform(size=n) < 0.5
    u = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    pts[which] = np.stack([u[which, 0], np.zeros(which.sum()), u[which, 1]], axis=1)
    pts[~which] = np.stack([np.zeros((~which).sum()), u[~which, 0], u[~which, 1]], axis=1)
    labels = np.where(pts[:, 2] > 0.3, PART_TOP,
                      np.where(pts[:, 2] < -0.3, PART_BOTTOM, PART_SIDE))
    return pts, labels


def generate_shape(spec: ShapeSpec, m_raw: int, seed=None):
    """Sample m_raw surface points of one shape instance, unit-sphere
    normalized. Returns (points, part_labels)."""
    if m_raw < 64:
        raise ValueError(f"generate_shape: m_raw must be >= 64, got {m_raw}")
    rng = np.random.default_rng(seed)
    lo, hi = spec.scale_jitter
    if spec.family == "sphere":
        pts, labels = _sample_sphere(m_raw, rng)
        pts = pts * rng.uniform(lo, hi, size=3)
    elif spec.family == "box":
        pts, labels = _sample_box(m_raw, rng, (1.0, rng.uniform(lo, hi) * 0.7,
                                               rng.uniform(lo, hi) * 0.5))
    elif spec.family == "cylinder":
        pts, labels = _sample_cylinder(m_raw, rng, 0.5 * rng.uniform(lo, hi),
                                       rng.uniform(lo, hi))
    elif spec.family == "cone":
        pts, labels = _sample_cone(m_raw, rng, 0.7 * rng.uniform(lo, hi),
                                   rng.uniform(lo, hi))
    elif spec.family == "torus":
        pts, labels = _sample_torus(m_raw, rng, 1.0, 0.35 * rng.uniform(lo, hi))
        pts = pts * rng.uniform(lo, hi)
    else:
        pts, labels = _sample_plane_cross(m_raw, rng)
        pts = pts * rng.uniform(lo, hi, size=3)
    return normalize_unit_sphere(pts), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# domain shift
# ---------------------------------------------------------------------------

def apply_domain(cloud, profile: DomainProfile, m_final: int, seed=None,
                 labels=None):
    """Occlude, density-bias, add noise, FPS down to m_final.

    Returns (points, labels) where labels is None when not provided.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    lab = None if labels is None else np.asarray(labels)
    rng = np.random.default_rng(seed)

    if profile.occlusion_fraction > 0:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        proj = pts @ direction
        cut = np.quantile(proj, profile.occlusion_fraction)
        keep = proj >= cut
        pts = pts[keep]
        if lab is not None:
            lab = lab[keep]

    if profile.dropout_fraction > 0:
        n_keep = int(round((1.0 - profile.dropout_fraction) * pts.shape[0]))
        if profile.density_bias > 0:
            anchor = pts[rng.integers(pts.shape[0])]
            dist = np.linalg.norm(pts - anchor, axis=1)
            w = (dist + 0.1) ** (-profile.density_bias)
            w /= w.sum()
        else:
            w = None
        keep = rng.choice(pts.shape[0], size=n_keep, replace=False, p=w)
        keep.sort()
        pts = pts[keep]
        if lab is not None:
            lab = lab[keep]

    if pts.shape[0] < m_final:
        raise ValueError(
            f"apply_domain: only {pts.shape[0]} points survive, need {m_final}")

    if profile.noise_sigma > 0:
        pts = pts + rng.normal(0.0, profile.noise_sigma, size=pts.shape)

    idx = farthest_point_sample(pts, m_final, start=int(rng.integers(pts.shape[0])))
    pts = pts[idx]
    if lab is not None:
        lab = lab[idx]
    return pts, lab


# ---------------------------------------------------------------------------
# datasets and the PCDS file format
# ---------------------------------------------------------------------------

MAGIC = b"PCDS"
VERSION = 1


@dataclass
class Dataset:
    clouds: np.ndarray           # (N, m, 3) float64
    labels: np.ndarray           # (N,) class ids, or (N, m) part ids
    num_classes: int
    mode: str = "classification"

    def __len__(self):
        return self.clouds.shape[0]

    @property
    def points(self) -> int:
        return self.clouds.shape[1]


def save_pcds(dataset: Dataset, path):
    mode_flag = 0 if dataset.mode == "classification" else 1
    n, m, _ = dataset.clouds.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", VERSION, mode_flag, n, m, dataset.num_classes))
        for i in range(n):
            if mode_flag == 0:
                fh.write(struct.pack("<H", int(dataset.labels[i])))
            else:
                fh.write(dataset.labels[i].astype("<u2").tobytes())
            fh.write(dataset.clouds[i].astype("<f8").tobytes())


class DatasetFormatError(ValueError):
    pass


def load_pcds(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, mode_flag, n, m, c = struct.unpack_from("<IIIII", raw, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    mode = "classification" if mode_flag == 0 else "segmentation"
    off = 24
    label_bytes = 2 if mode_flag == 0 else 2 * m
    record = label_bytes + 24 * m
    if len(raw) != off + n * record:
        raise DatasetFormatError(
            f"{path}: truncated (expected {off + n * record} bytes, got {len(raw)})")
    clouds = np.empty((n, m, 3))
    if mode_flag == 0:
        labels = np.empty(n, dtype=np.int64)
    else:
        labels = np.empty((n, m), dtype=np.int64)
    for i in range(n):
        if mode_flag == 0:
            labels[i] = struct.unpack_from("<H", raw, off)[0]
        else:
            labels[i] = np.frombuffer(raw, dtype="<u2", count=m, offset=off)
        off += label_bytes
        clouds[i] = np.frombuffer(raw, dtype="<f8", count=3 * m, offset=off).reshape(m, 3)
        off += 24 * m
    return Dataset(clouds=clouds, labels=labels, num_classes=c, mode=mode)


def default_class_specs(mode: str = "classification") -> list[ShapeSpec]:
    if mode == "classification":
        return [ShapeSpec(f) for f in FAMILIES]
    return [ShapeSpec("cylinder"), ShapeSpec("box"), ShapeSpec("cone")]


def make_dataset(classes, per_class: int, profile: DomainProfile, m_final: int,
                 seed: int, mode: str = "classification") -> Dataset:
    """Generate a class-balanced in-memory dataset."""
    clouds, labels = [], []
    for ci, spec in enumerate(classes):
        for j in range(per_class):
            # per-sample seed: stable across backends and thread counts
            s = hashlib.blake2s(
                f"{seed}:{mode}:{ci}:{j}".encode(), digest_size=8).digest()
            sub = np.random.SeedSequence(int.from_bytes(s, "little"))
            g_seed, d_seed = sub.spawn(2)
            m_raw = max(4 * m_final, 256)
            pts, part = generate_shape(spec, m_raw, seed=g_seed)
            pts, part = apply_domain(pts, profile, m_final, seed=d_seed, labels=part)
            pts = normalize_unit_sphere(pts)
            clouds.append(pts)
            labels.append(part if mode == "segmentation" else ci)
    num_classes = NUM_PART_CLASSES if mode == "segmentation" else len(classes)
    return Dataset(clouds=np.stack(clouds), labels=np.asarray(labels),
                   num_classes=num_classes, mode=mode)


def split_dataset(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Class-balanced train/val/test split (classification stratifies on the
    class id; segmentation splits uniformly)."""
    n = len(dataset)
    rng = np.random.default_rng(seed)
    if dataset.mode == "classification":
        order = []
        for c in np.unique(dataset.labels):
            idx = np.flatnonzero(dataset.labels == c)
            rng.shuffle(idx)
            order.append(idx)
        buckets = ([], [], [])
        for idx in order:
            k = idx.size
            n_train = int(round(fractions[0] * k))
            n_val = int(round(fractions[1] * k))
            buckets[0].extend(idx[:n_train])
            buckets[1].extend(idx[n_train:n_train + n_val])
            buckets[2].extend(idx[n_train + n_val:])
        parts = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    else:
        idx = rng.permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        parts = [np.sort(idx[:n_train]), np.sort(idx[n_train:n_train + n_val]),
                 np.sort(idx[n_train + n_val:])]
    return tuple(
        Dataset(clouds=dataset.clouds[p], labels=dataset.labels[p],
                num_classes=dataset.num_classes, mode=dataset.mode)
        for p in parts)


def build_dataset(classes, per_class: int, profile: DomainProfile, m_final: int,
                  seed: int, out_dir, mode: str = "classification",
                  fractions=(0.7, 0.1, 0.2)) -> dict:
    """Generate, split and write train/val/test PCDS files; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = make_dataset(classes, per_class, profile, m_final, seed, mode)
    train, val, test = split_dataset(full, fractions, seed=seed)
    paths = {}
    for name, ds in (("train", train), ("val", val), ("test", test)):
        path = out_dir / f"{name}.pcds"
        save_pcds(ds, path)
        paths[name] = path
    return paths


def export_csv(dataset: Dataset, path):
    """Debug dump: one point per row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "x", "y", "z", "label"])
        for i in range(len(dataset)):
            for j in range(dataset.points):
                label = (dataset.labels[i, j] if dataset.mode == "segmentation"
                         else dataset.labels[i])
                x, y, z = dataset.clouds[i, j]
                writer.writerow([i, repr(x), repr(y), repr(z), int(label)])
