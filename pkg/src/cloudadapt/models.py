"""Student/teacher network components: edge-convolution encoder over kNN
graphs, classification and per-point segmentation heads, and a grid-folding
decoder that reconstructs a cloud from the global feature.

All forwards are batched internally: a batch of B clouds with M points each
is flattened to one (B*M, ...) tensor with block-offset neighbor indices, so
each layer is a single matmul regardless of batch size. Batch statistics are
never used; each layer carries a learnable per-channel scale/shift instead
of batch normalization so that weight averaging between student and teacher
stays well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; immutable, shared by student and teacher."""

    num_classes: int
    points: int
    k: int = 8
    edgeconv_widths: tuple = (32, 64)
    feature_dim: int = 128
    classifier_hidden: int = 64
    seg_hidden: int = 64
    decoder_widths: tuple = (128, 128, 64, 3)
    dynamic_graph: bool = True

    def describe(self) -> str:
        return repr(self)


class EncodeOut(NamedTuple):
    pointwise: Tensor | None  # (B*M, 2F) per-point features, None in global mode
    global_: Tensor           # (B, F)


class ModelParams:
    """Ordered name -> Parameter map for encoder, heads and decoder."""

    def __init__(self, arch: ArchSpec, params: dict[str, Parameter]):
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: ArchSpec, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        params: dict[str, Parameter] = {}

        def linear(prefix: str, fan_in: int, fan_out: int):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{prefix}.w"] = Parameter(
                f"{prefix}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params[f"{prefix}.b"] = Parameter(
                f"{prefix}.b", rng.uniform(-bound, bound, size=(fan_out,)))

        def affine(prefix: str, width: int):
            params[f"{prefix}.scale"] = Parameter(f"{prefix}.scale", np.ones(width))
            params[f"{prefix}.shift"] = Parameter(f"{prefix}.shift", np.zeros(width))

        f_in = 3
        for i, width in enumerate(arch.edgeconv_widths):
            linear(f"encoder.edgeconv{i}", 2 * f_in, width)
            affine(f"encoder.edgeconv{i}", width)
            f_in = width
        fused_in = sum(arch.edgeconv_widths)
        linear("encoder.fuse", fused_in, arch.feature_dim)
        affine("encoder.fuse", arch.feature_dim)

        linear("classifier.fc0", arch.feature_dim, arch.classifier_hidden)
        linear("classifier.fc1", arch.classifier_hidden, arch.num_classes)

        linear("segment.fc0", 2 * arch.feature_dim, arch.seg_hidden)
        linear("segment.fc1", arch.seg_hidden, arch.num_classes)

        d_in = arch.feature_dim + 2
        for i, width in enumerate(arch.decoder_widths):
            linear(f"decoder.fc{i}", d_in, width)
            d_in = width

        return cls(arch, params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _linear(x: Tensor, model: ModelParams, prefix: str) -> Tensor:
    w = model[f"{prefix}.w"].tensor
    b = model[f"{prefix}.b"].tensor
    out = ad.matmul(x, w)
    return ad.add(out, ad.broadcast_rows(b, out.shape[0]))


def _affine(x: Tensor, model: ModelParams, prefix: str) -> Tensor:
    scale = model[f"{prefix}.scale"].tensor
    shift = model[f"{prefix}.shift"].tensor
    n = x.shape[0]
    out = ad.mul_elementwise(x, ad.broadcast_rows(scale, n))
    return ad.add(out, ad.broadcast_rows(shift, n))


def _edgeconv(h: Tensor, nbr_idx: np.ndarray, center_idx: np.ndarray, k: int,
              model: ModelParams, prefix: str) -> Tensor:
    """Max over neighbors of leaky_relu(affine(linear(concat(h_i, h_j - h_i))))."""
    hi = ad.gather_rows(h, center_idx)
    hj = ad.gather_rows(h, nbr_idx)
    edge = ad.concat_last_axis(hi, ad.sub(hj, hi))
    z = ad.leaky_relu(_affine(_linear(edge, model, prefix), model, prefix))
    p = h.shape[0]
    z = ad.reshape(z, (p, k, z.shape[1]))
    return ad.reduce_max_over_axis(z, axis=1)


def edgeconv_layer(features: Tensor, graph: np.ndarray, model: ModelParams,
                   prefix: str) -> Tensor:
    """Single-cloud edge convolution over an (m, k) neighbor index array."""
    graph = np.asarray(graph)
    m, k = graph.shape
    center = np.repeat(np.arange(m), k)
    return _edgeconv(features, graph.reshape(-1), center, k, model, prefix)


def _batched_graph(points: np.ndarray, b: int, m: int, k: int) -> np.ndarray:
    """Per-sample kNN indices offset into the flattened (b*m, ...) layout."""
    flat = np.empty((b, m * k), dtype=np.int64)
    per = points.reshape(b, m, -1)
    for i in range(b):
        flat[i] = (kernels.knn_indices(per[i], k) + i * m).reshape(-1)
    return flat.reshape(-1)


def encode_batch(clouds: np.ndarray, model: ModelParams,
                 mode: str = "global") -> EncodeOut:
    """Encode a (B, M, 3) batch. Global mode max-pools over points; per_point
    mode additionally returns per-point features with the global feature
    concatenated back onto every point."""
    arch = model.arch
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim == 2:
        clouds = clouds[None]
    b, m, _ = clouds.shape
    k = arch.k
    center = np.repeat(np.arange(b * m), k)

    h = Tensor(clouds.reshape(b * m, 3))
    nbr = _batched_graph(clouds.reshape(b * m, 3), b, m, k)
    layer_outs = []
    for i in range(len(arch.edgeconv_widths)):
        if i > 0 and arch.dynamic_graph:
            nbr = _batched_graph(h.data, b, m, k)
        h = _edgeconv(h, nbr, center, k, model, f"encoder.edgeconv{i}")
        layer_outs.append(h)

    fused = layer_outs[0]
    for extra in layer_outs[1:]:
        fused = ad.concat_last_axis(fused, extra)
    pointwise = ad.leaky_relu(_affine(_linear(fused, model, "encoder.fuse"),
                                     model, "encoder.fuse"))
    stacked = ad.reshape(pointwise, (b, m, arch.feature_dim))
    global_ = ad.reduce_max_over_axis(stacked, axis=1)

    if mode == "global":
        return EncodeOut(pointwise=None, global_=global_)
    if mode == "per_point":
        rep = ad.gather_rows(global_, np.repeat(np.arange(b), m))
        return EncodeOut(pointwise=ad.concat_last_axis(pointwise, rep),
                         global_=global_)
    raise ValueError(f"unknown encode mode {mode!r}")


def encode(cloud, model: ModelParams, mode: str = "global"):
    """Single-cloud encoding: (F,) global feature or (M, 2F) per-point features."""
    out = encode_batch(np.asarray(cloud, dtype=np.float64)[None], model, mode)
    if mode == "global":
        return ad.reshape(out.global_, (model.arch.feature_dim,))
    return out.pointwise


def classify_batch(global_feat: Tensor, model: ModelParams) -> Tensor:
    h = ad.leaky_relu(_linear(global_feat, model, "classifier.fc0"))
    return _linear(h, model, "classifier.fc1")


def classify(feature, model: ModelParams) -> Tensor:
    feat = feature if isinstance(feature, Tensor) else Tensor(feature)
    if len(feat.shape) == 1:
        feat = ad.reshape(feat, (1, feat.shape[0]))
        return ad.reshape(classify_batch(feat, model), (model.arch.num_classes,))
    return classify_batch(feat, model)


def segment_batch(pointwise_feat: Tensor, model: ModelParams) -> Tensor:
    h = ad.leaky_relu(_linear(pointwise_feat, model, "segment.fc0"))
    return _linear(h, model, "segment.fc1")


def segment(features, model: ModelParams) -> Tensor:
    feat = features if isinstance(features, Tensor) else Tensor(features)
    return segment_batch(feat, model)


def folding_grid(m: int) -> np.ndarray:
    """First m points of a g x g uniform grid over [-0.5, 0.5]^2, g = ceil(sqrt(m))."""
    g = int(np.ceil(np.sqrt(m)))
    axis = np.linspace(-0.5, 0.5, g)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)[:m]


def decode_batch(global_feat: Tensor, model: ModelParams) -> Tensor:
    """Fold the per-sample grid through the decoder MLP: returns (B*M, 3)."""
    arch = model.arch
    b = global_feat.shape[0]
    m = arch.points
    rep = ad.gather_rows(global_feat, np.repeat(np.arange(b), m))
    grid = Tensor(np.tile(folding_grid(m), (b, 1)))
    h = ad.concat_last_axis(rep, grid)
    last = len(arch.decoder_widths) - 1
    for i in range(len(arch.decoder_widths)):
        h = _linear(h, model, f"decoder.fc{i}")
        if i < last:
            h = ad.leaky_relu(h)
    return h


def decode(feature, model: ModelParams) -> Tensor:
    """Single global feature -> (M, 3) reconstructed cloud."""
    feat = feature if isinstance(feature, Tensor) else Tensor(feature)
    if len(feat.shape) == 1:
        feat = ad.reshape(feat, (1, feat.shape[0]))
    return decode_batch(feat, model)
