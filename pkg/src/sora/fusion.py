"""Cross-attention fusion of the 3D global feature into 2D slice features, plus
the three organ-classification heads and their summed cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.nn import Linear, Module, attention, merge_heads, split_heads
from .core.tensor import Tensor, as_tensor
from .encoders import EncoderConfig, SliceEncoder2D, VolumeEncoder3D
from .errors import ConfigError, ContractError, DimensionError

FUSION_MODES = ("cross_attn", "concat", "3d_only", "2d_only")


@dataclass
class FusedFeatureSet:
    """Per-volume (or batched, with a leading axis) image features.

    ``f2d``/``fout``/``fused`` are ``(..., D, d_img)``; ``f3d`` is ``(..., d_img)``.
    Single-stream ablations leave the unused stream as ``None``.
    """

    f2d: Tensor | None
    f3d: Tensor | None
    fout: Tensor | None
    fused: Tensor
    attn_weights: np.ndarray | None = None


class CrossAttention(Module):
    """Multi-head attention with one query (the 3D feature) over the D slice features.

    All projections are bias-free, so a zero value projection gives a zero output.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"model width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, bias=False)
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng, bias=False)
        self.o = Linear(d, d, rng, bias=False)

    def forward(self, f3d: Tensor, f2d: Tensor) -> tuple[Tensor, Tensor]:
        """Returns the attended vector ``(..., d)`` and weights ``(..., heads, D)``."""
        f3d, f2d = as_tensor(f3d), as_tensor(f2d)
        if f2d.ndim < 2 or f3d.shape[-1] != f2d.shape[-1] or f3d.shape[:-1] != f2d.shape[:-2]:
            raise DimensionError(f"cross attention: f3d {f3d.shape} incompatible with f2d {f2d.shape}")
        q = split_heads(ops.reshape(self.q(f3d), (*f3d.shape[:-1], 1, f3d.shape[-1])), self.n_heads)
        k = split_heads(self.k(f2d), self.n_heads)
        v = split_heads(self.v(f2d), self.n_heads)
        out, weights = attention(q, k, v)                     # (..., h, 1, dh), (..., h, 1, D)
        out = self.o(merge_heads(out))                        # (..., 1, d)
        out = ops.reshape(out, f3d.shape)
        return out, ops.reshape(weights, (*weights.shape[:-2], weights.shape[-1]))


def cross_attend(f3d, f2d, xattn: CrossAttention) -> Tensor:
    """Single-query attention output broadcast across the D slice rows."""
    f2d = as_tensor(f2d)
    out, _ = xattn(f3d, f2d)
    lead = out.shape[:-1]
    return ops.broadcast_to(ops.reshape(out, (*lead, 1, out.shape[-1])), f2d.shape)


def fuse(f2d, fout) -> Tensor:
    f2d, fout = as_tensor(f2d), as_tensor(fout)
    if f2d.shape != fout.shape:
        raise DimensionError(f"fuse: shapes {f2d.shape} and {fout.shape} differ")
    return ops.add(f2d, fout)


class ImageHeads(Module):
    def __init__(self, d: int, n_organs: int, rng: np.random.Generator):
        super().__init__()
        self.head_2d = Linear(d, n_organs, rng)
        self.head_3d = Linear(d, n_organs, rng)
        self.head_fused = Linear(d, n_organs, rng)


def _row_labels(organ_id, n_rows_per_item: int, lead: tuple[int, ...]) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(organ_id, dtype=np.int64), lead)
    return np.repeat(labels.reshape(-1), n_rows_per_item)


def image_loss(heads: ImageHeads, feats: FusedFeatureSet, organ_id) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(l2d, l3d, lfused, total).  Slice-row heads average over rows; with a
    batch axis each term is the mean over volumes.  Missing streams contribute 0."""
    fused = feats.fused
    lead, D = fused.shape[:-2], fused.shape[-2]
    n = heads.head_fused.weight.shape[1]
    labels = np.asarray(organ_id, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= n):
        raise ContractError(f"organ_id must lie in [0, {n}), got {organ_id}")
    zero = Tensor(0.0)
    l2d = ops.cross_entropy(heads.head_2d(feats.f2d), _row_labels(labels, D, lead)) if feats.f2d is not None else zero
    l3d = ops.cross_entropy(heads.head_3d(feats.f3d), _row_labels(labels, 1, lead)) if feats.f3d is not None else zero
    lf = ops.cross_entropy(heads.head_fused(fused), _row_labels(labels, D, lead))
    return l2d, l3d, lf, ops.add(ops.add(l2d, l3d), lf)


class ImageModel(Module):
    """Both encoders, the fusion step and the classification heads.

    ``mode`` selects how the fused rows are formed; ``concat`` and the
    single-stream modes exist for ablation runs only.
    """

    def __init__(self, cfg: EncoderConfig, n_organs: int, rng: np.random.Generator, mode: str = "cross_attn"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        cfg.validate()
        self.cfg = cfg
        self.mode = mode
        if mode != "3d_only":
            self.enc2d = SliceEncoder2D(cfg, rng)
        if mode != "2d_only":
            self.enc3d = VolumeEncoder3D(cfg, rng)
        if mode == "cross_attn":
            self.xattn = CrossAttention(cfg.d_img, cfg.n_heads, rng)
        elif mode == "concat":
            self.mix = Linear(2 * cfg.d_img, cfg.d_img, rng)
        self.heads = ImageHeads(cfg.d_img, n_organs, rng)

    def forward(self, voxels) -> FusedFeatureSet:
        voxels = as_tensor(voxels)
        f2d = self.enc2d(voxels) if self.mode != "3d_only" else None
        f3d = self.enc3d(voxels) if self.mode != "2d_only" else None
        if self.mode == "cross_attn":
            out, w = self.xattn(f3d, f2d)
            fout = ops.broadcast_to(ops.reshape(out, (*out.shape[:-1], 1, out.shape[-1])), f2d.shape)
            return FusedFeatureSet(f2d, f3d, fout, fuse(f2d, fout), w.data)
        if self.mode == "concat":
            rows = ops.broadcast_to(ops.reshape(f3d, (*f3d.shape[:-1], 1, f3d.shape[-1])), f2d.shape)
            fused = self.mix(ops.concat([f2d, rows], axis=-1))
            return FusedFeatureSet(f2d, f3d, None, fused)
        if self.mode == "3d_only":
            D = self.cfg.volume_shape[0]
            fused = ops.broadcast_to(ops.reshape(f3d, (*f3d.shape[:-1], 1, f3d.shape[-1])), (*f3d.shape[:-1], D, f3d.shape[-1]))
            return FusedFeatureSet(None, f3d, None, fused)
        return FusedFeatureSet(f2d, None, None, f2d)
