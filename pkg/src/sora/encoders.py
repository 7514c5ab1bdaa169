"""Slice-level (2D) and volume-level (3D) transformer encoders with CLS tokens."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import ops
from .core.nn import LayerNorm, Linear, Module, TransformerBlock, parameter
from .core.tensor import Tensor, as_tensor
from .errors import ConfigError


@dataclass
class EncoderConfig:
    d_img: int = 32
    n_blocks_2d: int = 2
    n_blocks_3d: int = 6
    n_heads: int = 4
    patch_2d: tuple[int, int] = (8, 8)
    patch_3d: tuple[int, int, int] = (2, 8, 8)
    volume_shape: tuple[int, int, int] = (8, 32, 32)
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.d_img < 1 or self.n_heads < 1:
            raise ConfigError("d_img and n_heads must be positive")
        if self.d_img % self.n_heads:
            raise ConfigError(f"d_img={self.d_img} is not divisible by n_heads={self.n_heads}")
        if self.n_blocks_2d < 0 or self.n_blocks_3d < 0:
            raise ConfigError("block counts must be non-negative")
        D, H, W = self.volume_shape
        for name, n, p in (("H", H, self.patch_2d[0]), ("W", W, self.patch_2d[1])):
            if p <= 0 or n % p:
                raise ConfigError(f"2D patch extent {p} does not divide {name}={n}")
        for name, n, p in zip("DHW", self.volume_shape, self.patch_3d):
            if p <= 0 or n % p:
                raise ConfigError(f"3D patch extent {p} does not divide {name}={n}")

    @property
    def tokens_2d(self) -> int:
        _, H, W = self.volume_shape
        return (H // self.patch_2d[0]) * (W // self.patch_2d[1])

    @property
    def tokens_3d(self) -> int:
        return int(np.prod([n // p for n, p in zip(self.volume_shape, self.patch_3d)]))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("patch_2d", "patch_3d", "volume_shape"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        for k in ("patch_2d", "patch_3d", "volume_shape"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _prepend_cls(tokens: Tensor, cls: Tensor) -> Tensor:
    *lead, _, d = tokens.shape
    return ops.concat([ops.broadcast_to(cls, (*lead, 1, d)), tokens], axis=-2)


class _CLSTransformer(Module):
    """CLS + learned positional embedding + pre-norm blocks + final LayerNorm."""

    def __init__(self, n_tokens: int, d: int, n_blocks: int, n_heads: int, mlp_ratio: int, rng):
        super().__init__()
        self.cls = parameter(rng.normal(0.0, 0.02, size=(1, d)))
        self.pos = parameter(rng.normal(0.0, 0.02, size=(n_tokens + 1, d)))
        self.blocks = [TransformerBlock(d, n_heads, rng, mlp_ratio) for _ in range(n_blocks)]
        self.norm = LayerNorm(d)

    def run(self, tokens: Tensor) -> Tensor:
        x = ops.add(_prepend_cls(tokens, self.cls), self.pos)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return ops.index(x, (..., 0, slice(None)))


class SliceEncoder2D(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = Linear(cfg.patch_2d[0] * cfg.patch_2d[1], cfg.d_img, rng)
        self.body = _CLSTransformer(cfg.tokens_2d, cfg.d_img, cfg.n_blocks_2d, cfg.n_heads, cfg.mlp_ratio, rng)

    def forward(self, slices) -> Tensor:
        """``(..., H, W)`` -> ``(..., d_img)``: CLS output per slice."""
        slices = as_tensor(slices)
        if tuple(slices.shape[-2:]) != tuple(self.cfg.volume_shape[1:]):
            raise ConfigError(f"slice shape {slices.shape[-2:]} does not match configured {self.cfg.volume_shape[1:]}")
        return self.body.run(self.embed(ops.patchify2d(slices, self.cfg.patch_2d)))


class VolumeEncoder3D(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        fan_in = int(np.prod(cfg.patch_3d))
        self.kernel = parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(cfg.d_img, *cfg.patch_3d)))
        self.kernel_bias = parameter(np.zeros(cfg.d_img))
        self.body = _CLSTransformer(cfg.tokens_3d, cfg.d_img, cfg.n_blocks_3d, cfg.n_heads, cfg.mlp_ratio, rng)

    def forward(self, volumes) -> Tensor:
        """``(..., D, H, W)`` -> ``(..., d_img)``."""
        volumes = as_tensor(volumes)
        if tuple(volumes.shape[-3:]) != tuple(self.cfg.volume_shape):
            raise ConfigError(f"volume shape {volumes.shape[-3:]} does not match configured {self.cfg.volume_shape}")
        return self.body.run(ops.conv3d(volumes, self.kernel, self.kernel_bias, self.cfg.patch_3d))


def _voxels(vol):
    return vol.voxels if hasattr(vol, "voxels") else vol


def encode_slice_2d(x_l, enc: SliceEncoder2D) -> Tensor:
    return enc(x_l)


def encode_volume_2d(vol, enc: SliceEncoder2D) -> Tensor:
    """One CLS feature per slice: ``(D, d_img)`` (or batched ``(B, D, d_img)``)."""
    return enc(_voxels(vol))


def encode_volume_3d(vol, enc: VolumeEncoder3D) -> Tensor:
    return enc(_voxels(vol))
