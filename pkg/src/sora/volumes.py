"""Synthetic organ volumes.

Each organ is an ellipsoid with its own centre, radii, base intensity and
texture orientation/frequency; every case jitters those parameters.  An organ
volume is the organ's masked intensities on ``depth`` slices sampled
uniformly across the mask's axial extent.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core.io import load_tensor, save_tensor
from .errors import ConfigError, ContractError


@dataclass
class VolumeConfig:
    n_organs: int = 7
    depth: int = 8            # D: sampled slices per organ
    height: int = 32
    width: int = 32
    full_depth: int = 24      # axial extent of the rendered case
    n_cases: int = 12
    n_train_cases: int = 8
    intensity_noise: float = 0.05
    jitter: float = 1.5       # centre jitter per case (voxels)
    seed: int = 0

    def validate(self) -> None:
        if self.n_organs < 2:
            raise ConfigError("need at least two organs")
        if min(self.depth, self.height, self.width) < 1 or self.full_depth < self.depth:
            raise ConfigError("volume extents must be positive and full_depth >= depth")
        if not 1 <= self.n_train_cases < self.n_cases:
            raise ConfigError(f"need 1 <= n_train_cases < n_cases, got {self.n_train_cases}/{self.n_cases}")
        if self.intensity_noise < 0 or self.jitter < 0:
            raise ConfigError("noise and jitter must be non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)


@dataclass
class OrganVolume:
    organ_id: int
    voxels: np.ndarray   # (D, H, W), zero outside the mask
    mask: np.ndarray     # (D, H, W) in {0, 1}
    case: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.voxels.shape != self.mask.shape or self.voxels.ndim != 3:
            raise ContractError(f"voxels {self.voxels.shape} and mask {self.mask.shape} must be equal 3-D shapes")
        if np.any(self.voxels[self.mask == 0] != 0):
            raise ContractError("voxels outside the organ mask must be exactly zero")


@dataclass
class OrganArchetype:
    center: np.ndarray     # (z, y, x) as fractions of the frame
    radii: np.ndarray      # (rz, ry, rx) in voxels
    intensity: float
    frequency: float
    orientation: float


def organ_archetypes(cfg: VolumeConfig, rng: np.random.Generator) -> list[OrganArchetype]:
    n = cfg.n_organs
    # Spread organ centres around a ring in-plane, at staggered heights.
    angles = 2 * np.pi * (np.arange(n) + rng.uniform(-0.15, 0.15, n)) / n
    out = []
    for i in range(n):
        ring = rng.uniform(0.2, 0.3)
        center = np.array([rng.uniform(0.35, 0.65), 0.5 + ring * np.sin(angles[i]), 0.5 + ring * np.cos(angles[i])])
        radii = np.array([rng.uniform(0.2, 0.35) * cfg.full_depth,
                          rng.uniform(0.12, 0.22) * cfg.height,
                          rng.uniform(0.12, 0.22) * cfg.width])
        out.append(OrganArchetype(center, radii, rng.uniform(0.35, 0.85), rng.uniform(0.4, 1.4), rng.uniform(0, np.pi)))
    return out


def render_organ(arch: OrganArchetype, cfg: VolumeConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one organ of one case on the full axial extent; returns (voxels, mask)."""
    Z, H, W = cfg.full_depth, cfg.height, cfg.width
    center = arch.center * np.array([Z, H, W]) + rng.normal(0.0, cfg.jitter, 3)
    radii = arch.radii * rng.uniform(0.85, 1.15, 3)
    phase = rng.uniform(0, 2 * np.pi)
    z, y, x = np.meshgrid(np.arange(Z), np.arange(H), np.arange(W), indexing="ij")
    r2 = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2
    mask = r2 <= 1.0
    if not mask.any():
        mask[tuple(np.clip(np.round(center).astype(int), 0, [Z - 1, H - 1, W - 1]))] = True
    along = x * np.cos(arch.orientation) + y * np.sin(arch.orientation)
    texture = 0.2 * np.sin(arch.frequency * along + 0.3 * z + phase)
    vox = arch.intensity + texture - 0.15 * r2 + rng.normal(0.0, cfg.intensity_noise, mask.shape)
    vox = np.clip(vox, 0.0, 1.0) * mask
    return vox, mask.astype(np.float64)


def sample_slices(mask_full: np.ndarray, depth: int) -> np.ndarray:
    """Indices of ``depth`` slices spaced uniformly over the mask's axial extent."""
    zs = np.flatnonzero(mask_full.reshape(mask_full.shape[0], -1).any(axis=1))
    return np.round(np.linspace(zs[0], zs[-1], depth)).astype(int)


def generate_volumes(cfg: VolumeConfig) -> list[list[OrganVolume]]:
    """``cases[c][i]`` is organ ``i`` of case ``c``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    archetypes = organ_archetypes(cfg, rng)
    cases = []
    for c in range(cfg.n_cases):
        organs = []
        for i, arch in enumerate(archetypes):
            vox, mask = render_organ(arch, cfg, rng)
            idx = sample_slices(mask, cfg.depth)
            organs.append(OrganVolume(i, vox[idx], mask[idx], case=c))
        cases.append(organs)
    return cases


def stack_voxels(cases: list[list[OrganVolume]]) -> np.ndarray:
    """(n_cases, n_organs, D, H, W)."""
    return np.stack([np.stack([v.voxels for v in organs]) for organs in cases])


# -- file format: <case>_<organ_id>_{vox,mask}.ten ----------------------------

_NAME = re.compile(r"^(\d+)_(\d+)_vox\.ten$")


def write_volumes(directory, cases: list[list[OrganVolume]], manifest: dict | None = None) -> None:
    from .core.io import atomic_write_bytes

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for organs in cases:
        for v in organs:
            save_tensor(directory / f"{v.case:03d}_{v.organ_id}_vox.ten", v.voxels)
            save_tensor(directory / f"{v.case:03d}_{v.organ_id}_mask.ten", v.mask)
    if manifest is not None:
        atomic_write_bytes(directory / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_volumes(directory) -> list[list[OrganVolume]]:
    directory = Path(directory)
    found: dict[int, dict[int, OrganVolume]] = {}
    for path in sorted(directory.iterdir()):
        m = _NAME.match(path.name)
        if not m:
            continue
        case, organ = int(m.group(1)), int(m.group(2))
        mask = load_tensor(directory / f"{m.group(1)}_{organ}_mask.ten")
        found.setdefault(case, {})[organ] = OrganVolume(organ, load_tensor(path), mask, case=case)
    if not found:
        raise ContractError(f"no volume files in {directory}")
    cases = []
    for case in sorted(found):
        organs = found[case]
        cases.append([organs[i] for i in sorted(organs)])
    return cases


def config_dict(cfg: VolumeConfig) -> dict:
    return asdict(cfg)
