"""Text-to-image projection, set-level cosine similarity, InfoNCE, and the joint
image + alignment training loop."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ops
from .core.nn import Module, parameter
from .core.optim import Adam
from .core.tensor import Tensor, as_tensor, backward, no_grad
from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .fusion import ImageModel, image_loss

LOG_COLUMNS = ("epoch", "l_2d", "l_3d", "l_fusion", "l_align", "l_total")


@dataclass
class AlignTrainConfig:
    tau: float = 0.1
    epochs: int = 50
    n_txt_batch: int = 8
    organs_per_step: int | None = None   # None: every organ in every step
    learning_rate: float = 1e-3
    seed: int = 0
    sum_sim: bool = False

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be > 0, got {self.tau}")
        if self.epochs < 0 or self.n_txt_batch < 1 or self.learning_rate <= 0:
            raise ConfigError("alignment training needs epochs >= 0, n_txt_batch >= 1, learning_rate > 0")
        if self.organs_per_step is not None and self.organs_per_step < 2:
            raise ConfigError("contrastive steps need at least 2 organs")


class AlignmentProjection(Module):
    """Maps text features (d_feat) into the image feature space (d_img)."""

    def __init__(self, d_img: int, d_feat: int, rng: np.random.Generator):
        super().__init__()
        self.w_align = parameter(rng.normal(0.0, 1.0 / np.sqrt(d_feat), size=(d_img, d_feat)))

    def forward(self, f_bar) -> Tensor:
        return project_text(self, f_bar)


def project_text(proj: AlignmentProjection, f_bar) -> Tensor:
    f_bar = as_tensor(f_bar)
    if f_bar.shape[-1] != proj.w_align.shape[1]:
        raise DimensionError(f"projection expects text features of size {proj.w_align.shape[1]}, got {f_bar.shape}")
    return ops.matmul(f_bar, ops.transpose(proj.w_align))


def avg_sim(rows, texts, sum_sim: bool = False) -> Tensor:
    """Mean cosine over all (row, text) pairs; ``sum_sim`` gives the plain double sum."""
    rows, texts = as_tensor(rows), as_tensor(texts)
    if rows.ndim == 1:
        rows = ops.reshape(rows, (1, rows.shape[0]))
    if texts.ndim == 1:
        texts = ops.reshape(texts, (1, texts.shape[0]))
    if rows.shape[0] == 0 or texts.shape[0] == 0:
        raise ContractError("avg_sim needs at least one row and one text")
    c = ops.cosine_matrix(rows, texts)
    return ops.sum(c) if sum_sim else ops.mean(c)


def avg_sim_matrix(images, texts, sum_sim: bool = False) -> Tensor:
    """``S[i, k] = avg_sim(images[i], texts[k])`` for ``images`` (N, D, d) and ``texts`` (M, n, d)."""
    images, texts = as_tensor(images), as_tensor(texts)
    N, D, d = images.shape
    M, n, d2 = texts.shape
    if d != d2:
        raise DimensionError(f"image features {images.shape} and text features {texts.shape} differ in width")
    c = ops.cosine_matrix(ops.reshape(images, (N * D, d)), ops.reshape(texts, (M * n, d)))
    c = ops.reshape(c, (N, D, M, n))
    return ops.sum(c, axis=(1, 3)) if sum_sim else ops.mean(c, axis=(1, 3))


def info_nce_terms(sims, tau: float) -> Tensor:
    """Per-organ terms ``-log softmax_k(S[i, k] / tau)[i]``; the denominator includes k = i."""
    if not tau > 0:
        raise ConfigError(f"temperature tau must be > 0, got {tau}")
    sims = as_tensor(sims)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1] or sims.shape[0] < 2:
        raise ContractError(f"InfoNCE needs a square similarity matrix over >= 2 organs, got {sims.shape}")
    logp = ops.log_softmax(ops.mul(sims, 1.0 / tau), axis=-1)
    n = sims.shape[0]
    return ops.neg(ops.index(logp, (np.arange(n), np.arange(n))))


def info_nce_from_sims(sims, tau: float) -> Tensor:
    return ops.sum(info_nce_terms(sims, tau))


def info_nce(images, texts, tau: float, sum_sim: bool = False) -> Tensor:
    """Summed InfoNCE over organs; ``images[i]`` and ``texts[i]`` belong to organ i."""
    if not tau > 0:
        raise ConfigError(f"temperature tau must be > 0, got {tau}")
    return info_nce_from_sims(avg_sim_matrix(images, texts, sum_sim), tau)


# -- joint training -----------------------------------------------------------


class SoraModel(Module):
    """Image branch plus the text-to-image projection (the text head is held frozen alongside)."""

    def __init__(self, image: ImageModel, proj: AlignmentProjection):
        super().__init__()
        self.image = image
        self.proj = proj


@dataclass
class AlignTrainResult:
    trace: list[dict] = field(default_factory=list)

    def final(self, key: str) -> float:
        return self.trace[-1][key]


def build_schedule(train_case_ids: list[int], text_index: dict[int, np.ndarray], n_organs: int,
                   cfg: AlignTrainConfig, rng: np.random.Generator) -> list[tuple[int, np.ndarray, list[np.ndarray]]]:
    """A fixed per-epoch list of steps ``(case, organs, text indices per organ)``.

    Each epoch replays the same steps, so every train case and every train text
    is visited; the schedule is drawn once from the seed.
    """
    k = n_organs if cfg.organs_per_step is None else min(cfg.organs_per_step, n_organs)
    per_organ = {i: rng.permutation(text_index[i]) for i in range(n_organs)}
    longest = max(len(v) for v in per_organ.values())
    n_steps = max(len(train_case_ids), int(np.ceil(longest / cfg.n_txt_batch)))
    cases = np.resize(rng.permutation(train_case_ids), n_steps)
    steps = []
    for s in range(n_steps):
        organs = np.arange(n_organs) if k == n_organs else np.sort(rng.choice(n_organs, k, replace=False))
        texts = []
        for i in organs:
            pool = per_organ[int(i)]
            start = (s * cfg.n_txt_batch) % len(pool)
            texts.append(np.resize(np.roll(pool, -start), cfg.n_txt_batch))
        steps.append((int(cases[s]), organs, texts))
    return steps


def step_losses(model: SoraModel, voxels: np.ndarray, organs: np.ndarray, text_feats: np.ndarray,
                cfg: AlignTrainConfig) -> dict[str, Tensor]:
    """Losses for one step: ``voxels`` (k, D, H, W) for ``organs``; ``text_feats`` (k, n, d_feat)."""
    feats = model.image(voxels)
    l2d, l3d, lf, l_img = image_loss(model.image.heads, feats, organs)
    l_align = info_nce(feats.fused, model.proj(text_feats), cfg.tau, cfg.sum_sim)
    return {"l_2d": l2d, "l_3d": l3d, "l_fusion": lf, "l_align": l_align, "l_total": ops.add(l_img, l_align)}


def _diagnose(model, voxels, organs, text_feats, cfg) -> str:
    bad = []
    with no_grad():
        for j, organ in enumerate(organs):
            other = (j + 1) % len(organs)
            sel = [j, other]
            try:
                vals = step_losses(model, voxels[sel], organs[sel], text_feats[sel], cfg)
                if not all(np.isfinite(v.item()) for v in vals.values()):
                    bad.append(int(organ))
            except Exception:  # noqa: BLE001 - diagnostics only
                bad.append(int(organ))
    return f"organs {bad}" if bad else "organs unknown"


def train_alignment(model: SoraModel, text_features: np.ndarray, text_organs: np.ndarray, voxels: np.ndarray,
                    train_case_ids: list[int], cfg: AlignTrainConfig) -> AlignTrainResult:
    """Jointly optimise the image branch and projection on L_image + L_align.

    ``text_features`` are frozen text-head features of the train records and
    ``voxels`` is ``(n_cases, N, D, H, W)``.  The logged per-epoch values are
    means over the epoch's steps.
    """
    cfg.validate()
    text_features = np.asarray(text_features, dtype=np.float64)
    text_organs = np.asarray(text_organs)
    n_organs = voxels.shape[1]
    text_index = {i: np.flatnonzero(text_organs == i) for i in range(n_organs)}
    empty = [i for i, v in text_index.items() if v.size == 0]
    if empty:
        raise ContractError(f"no training texts for organs {empty}")
    rng = np.random.default_rng(cfg.seed)
    schedule = build_schedule(list(train_case_ids), text_index, n_organs, cfg, rng)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, lr=cfg.learning_rate)
    result = AlignTrainResult()
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
        for case, organs, texts in schedule:
            vox = voxels[case, organs]
            tf = text_features[np.stack(texts)]
            opt.zero_grad()
            losses = step_losses(model, vox, organs, tf, cfg)
            total = losses["l_total"].item()
            if not np.isfinite(total):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, case {case}; "
                                     + _diagnose(model, vox, organs, tf, cfg))
            if params:
                backward(losses["l_total"])
                opt.step()
            for key, t in losses.items():
                sums[key] += t.item()
        row = {"epoch": epoch}
        row.update({k: v / len(schedule) for k, v in sums.items()})
        result.trace.append(row)
    return result


def trace_to_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in trace:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


def config_dict(cfg: AlignTrainConfig) -> dict:
    return asdict(cfg)
