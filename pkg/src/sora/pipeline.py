"""Stage functions shared by the command line and the experiment runners.

Stages: corpus -> anchors -> soft labels -> text head + joint image/alignment
training -> evaluation.  Everything is a deterministic function of the
resolved :class:`RunConfig`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import AlignmentProjection, AlignTrainResult, SoraModel, train_alignment
from .anchors import (OrganAnchorPair, TextHead, TextHeadConfig, embed_text, hard_labels, soft_labels,
                      train_anchors, train_text_head)
from .config import RunConfig
from .core.io import atomic_write_bytes, load_tensor, save_tensor
from .core.tensor import no_grad
from .corpus import SymptomRecord, embedding_matrix, generate_synthetic_corpus, organ_ids, split_corpus
from .errors import ConfigHashMismatch, ContractError, DimensionError, StageOrderError
from .evaluate import (build_gallery, gallery_scores, make_results, metrics_report, positive_labels,
                       project_queries)
from .fusion import ImageModel
from .volumes import OrganVolume, generate_volumes, stack_voxels

LABEL_KINDS = ("soft", "hard")


@dataclass
class TrainedModels:
    head: TextHead
    model: SoraModel
    trace_text: list[float]
    trace_align: AlignTrainResult


def make_corpus(cfg: RunConfig) -> tuple[list[SymptomRecord], list[SymptomRecord]]:
    cfg = cfg.resolved()
    return split_corpus(generate_synthetic_corpus(cfg.corpus), cfg.split)


def make_volumes(cfg: RunConfig) -> list[list[OrganVolume]]:
    return generate_volumes(cfg.resolved().volumes)


def fit_anchors(cfg: RunConfig, train: list[SymptomRecord]) -> list[OrganAnchorPair]:
    cfg = cfg.resolved()
    return train_anchors(train, cfg.anchors, cfg.corpus.n_organs).anchors


def label_records(anchors: list[OrganAnchorPair], records: list[SymptomRecord], kind: str = "soft") -> np.ndarray:
    if kind == "soft":
        return soft_labels(anchors, embedding_matrix(records))
    if kind == "hard":
        return hard_labels(organ_ids(records), len(anchors))
    raise ContractError(f"label kind must be one of {LABEL_KINDS}, got {kind!r}")


def build_model(cfg: RunConfig, d_feat: int, mode: str = "cross_attn") -> SoraModel:
    cfg = cfg.resolved()
    rng = np.random.default_rng([cfg.seed, 1])
    image = ImageModel(cfg.encoder, cfg.corpus.n_organs, rng, mode)
    return SoraModel(image, AlignmentProjection(cfg.encoder.d_img, d_feat, rng))


def build_text_head(cfg: RunConfig) -> TextHead:
    cfg = cfg.resolved()
    d = cfg.corpus.d_txt
    return TextHead(d, cfg.text.hidden or 2 * d, cfg.text.d_feat or d, cfg.corpus.n_organs, np.random.default_rng(0))


def fit_models(cfg: RunConfig, train: list[SymptomRecord], targets: np.ndarray, cases: list[list[OrganVolume]],
               mode: str = "cross_attn", head: TextHead | None = None) -> TrainedModels:
    """Train the text head on ``targets`` (unless given), freeze it, then train image + projection."""
    cfg = cfg.resolved()
    trace_text: list[float] = []
    if head is None:
        head, trace_text = train_text_head(train, targets, cfg.text, cfg.corpus.n_organs)
    head.freeze()
    model = build_model(cfg, head.d_feat, mode)
    feats = embed_text(head, embedding_matrix(train))
    voxels = stack_voxels(cases)
    result = train_alignment(model, feats, organ_ids(train), voxels, list(range(cfg.volumes.n_train_cases)), cfg.align)
    return TrainedModels(head, model, trace_text, result)


def held_out_gallery(cfg: RunConfig, model: SoraModel, cases: list[list[OrganVolume]]) -> np.ndarray:
    cfg = cfg.resolved()
    voxels = stack_voxels(cases)[cfg.volumes.n_train_cases:]
    c, n = voxels.shape[:2]
    with no_grad():
        fused = model.image(voxels.reshape(c * n, *voxels.shape[2:])).fused.data
    return build_gallery(fused.reshape(c, n, *fused.shape[1:]))


def score_records(head: TextHead, model: SoraModel, gallery: np.ndarray, records: list[SymptomRecord]) -> np.ndarray:
    return gallery_scores(project_queries(head, model.proj, embedding_matrix(records)), gallery)


def evaluate_records(cfg: RunConfig, head: TextHead, model: SoraModel, cases, records: list[SymptomRecord]) -> dict:
    gallery = held_out_gallery(cfg, model, cases)
    scores = score_records(head, model, gallery, records)
    results = make_results(scores, organ_ids(records), [positive_labels(r) for r in records])
    return metrics_report(results, cfg.config_hash())


def run_pipeline(cfg: RunConfig, mode: str = "cross_attn", label_kind: str = "soft") -> tuple[dict, TrainedModels]:
    """All stages in memory; returns the metrics report and the trained models."""
    train, test = make_corpus(cfg)
    anchors = fit_anchors(cfg, train)
    targets = label_records(anchors, train, label_kind)
    cases = make_volumes(cfg)
    models = fit_models(cfg, train, targets, cases, mode)
    return evaluate_records(cfg, models.head, models.model, cases, test), models


# -- checkpoints -------------------------------------------------------------------

MANIFEST = "manifest.json"


def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".ten"


def save_checkpoint(directory, head: TextHead, model: SoraModel, config_hash: str, extra: dict | None = None) -> None:
    """One tensor file per parameter plus a JSON manifest of names, shapes and the config hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {f"text_head.{k}": v for k, v in head.state_dict().items()}
    state.update({f"model.{k}": v for k, v in model.state_dict().items()})
    entries = []
    for name in sorted(state):
        save_tensor(directory / _tensor_file(name), state[name])
        entries.append({"name": name, "shape": list(state[name].shape), "file": _tensor_file(name)})
    manifest = {"version": 1, "config_hash": config_hash, "tensors": entries}
    manifest.update(extra or {})
    atomic_write_bytes(directory / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise StageOrderError(f"checkpoint manifest not found: {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory, cfg: RunConfig, force: bool = False) -> tuple[TextHead, SoraModel, dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("config_hash") != cfg.config_hash() and not force:
        raise ConfigHashMismatch(f"checkpoint {directory} was built with config {manifest.get('config_hash')}, "
                                 f"current config is {cfg.config_hash()} (use --force to override)")
    state = {}
    for e in manifest["tensors"]:
        arr = load_tensor(directory / e["file"])
        if list(arr.shape) != e["shape"]:
            raise DimensionError(f"checkpoint tensor {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
        state[e["name"]] = arr
    head = build_text_head(cfg)
    head.load_state_dict({k[len("text_head."):]: v for k, v in state.items() if k.startswith("text_head.")})
    head.freeze()
    model = build_model(cfg, head.d_feat, manifest.get("fusion_mode", "cross_attn"))
    model.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})
    return head, model, manifest
