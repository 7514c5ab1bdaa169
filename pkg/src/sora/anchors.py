"""Learnable organ anchors, soft labels, and the sigmoid-head text MLP.

Anchors are trained offline on text embeddings alone.  Soft label entry ``i``
of a record is ``(cos(v_i^+, f) + 1) / 2``: each entry lives in [0, 1]
independently, with no softmax across organs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from .core import Adam, Tensor, backward, no_grad, ops
from .core.nn import Linear, Module
from .corpus import SymptomRecord, embedding_matrix, organ_ids
from .errors import ConfigError, ContractError, DimensionError, NumericalError

log = logging.getLogger(__name__)

ANCHOR_FILE_VERSION = 1

# How the loss treats records of *other* organs (see ``anchor_loss``).
NEGATIVE_TERMS = ("separate", "swapped")


@dataclass
class OrganAnchorPair:
    organ_id: int
    v_plus: np.ndarray
    v_minus: np.ndarray


@dataclass
class AnchorTrainConfig:
    margin: float = 0.8
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    negative_term: str = "separate"

    def validate(self) -> None:
        if not 0.5 < self.margin < 1.0:
            raise ConfigError(f"margin must lie in (0.5, 1), got {self.margin}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("anchor training needs epochs >= 0, batch_size >= 1, learning_rate > 0")
        if self.negative_term not in NEGATIVE_TERMS:
            raise ConfigError(f"negative_term must be one of {NEGATIVE_TERMS}, got {self.negative_term!r}")


@dataclass
class AnchorTrainResult:
    anchors: list[OrganAnchorPair]
    loss_trace: list[float] = field(default_factory=list)


# -- similarities and margin ------------------------------------------------


def anchor_similarities(pair: OrganAnchorPair, emb) -> tuple[float, float]:
    emb = Tensor(emb)
    with no_grad():
        s_plus = ops.cosine_sim(Tensor(pair.v_plus), emb).item()
        s_minus = ops.cosine_sim(Tensor(pair.v_minus), emb).item()
    return s_plus, s_minus


def margin_fn(s_plus: float, s_minus: float, m: float) -> float:
    """max(0, m - s_plus) + max(0, s_minus - (1 - m)).

    Scalar reference form.  Arguments are read at their shortest decimal
    representation and the arithmetic is exact, so boundary cases such as
    ``margin_fn(0.8, 0.2, 0.8)`` give exactly 0 instead of binary rounding residue.
    """
    if not 0.5 < m < 1.0:
        raise ConfigError(f"margin must lie in (0.5, 1), got {m}")
    p, q, md = (Decimal(repr(float(v))) for v in (s_plus, s_minus, m))
    return float(max(Decimal(0), md - p) + max(Decimal(0), q - (1 - md)))


def _margin_tensor(s_a: Tensor, s_b: Tensor, m: float) -> Tensor:
    return ops.add(ops.relu(ops.sub(m, s_a)), ops.relu(ops.sub(s_b, 1.0 - m)))


def anchor_loss(v_plus: Tensor, v_minus: Tensor, embeddings, labels, m: float,
                negative_term: str = "separate") -> Tensor:
    """Anchor margin loss over a batch.

    ``v_plus``/``v_minus`` are (N, d); ``embeddings`` is (B, d) and ``labels``
    holds each record's organ.  For organ ``i`` the positives (own records)
    contribute the mean of ``M(s_i^+, s_i^-)``.  Records of other organs
    contribute:

    * ``"separate"``: mean of ``max(0, s_i^- - (1 - m))``, i.e. other organs
      must stay below ``1 - m`` on the negative anchor;
    * ``"swapped"``: mean of ``M(s_i^-, s_i^+)`` (argument order swapped).

    An organ with no positives in the batch skips its positive term; likewise
    for negatives.  Terms are summed over organs.
    """
    if negative_term not in NEGATIVE_TERMS:
        raise ConfigError(f"negative_term must be one of {NEGATIVE_TERMS}, got {negative_term!r}")
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    n_organs = v_plus.shape[0]
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ContractError("anchor_loss needs a non-empty (B, d) batch")
    if emb.shape[1] != v_plus.shape[1] or v_minus.shape != v_plus.shape:
        raise DimensionError(f"anchor_loss: anchors {v_plus.shape}/{v_minus.shape} vs embeddings {emb.shape}")
    if labels.shape != (emb.shape[0],) or np.any(labels < 0) or np.any(labels >= n_organs):
        raise ContractError("anchor_loss: every record needs an organ label in [0, N)")

    s_plus = ops.cosine_matrix(emb, v_plus)    # (B, N)
    s_minus = ops.cosine_matrix(emb, v_minus)

    pos = (labels[:, None] == np.arange(n_organs)[None, :]).astype(np.float64)
    neg = 1.0 - pos
    pos_w = pos / np.maximum(pos.sum(axis=0, keepdims=True), 1.0)
    neg_w = neg / np.maximum(neg.sum(axis=0, keepdims=True), 1.0)

    pos_term = ops.sum(ops.mul(_margin_tensor(s_plus, s_minus, m), pos_w))
    if negative_term == "separate":
        neg_margin = ops.relu(ops.sub(s_minus, 1.0 - m))
    else:
        neg_margin = _margin_tensor(s_minus, s_plus, m)
    neg_term = ops.sum(ops.mul(neg_margin, neg_w))
    return ops.add(pos_term, neg_term)


def anchor_loss_pairs(anchors: list[OrganAnchorPair], batch: list[SymptomRecord], m: float,
                      negative_term: str = "separate") -> float:
    vp = Tensor(np.stack([a.v_plus for a in anchors]))
    vm = Tensor(np.stack([a.v_minus for a in anchors]))
    with no_grad():
        return anchor_loss(vp, vm, embedding_matrix(batch), organ_ids(batch), m, negative_term).item()


def init_anchors(n_organs: int, d_txt: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    vp = rng.normal(size=(n_organs, d_txt))
    vm = rng.normal(size=(n_organs, d_txt))
    vp /= np.linalg.norm(vp, axis=1, keepdims=True)
    vm /= np.linalg.norm(vm, axis=1, keepdims=True)
    return vp, vm


def train_anchors(records: list[SymptomRecord], cfg: AnchorTrainConfig, n_organs: int | None = None) -> AnchorTrainResult:
    """Adam on the anchor margin loss with seeded shuffling; anchors are not re-normalised."""
    cfg.validate()
    if not records:
        raise ContractError("train_anchors needs at least one record")
    emb = embedding_matrix(records)
    labels = organ_ids(records)
    n_organs = int(labels.max()) + 1 if n_organs is None else n_organs
    rng = np.random.default_rng(cfg.seed)
    vp0, vm0 = init_anchors(n_organs, emb.shape[1], rng)
    v_plus = Tensor(vp0, requires_grad=True, name="v_plus")
    v_minus = Tensor(vm0, requires_grad=True, name="v_minus")
    opt = Adam([v_plus, v_minus], lr=cfg.learning_rate)

    trace = []
    n = len(records)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = anchor_loss(v_plus, v_minus, emb[idx], labels[idx], cfg.margin, cfg.negative_term)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite anchor loss at epoch {epoch} (batch starting {start}, "
                                     f"organs {sorted(set(labels[idx].tolist()))})")
            backward(loss)
            opt.step()
            total += value
            batches += 1
        trace.append(total / max(batches, 1))
        if epoch % 25 == 0:
            log.debug("anchor epoch %d loss %.5f", epoch, trace[-1])

    anchors = [OrganAnchorPair(i, v_plus.data[i].copy(), v_minus.data[i].copy()) for i in range(n_organs)]
    for a in anchors:
        if np.linalg.norm(a.v_plus) < 1e-9 or np.linalg.norm(a.v_minus) < 1e-9:
            raise NumericalError(f"anchor for organ {a.organ_id} collapsed to zero norm")
    return AnchorTrainResult(anchors, trace)


def separation_rates(anchors: list[OrganAnchorPair], records: list[SymptomRecord], m: float) -> tuple[float, float]:
    """(fraction of positives with s+ >= m, fraction of negatives with s- <= 1 - m), pooled over organs."""
    emb = embedding_matrix(records)
    labels = organ_ids(records)
    vp = np.stack([a.v_plus for a in anchors])
    vm = np.stack([a.v_minus for a in anchors])
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sp = e @ (vp / np.linalg.norm(vp, axis=1, keepdims=True)).T
    sm = e @ (vm / np.linalg.norm(vm, axis=1, keepdims=True)).T
    pos = labels[:, None] == np.arange(len(anchors))[None, :]
    return float((sp[pos] >= m).mean()), float((sm[~pos] <= 1.0 - m).mean())


# -- soft labels ------------------------------------------------------------


def soft_label(anchors: list[OrganAnchorPair], emb) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    vp = Tensor(np.stack([a.v_plus for a in anchors]))
    with no_grad():
        cos = ops.cosine_matrix(Tensor(emb[None, :]), vp).data[0]
    return (cos + 1.0) / 2.0


def soft_labels(anchors: list[OrganAnchorPair], embeddings) -> np.ndarray:
    vp = Tensor(np.stack([a.v_plus for a in anchors]))
    with no_grad():
        cos = ops.cosine_matrix(Tensor(embeddings), vp).data
    return (cos + 1.0) / 2.0


def hard_labels(labels, n_organs: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_organs))
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- anchor file ------------------------------------------------------------


def anchors_to_json(anchors: list[OrganAnchorPair], extra: dict | None = None) -> dict:
    doc = {
        "version": ANCHOR_FILE_VERSION,
        "anchors": [
            {"organ_id": a.organ_id, "v_plus": [float(x) for x in a.v_plus], "v_minus": [float(x) for x in a.v_minus]}
            for a in anchors
        ],
    }
    if extra:
        doc.update(extra)
    return doc


def anchors_from_json(doc: dict) -> list[OrganAnchorPair]:
    if doc.get("version") != ANCHOR_FILE_VERSION:
        raise ContractError(f"unsupported anchor file version {doc.get('version')!r}")
    return [OrganAnchorPair(int(a["organ_id"]), np.asarray(a["v_plus"], float), np.asarray(a["v_minus"], float))
            for a in doc["anchors"]]


def write_soft_labels_csv(path, record_ids: list[str], labels: np.ndarray) -> None:
    from .core.io import atomic_write_bytes

    n = labels.shape[1]
    lines = ["id," + ",".join(f"organ_{i}" for i in range(n))]
    lines += [rid + "," + ",".join(repr(float(v)) for v in row) for rid, row in zip(record_ids, labels)]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_soft_labels_csv(path) -> tuple[list[str], np.ndarray]:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
    ids, values = [], []
    for row in rows:
        rid, *vals = row.split(",")
        ids.append(rid)
        values.append([float(v) for v in vals])
    return ids, np.asarray(values, dtype=np.float64)


# -- text MLP + sigmoid head -------------------------------------------------


@dataclass
class TextHeadConfig:
    hidden: int | None = None      # default 2 * d_txt
    d_feat: int | None = None      # default d_txt
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("text head training needs epochs >= 0, batch_size >= 1, learning_rate > 0")


class TextHead(Module):
    """f_bar = W2 gelu(W1 f + b1) + b2;  y_hat = sigmoid(W3 f_bar + b3)."""

    def __init__(self, d_txt: int, hidden: int, d_feat: int, n_organs: int, rng: np.random.Generator):
        super().__init__()
        self.d_txt, self.hidden, self.d_feat, self.n_organs = d_txt, hidden, d_feat, n_organs
        self.fc1 = Linear(d_txt, hidden, rng)
        self.fc2 = Linear(hidden, d_feat, rng)
        self.head = Linear(d_feat, n_organs, rng)

    def features(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_txt:
            raise DimensionError(f"text head expects dimension {self.d_txt}, got {x.shape[-1]}")
        return self.fc2(ops.gelu(self.fc1(x)))

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def forward(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(x))


def text_loss(head: TextHead, embeddings, targets) -> Tensor:
    """Mean per-class binary cross-entropy against soft targets in [0, 1]."""
    return ops.bce_with_logits(head.logits(Tensor(embeddings)), targets)


def train_text_head(records: list[SymptomRecord], targets: np.ndarray, cfg: TextHeadConfig,
                    n_organs: int | None = None) -> tuple[TextHead, list[float]]:
    cfg.validate()
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[0] != len(records):
        raise ContractError(f"{targets.shape[0]} label vectors for {len(records)} records")
    if np.any(targets < 0.0) or np.any(targets > 1.0):
        raise ContractError("soft-label targets must lie in [0, 1]")
    emb = embedding_matrix(records)
    d_txt = emb.shape[1]
    n_organs = targets.shape[1] if n_organs is None else n_organs
    rng = np.random.default_rng(cfg.seed)
    head = TextHead(d_txt, cfg.hidden or 2 * d_txt, cfg.d_feat or d_txt, n_organs, rng)
    opt = Adam(head.parameters(), lr=cfg.learning_rate)
    trace = []
    n = len(records)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = text_loss(head, emb[idx], targets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite text loss at epoch {epoch}")
            backward(loss)
            opt.step()
            total += value
            batches += 1
        trace.append(total / max(batches, 1))
    return head, trace


def embed_text(head: TextHead, emb) -> np.ndarray:
    """MLP feature (pre-head) for one embedding or a (n, d_txt) batch."""
    with no_grad():
        return head.features(Tensor(emb)).data
