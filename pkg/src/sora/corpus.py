"""Symptom records: sentence chunking and a synthetic corpus with planted organ mixtures.

The synthetic generator stands in for literature retrieval plus a pretrained
text-embedding model.  Each organ gets an orthonormal prototype direction;
a record of organ ``i`` embeds ``normalize(sum_k w_k * prototype_k + noise)``
with ``w_i = 1`` and the other weights drawn from ``Uniform(0, mixture_alpha)``,
so the ground-truth association strengths are known exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError


@dataclass
class SymptomRecord:
    id: str
    organ_id: int
    text: str
    embedding: np.ndarray
    planted_weights: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "organ_id": int(self.organ_id),
            "text": self.text,
            "embedding": [float(v) for v in self.embedding],
            "planted_weights": None if self.planted_weights is None else [float(v) for v in self.planted_weights],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SymptomRecord":
        pw = obj.get("planted_weights")
        return cls(
            id=str(obj["id"]),
            organ_id=int(obj["organ_id"]),
            text=obj.get("text", ""),
            embedding=np.asarray(obj["embedding"], dtype=np.float64),
            planted_weights=None if pw is None else np.asarray(pw, dtype=np.float64),
        )


@dataclass
class CorpusConfig:
    n_organs: int = 7
    per_organ: int = 200
    d_txt: int = 64
    noise_sigma: float = 0.05
    mixture_alpha: float = 0.4
    seed: int = 0
    # Deliberately correlated organ pairs: records of either organ give the
    # partner a weight drawn from ``overlap_range`` instead of [0, alpha).
    overlap_pairs: list[tuple[int, int]] = field(default_factory=list)
    overlap_range: tuple[float, float] = (0.5, 0.9)

    def validate(self) -> None:
        if self.n_organs < 2:
            raise ConfigError(f"n_organs must be >= 2, got {self.n_organs}")
        if self.per_organ < 1:
            raise ConfigError(f"per_organ must be >= 1, got {self.per_organ}")
        if self.d_txt < 2:
            raise ConfigError(f"d_txt must be >= 2, got {self.d_txt}")
        if self.d_txt < self.n_organs:
            raise ConfigError(f"d_txt={self.d_txt} < n_organs={self.n_organs}: cannot build orthogonal prototypes")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.mixture_alpha <= 1.0:
            raise ConfigError(f"mixture_alpha must lie in [0, 1], got {self.mixture_alpha}")
        lo, hi = self.overlap_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ConfigError(f"overlap_range must satisfy 0 <= lo <= hi < 1, got {self.overlap_range}")
        for a, b in self.overlap_pairs:
            if a == b or not (0 <= a < self.n_organs and 0 <= b < self.n_organs):
                raise ConfigError(f"invalid overlap pair ({a}, {b})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overlap_pairs"] = [list(p) for p in self.overlap_pairs]
        d["overlap_range"] = list(self.overlap_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "overlap_pairs" in d:
            d["overlap_pairs"] = [tuple(p) for p in d["overlap_pairs"]]
        if "overlap_range" in d:
            d["overlap_range"] = tuple(d["overlap_range"])
        return cls(**d)


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


# -- chunking ---------------------------------------------------------------

_SENTENCE = re.compile(r"\S.*?(?:[.!?]+(?=\s|$)|$)", re.DOTALL)


def split_sentences(raw: str) -> list[str]:
    """Sentences end at runs of '.', '!' or '?' followed by whitespace or the end.

    A trailing fragment without a terminator counts as a sentence.
    """
    return [m.group(0).strip() for m in _SENTENCE.finditer(raw) if m.group(0).strip()]


def chunk_text(raw: str, min_sentences: int = 2, max_sentences: int = 3) -> list[str]:
    """Greedy left-to-right grouping of sentences into chunks of ``max_sentences``.

    Only the final chunk may be short (it can fall below ``min_sentences``
    when the sentence count leaves a remainder of one).
    """
    if not 1 <= min_sentences <= max_sentences:
        raise ContractError(f"need 1 <= min_sentences <= max_sentences, got {min_sentences}, {max_sentences}")
    sentences = split_sentences(raw)
    return [" ".join(sentences[i:i + max_sentences]) for i in range(0, len(sentences), max_sentences)]


# -- synthetic corpus ---------------------------------------------------------


def organ_prototypes(n_organs: int, d_txt: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal rows via Gram-Schmidt on Gaussian draws."""
    if d_txt < n_organs:
        raise ConfigError(f"d_txt={d_txt} < n_organs={n_organs}: cannot build orthogonal prototypes")
    draws = rng.normal(size=(n_organs, d_txt))
    protos = np.zeros_like(draws)
    for i, v in enumerate(draws):
        for p in protos[:i]:
            v = v - (v @ p) * p
        protos[i] = v / np.linalg.norm(v)
    return protos


def planted_mixture(organ: int, cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(0.0, cfg.mixture_alpha, size=cfg.n_organs) if cfg.mixture_alpha > 0 else np.zeros(cfg.n_organs)
    lo, hi = cfg.overlap_range
    for a, b in cfg.overlap_pairs:
        partner = b if organ == a else a if organ == b else None
        if partner is not None:
            w[partner] = rng.uniform(lo, hi)
    w[organ] = 1.0
    return w / w.max()


def generate_synthetic_corpus(cfg: CorpusConfig) -> list[SymptomRecord]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    protos = organ_prototypes(cfg.n_organs, cfg.d_txt, rng)
    records = []
    for organ in range(cfg.n_organs):
        for j in range(cfg.per_organ):
            w = planted_mixture(organ, cfg, rng)
            v = w @ protos
            if cfg.noise_sigma > 0:
                v = v + rng.normal(0.0, cfg.noise_sigma, size=cfg.d_txt)
            v = v / np.linalg.norm(v)
            records.append(SymptomRecord(f"o{organ}_{j:04d}", organ, "", v, w))
    return records


def corpus_prototypes(cfg: CorpusConfig) -> np.ndarray:
    """The prototype matrix used by :func:`generate_synthetic_corpus` for ``cfg``."""
    return organ_prototypes(cfg.n_organs, cfg.d_txt, np.random.default_rng(cfg.seed))


def split_corpus(records: list[SymptomRecord], spec: SplitSpec) -> tuple[list[SymptomRecord], list[SymptomRecord]]:
    """Stratified split: per organ, floor(train_fraction * n) records go to train."""
    if not 0.0 < spec.train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {spec.train_fraction}")
    by_organ: dict[int, list[int]] = {}
    for idx, r in enumerate(records):
        by_organ.setdefault(r.organ_id, []).append(idx)
    rng = np.random.default_rng(spec.seed)
    train_idx: set[int] = set()
    for organ in sorted(by_organ):
        members = by_organ[organ]
        if len(members) < 2:
            raise ContractError(f"organ {organ} has {len(members)} record(s); a split needs at least 2")
        n_train = int(np.floor(spec.train_fraction * len(members)))
        chosen = rng.permutation(len(members))[:n_train]
        train_idx.update(members[k] for k in chosen)
    train = [r for i, r in enumerate(records) if i in train_idx]
    test = [r for i, r in enumerate(records) if i not in train_idx]
    return train, test


# -- file format ------------------------------------------------------------


def corpus_to_jsonl(records: list[SymptomRecord]) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in records)


def write_corpus(path, records: list[SymptomRecord]) -> None:
    from .core.io import atomic_write_bytes

    atomic_write_bytes(path, corpus_to_jsonl(records).encode("utf-8"))


def read_corpus(path) -> list[SymptomRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [SymptomRecord.from_json(json.loads(line)) for line in lines if line.strip()]


def embedding_matrix(records: list[SymptomRecord]) -> np.ndarray:
    return np.stack([r.embedding for r in records])


def organ_ids(records: list[SymptomRecord]) -> np.ndarray:
    return np.array([r.organ_id for r in records], dtype=np.int64)
