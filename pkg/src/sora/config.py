"""Run configuration: JSON file + flag overrides, and a stable config hash.

Precedence is flags > ``SORA_SEED`` > file > defaults.  The top-level seed
is propagated to every stage.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .alignment import AlignTrainConfig
from .anchors import AnchorTrainConfig, TextHeadConfig
from .corpus import CorpusConfig, SplitSpec
from .encoders import EncoderConfig
from .errors import ConfigError
from .volumes import VolumeConfig

SEED_ENV = "SORA_SEED"


@dataclass
class PathsConfig:
    work_dir: str = "sora_run"

    @property
    def root(self) -> Path:
        return Path(self.work_dir)


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    anchors: AnchorTrainConfig = field(default_factory=AnchorTrainConfig)
    text: TextHeadConfig = field(default_factory=TextHeadConfig)
    volumes: VolumeConfig = field(default_factory=VolumeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    align: AlignTrainConfig = field(default_factory=AlignTrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def resolved(self) -> "RunConfig":
        """Copy with the top-level seed pushed into every stage and shared sizes made consistent."""
        cfg = RunConfig.from_dict(self.to_dict())
        for section in (cfg.corpus, cfg.split, cfg.anchors, cfg.text, cfg.volumes, cfg.align):
            section.seed = cfg.seed
        cfg.volumes.n_organs = cfg.corpus.n_organs
        cfg.encoder.volume_shape = cfg.volumes.shape
        return cfg

    def validate(self) -> None:
        cfg = self.resolved()
        cfg.corpus.validate()
        cfg.anchors.validate()
        cfg.text.validate()
        cfg.volumes.validate()
        cfg.encoder.validate()
        cfg.align.validate()
        if not 0.0 < cfg.split.train_fraction < 1.0:
            raise ConfigError(f"split.train_fraction must lie in (0, 1), got {cfg.split.train_fraction}")

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "split": asdict(self.split),
            "anchors": asdict(self.anchors),
            "text": asdict(self.text),
            "volumes": asdict(self.volumes),
            "encoder": self.encoder.to_dict(),
            "align": asdict(self.align),
            "paths": asdict(self.paths),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {
            "corpus": CorpusConfig.from_dict,
            "split": SplitSpec,
            "anchors": AnchorTrainConfig,
            "text": TextHeadConfig,
            "volumes": VolumeConfig,
            "encoder": EncoderConfig.from_dict,
            "align": AlignTrainConfig,
            "paths": PathsConfig,
        }
        kwargs = {}
        for name, build in sections.items():
            if name in d:
                if not isinstance(d[name], dict):
                    raise ConfigError(f"config section {name!r} must be an object")
                try:
                    kwargs[name] = build(d[name]) if build in (CorpusConfig.from_dict, EncoderConfig.from_dict) else build(**d[name])
                except TypeError as exc:
                    raise ConfigError(f"config section {name!r}: {exc}") from None
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        """SHA-256 prefix of the resolved config, ignoring output paths."""
        doc = self.resolved().to_dict()
        doc.pop("paths")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` (value parsed as JSON when possible) -> nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def load_config(path=None, overrides: list[dict] | None = None, env=None) -> RunConfig:
    doc = RunConfig().to_dict()
    if path is not None:
        try:
            doc = _merge(doc, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for o in overrides or []:
        doc = _merge(doc, o)
    cfg = RunConfig.from_dict(doc)
    cfg.validate()
    return cfg
