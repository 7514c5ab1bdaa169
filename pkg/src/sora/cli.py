"""Command-line driver for the staged pipeline.

Every stage reads its inputs from, and writes its outputs to, the run's work
directory.  Artifacts record the config hash they were built with; a stage
refuses inputs built under a different config unless ``--force`` is given.

Exit codes: 0 success, 1 configuration error, 2 input/contract error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import anchors as anchor_mod
from .alignment import trace_to_csv
from .config import RunConfig, load_config, parse_override
from .core.io import atomic_write_bytes, load_tensor
from .corpus import embedding_matrix, generate_synthetic_corpus, organ_ids, read_corpus, split_corpus, write_corpus
from .errors import ConfigHashMismatch, ContractError, SoraError, StageOrderError
from .evaluate import (export_probability_overlay, heatmap_csv, heatmap_pgm, infer_organ_scores, make_results,
                       mean_average_precision, metrics_to_json, organ_correlation_matrix, positive_labels)
from . import pipeline
from .volumes import read_volumes, write_volumes

log = logging.getLogger("sora")

STAGES = ("gen-corpus", "gen-volumes", "train-anchors", "label", "train", "eval", "infer", "inspect")


# -- artifact layout -------------------------------------------------------------


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    corpus = property(lambda self: self.root / "corpus" / "records.jsonl")
    corpus_manifest = property(lambda self: self.root / "corpus" / "manifest.json")
    volumes = property(lambda self: self.root / "volumes")
    anchors = property(lambda self: self.root / "anchors" / "anchors.json")
    anchor_log = property(lambda self: self.root / "anchors" / "loss.csv")
    labels = property(lambda self: self.root / "labels" / "soft_labels.csv")
    labels_manifest = property(lambda self: self.root / "labels" / "manifest.json")
    checkpoint = property(lambda self: self.root / "checkpoint")
    train_log = property(lambda self: self.root / "logs" / "train_log.csv")
    text_log = property(lambda self: self.root / "logs" / "text_log.csv")
    metrics = property(lambda self: self.root / "eval" / "metrics.json")
    heatmap = property(lambda self: self.root / "eval" / "organ_correlation.csv")


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode())


def _portable(cfg: RunConfig) -> dict:
    """Config as embedded in artifacts: output paths are left out so reruns elsewhere are byte-identical."""
    doc = cfg.to_dict()
    doc.pop("paths")
    return doc


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageOrderError(f"missing {path}; run `{stage}` first")
    return path


def _check_hash(found: str | None, cfg: RunConfig, what: str, force: bool) -> None:
    if found != cfg.config_hash():
        msg = f"{what} was built with config {found}, current config is {cfg.config_hash()}"
        if not force:
            raise ConfigHashMismatch(msg + " (use --force to override)")
        log.warning("%s; continuing because of --force", msg)


def _load_json(path: Path, stage: str) -> dict:
    return json.loads(_require(path, stage).read_text())


def _load_split(lay: Layout, cfg: RunConfig, force: bool):
    manifest = _load_json(lay.corpus_manifest, "gen-corpus")
    _check_hash(manifest.get("config_hash"), cfg, "corpus", force)
    records = read_corpus(_require(lay.corpus, "gen-corpus"))
    train_ids = set(manifest["train_ids"])
    train = [r for r in records if r.id in train_ids]
    test = [r for r in records if r.id not in train_ids]
    return records, train, test


def _load_anchors(lay: Layout, cfg: RunConfig, force: bool):
    doc = _load_json(lay.anchors, "train-anchors")
    _check_hash(doc.get("config_hash"), cfg, "anchors", force)
    return anchor_mod.anchors_from_json(doc)


def _load_cases(lay: Layout, cfg: RunConfig, force: bool):
    manifest = _load_json(lay.volumes / "manifest.json", "gen-volumes")
    _check_hash(manifest.get("config_hash"), cfg, "volumes", force)
    return read_volumes(lay.volumes)


# -- commands -----------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    rc = cfg.resolved()
    records = generate_synthetic_corpus(rc.corpus)
    train, _ = split_corpus(records, rc.split)
    lay.corpus.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(lay.corpus, records)
    _write_json(lay.corpus_manifest, {"config_hash": cfg.config_hash(), "n_records": len(records),
                                      "train_ids": [r.id for r in train], "config": _portable(cfg)})
    print(f"wrote {len(records)} records ({len(train)} train) to {lay.corpus}")
    return 0


def cmd_gen_volumes(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    cases = pipeline.make_volumes(cfg)
    vc = cfg.resolved().volumes
    write_volumes(lay.volumes, cases, {"config_hash": cfg.config_hash(), "n_cases": len(cases),
                                       "n_organs": vc.n_organs, "n_train_cases": vc.n_train_cases,
                                       "shape": list(vc.shape)})
    print(f"wrote {len(cases)} cases x {vc.n_organs} organ volumes to {lay.volumes}")
    return 0


def cmd_train_anchors(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    _, train, _ = _load_split(lay, cfg, args.force)
    r = cfg.resolved()
    result = anchor_mod.train_anchors(train, r.anchors, r.corpus.n_organs)
    pos, neg = anchor_mod.separation_rates(result.anchors, train, r.anchors.margin)
    lay.anchors.parent.mkdir(parents=True, exist_ok=True)
    _write_json(lay.anchors, anchor_mod.anchors_to_json(result.anchors, {"config_hash": cfg.config_hash()}))
    _write_text(lay.anchor_log, "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.loss_trace)))
    print(f"anchors: positives >= m: {pos:.3f}, negatives <= 1-m: {neg:.3f}")
    return 0


def cmd_label(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    records, train, _ = _load_split(lay, cfg, args.force)
    anchors = _load_anchors(lay, cfg, args.force)
    labels = anchor_mod.soft_labels(anchors, embedding_matrix(records))
    lay.labels.parent.mkdir(parents=True, exist_ok=True)
    anchor_mod.write_soft_labels_csv(lay.labels, [r.id for r in records], labels)
    _write_json(lay.labels_manifest, {"config_hash": cfg.config_hash(), "n_records": len(records)})
    print(f"wrote soft labels for {len(records)} records to {lay.labels}")
    return 0


def _load_labels(lay: Layout, cfg: RunConfig, force: bool) -> dict[str, np.ndarray]:
    manifest = _load_json(lay.labels_manifest, "label")
    _check_hash(manifest.get("config_hash"), cfg, "soft labels", force)
    ids, values = anchor_mod.read_soft_labels_csv(_require(lay.labels, "label"))
    return dict(zip(ids, values))


def cmd_train(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    _, train, _ = _load_split(lay, cfg, args.force)
    by_id = _load_labels(lay, cfg, args.force)
    cases = _load_cases(lay, cfg, args.force)
    if args.hard_labels:
        targets = anchor_mod.hard_labels(organ_ids(train), cfg.resolved().corpus.n_organs)
    else:
        missing = [r.id for r in train if r.id not in by_id]
        if missing:
            raise StageOrderError(f"soft labels missing for {len(missing)} train records (e.g. {missing[0]}); rerun `label`")
        targets = np.stack([by_id[r.id] for r in train])
    models = pipeline.fit_models(cfg, train, targets, cases)
    pipeline.save_checkpoint(lay.checkpoint, models.head, models.model, cfg.config_hash(),
                             {"fusion_mode": "cross_attn", "labels": "hard" if args.hard_labels else "soft"})
    _write_text(lay.text_log, "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(models.trace_text)))
    _write_text(lay.train_log, trace_to_csv(models.trace_align.trace))
    last = models.trace_align.trace[-1] if models.trace_align.trace else {}
    print(f"checkpoint written to {lay.checkpoint}; final l_total={last.get('l_total', float('nan')):.4f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    records, train, test = _load_split(lay, cfg, args.force)
    cases = _load_cases(lay, cfg, args.force)
    head, model, _ = pipeline.load_checkpoint(_require(lay.checkpoint, "train"), cfg, args.force)
    if args.fusion_mode != "cross_attn":
        # Ablation: retrain the image branch with another fusion rule, in memory only.
        model = pipeline.fit_models(cfg, train, None, cases, mode=args.fusion_mode, head=head).model
    report = pipeline.evaluate_records(cfg, head, model, cases, test)
    if args.map_per == "query":
        gallery = pipeline.held_out_gallery(cfg, model, cases)
        scores = pipeline.score_records(head, model, gallery, test)
        results = make_results(scores, organ_ids(test), [positive_labels(r) for r in test])
        report["map_query"] = mean_average_precision(results, per="query")
    if args.fusion_mode != "cross_attn":
        report["fusion_mode"] = args.fusion_mode
    text = metrics_to_json(report)
    out = Path(args.output) if args.output else lay.metrics
    _write_text(out, text)
    if lay.labels.exists():
        ids, labels = anchor_mod.read_soft_labels_csv(lay.labels)
        corr = organ_correlation_matrix(labels)
        _write_text(lay.heatmap, heatmap_csv(corr))
        if args.pgm:
            lay.heatmap.parent.mkdir(parents=True, exist_ok=True)
            atomic_write_bytes(lay.heatmap.with_suffix(".pgm"), heatmap_pgm(corr))
    sys.stdout.write(text)
    return 0


def _read_embedding(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ContractError(f"embedding file not found: {p}")
    if p.suffix == ".ten":
        return load_tensor(p).reshape(-1)
    try:
        return np.asarray(json.loads(p.read_text()), dtype=np.float64).reshape(-1)
    except (json.JSONDecodeError, ValueError):
        return np.loadtxt(p, dtype=np.float64, delimiter=None, ndmin=1).reshape(-1)


def cmd_infer(cfg: RunConfig, args) -> int:
    lay = Layout(cfg.paths.work_dir)
    head, model, _ = pipeline.load_checkpoint(_require(lay.checkpoint, "train"), cfg, args.force)
    if args.embedding:
        emb = _read_embedding(args.embedding)
    else:
        records = {r.id: r for r in read_corpus(_require(lay.corpus, "gen-corpus"))}
        if args.record not in records:
            raise ContractError(f"no record with id {args.record!r}")
        emb = records[args.record].embedding
    if emb.shape != (head.d_txt,):
        raise ContractError(f"query embedding has {emb.size} values, expected {head.d_txt}")
    cases = _load_cases(lay, cfg, args.force)
    gallery = pipeline.held_out_gallery(cfg, model, cases)
    anchors = _load_anchors(lay, cfg, args.force) if args.use_anchors else None
    scores = infer_organ_scores(emb, head, model.proj, gallery, anchors=anchors, use_anchors=args.use_anchors)
    print("organ  score")
    for i in np.argsort(-scores, kind="stable"):
        print(f"{i:5d}  {scores[i]:.4f}")
    if args.overlay:
        case = cases[args.case]
        export_probability_overlay(case, scores, args.overlay)
        print(f"overlay written to {args.overlay}")
    return 0


def cmd_inspect(cfg: RunConfig, args) -> int:
    manifest = pipeline.read_manifest(args.checkpoint)
    n = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    print(f"config_hash  {manifest.get('config_hash')}")
    print(f"fusion_mode  {manifest.get('fusion_mode', 'cross_attn')}")
    print(f"tensors      {len(manifest['tensors'])}")
    print(f"parameters   {n}")
    for t in manifest["tensors"]:
        print(f"  {t['name']:48s} {tuple(t['shape'])}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "gen-volumes": cmd_gen_volumes, "train-anchors": cmd_train_anchors,
    "label": cmd_label, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--work-dir", help="artifact directory (overrides paths.work_dir)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides file and SORA_SEED)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; may repeat")
    common.add_argument("--force", action="store_true", help="accept artifacts built under another config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-corpus", "gen-volumes", "train-anchors", "label"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("train", parents=[common])
    p.add_argument("--hard-labels", action="store_true", help="train the text head on one-hot targets")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--output", help="metrics JSON path (default: <work-dir>/eval/metrics.json)")
    p.add_argument("--map-per", choices=("class", "query"), default="class")
    p.add_argument("--fusion-mode", choices=("cross_attn", "concat", "3d_only", "2d_only"), default="cross_attn",
                   help="ablation: retrain the image branch in memory with another fusion rule")
    p.add_argument("--pgm", action="store_true", help="also render the organ correlation heatmap as PGM")
    p = sub.add_parser("infer", parents=[common])
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--embedding", help="query embedding (.ten, JSON list, or whitespace-separated numbers)")
    src.add_argument("--record", help="id of a corpus record to use as the query")
    p.add_argument("--use-anchors", action="store_true", help="score organs through their positive anchors")
    p.add_argument("--overlay", help="write a probability overlay tensor here")
    p.add_argument("--case", type=int, default=-1, help="case whose masks form the overlay (default: last)")
    p = sub.add_parser("inspect", parents=[common])
    p.add_argument("checkpoint")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    if args.work_dir:
        overrides.append({"paths": {"work_dir": args.work_dir}})
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except SoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc.strerror or exc} ({exc.filename})", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
