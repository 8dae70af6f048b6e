"""Command-line driver: ingest | preprocess | train | evaluate | ablate | report.

Every command except ``ingest`` works inside one run directory named by the
config fingerprint. The directory holds a ``run.json`` record listing every
artifact written so far, and a lock file while a command owns it.

Exit codes: 0 success, 1 validation failure, 2 missing artifact, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from chunkpd import kernels
from chunkpd.classify import load_classifier, read_classifier_header, save_classifier
from chunkpd.config import ExperimentConfig
from chunkpd.dataset import (
    DRAWING_TYPES,
    Layout,
    Manifest,
    ingest_directory,
    read_manifest,
    synthesize_toy_manifest,
    validate_manifest,
    write_manifest,
    write_toy_images,
)
from chunkpd.encoders import (
    FeatureStore,
    checkpoint_name,
    load_encoder,
    load_type_classifier,
    save_encoder,
    save_type_classifier,
)
from chunkpd.errors import ChunkPDError, ConfigError, MissingArtifact, RunLocked
from chunkpd.evaluation import MetricsReport, make_split
from chunkpd.pipeline import PipelineSettings, ablate_config, evaluate_config, fit_pipeline
from chunkpd.preprocess import TileCache

log = logging.getLogger("chunkpd")

RECORD = "run.json"
LOCK = ".lock"
RECORD_FORMAT = "chunkpd.run"


# ---------------------------------------------------------------------------
# run directory plumbing


def environment() -> dict:
    import numpy
    import sklearn
    import torch

    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": numpy.__version__,
        "torch": torch.__version__,
        "sklearn": sklearn.__version__,
        "kernels": kernels.BACKEND,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"run directory {run_dir} is in use (remove {lock} if no process owns it)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def read_record(run_dir: Path) -> dict:
    path = run_dir / RECORD
    if not path.exists():
        raise MissingArtifact(f"no run record at {path}; run `chunkpd train` with this config first")
    return json.loads(path.read_text(encoding="utf-8"))


def update_record(run_dir: Path, cfg: ExperimentConfig, **artifacts) -> dict:
    path = run_dir / RECORD
    if path.exists():
        rec = json.loads(path.read_text(encoding="utf-8"))
    else:
        rec = {"format": RECORD_FORMAT, "version": 1, "config_hash": cfg.fingerprint, "created": _now(), "artifacts": {}}
    rec["updated"] = _now()
    rec["environment"] = environment()
    rec["artifacts"].update(artifacts)
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return rec


def verify_record(run_dir: Path, rec: dict, cfg: ExperimentConfig) -> list[str]:
    """Problems with the trained artifacts of a run; empty when all exist and carry the config hash."""
    problems = []
    if rec.get("config_hash") != cfg.fingerprint:
        problems.append(f"run record hash {rec.get('config_hash', '')[:12]} != config {cfg.fingerprint[:12]}")
    art = rec.get("artifacts", {})
    needed = ["config", "manifest", "type_classifier"] + [f"encoder.{d}" for d in DRAWING_TYPES] + [f"classifier.{d}" for d in DRAWING_TYPES]
    for key in needed:
        if key not in art:
            problems.append(f"missing artifact {key}")
            continue
        path = run_dir / art[key]
        if not path.exists():
            problems.append(f"artifact {key} points to missing file {path}")
            continue
        if key == "type_classifier":
            _, h = load_type_classifier(path)
        elif key.startswith("encoder."):
            _, h = load_encoder(path)
        elif key.startswith("classifier."):
            h = read_classifier_header(path).get("config_hash")
        elif key == "config":
            h = ExperimentConfig.load(path).fingerprint
        else:
            continue
        if h != cfg.fingerprint:
            problems.append(f"artifact {key} was written under config {str(h)[:12]}")
    return problems


def load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def load_dataset(cfg: ExperimentConfig, config_path: str | None = None) -> Manifest:
    ds = cfg.data["dataset"]
    base = Path(config_path).parent if config_path else Path(".")

    def resolve(p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() or p.exists() else base / p

    if ds.get("manifest"):
        path = resolve(ds["manifest"])
        if not path.exists():
            raise MissingArtifact(f"manifest {path} does not exist")
        return read_manifest(path)
    if ds.get("root"):
        layout = Layout.from_file(resolve(ds["layout"])) if ds.get("layout") else None
        return ingest_directory(resolve(ds["root"]), layout)
    if ds.get("toy"):
        toy = ds["toy"]
        return synthesize_toy_manifest(int(toy["n_subjects"]), int(toy.get("seed", 0)))
    raise ConfigError("config field 'dataset' names no manifest, root or toy generator")


def _check_manifest(m: Manifest) -> None:
    violations = validate_manifest(m)
    for v in violations:
        print(f"violation: {v}", file=sys.stderr)
    if violations:
        raise ChunkPDError(f"manifest has {len(violations)} violation(s)")


def _training_part(m: Manifest, cfg: ExperimentConfig) -> Manifest:
    tf = cfg.data["train_fold"]
    if tf is None:
        return m
    plan = make_split(m, cfg.strategy, cfg.seed)
    if tf >= len(plan.folds):
        raise ConfigError(f"invalid config field 'train_fold': {tf} but the plan has {len(plan.folds)} folds")
    return m.subset(plan.folds[tf].train_ids)


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    if args.toy is not None:
        m = synthesize_toy_manifest(args.toy, args.seed if args.seed is not None else 0)
        if args.write_images:
            m = write_toy_images(m, args.write_images)
    elif args.root is not None:
        layout = Layout.from_file(args.layout) if args.layout else None
        m = ingest_directory(args.root, layout, workers=args.workers)
    elif args.config:
        cfg = ExperimentConfig.load(args.config)
        m = load_dataset(cfg, args.config)
    else:
        raise ConfigError("ingest needs --toy N, --root DIR or --config FILE")
    out = Path(args.out or "manifest.jsonl")
    write_manifest(m, out)
    c = m.counts
    print(f"wrote {out}: {len(m.samples)} samples from {len(m.subjects)} subjects {c}")
    for rel, reason in m.issues:
        print(f"skipped {rel}: {reason}", file=sys.stderr)
    _check_manifest(m)
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_config(args)
    m = load_dataset(cfg, args.config)
    _check_manifest(m)
    settings = PipelineSettings.from_config(cfg)
    with run_lock(cfg.run_dir) as run_dir:
        cache = TileCache(run_dir / "tiles")
        n = 0
        for s in m.samples:
            n += len(cache.get_or_build(s, settings.grid, settings.spec, settings.augment_enabled))
            n += len(cache.get_or_build(s, settings.grid, settings.spec, False)) if settings.augment_enabled else 0
        write_manifest(m, run_dir / "manifest.jsonl")
        cfg.save(run_dir / "config.json")
        update_record(run_dir, cfg, manifest="manifest.jsonl", config="config.json", tile_cache="tiles")
    print(f"cached {n} tiles under {run_dir / 'tiles'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    m = load_dataset(cfg, args.config)
    _check_manifest(m)
    train = _training_part(m, cfg)
    settings = PipelineSettings.from_config(cfg)
    h = cfg.fingerprint
    with run_lock(cfg.run_dir) as run_dir:
        store = FeatureStore()
        tiles = TileCache(run_dir / "tiles") if (run_dir / "tiles").exists() else None
        pipe = fit_pipeline(train, settings, store, tile_cache=tiles)
        arts = {"config": "config.json", "manifest": "manifest.jsonl", "feature_store": "features.npz"}
        cfg.save(run_dir / "config.json")
        write_manifest(m, run_dir / "manifest.jsonl")
        tc = pipe.type_classifier.backbone.encoder
        arts["type_classifier"] = str(Path("checkpoints") / f"type__{checkpoint_name(tc, None, h)}")
        save_type_classifier(pipe.type_classifier, run_dir / arts["type_classifier"], h)
        for d in DRAWING_TYPES:
            enc = pipe.encoders[d]
            arts[f"encoder.{d}"] = str(Path("checkpoints") / checkpoint_name(enc.encoder, d, h))
            save_encoder(enc, run_dir / arts[f"encoder.{d}"], h)
            arts[f"classifier.{d}"] = str(Path("checkpoints") / f"classifier__{d}__{h[:12]}.state")
            save_classifier(pipe.classifiers[d], run_dir / arts[f"classifier.{d}"], h)
        store.save(run_dir / arts["feature_store"])
        if tiles is not None:
            arts["tile_cache"] = "tiles"
        update_record(run_dir, cfg, **arts)
    print(f"trained on {len(train.samples)} images; run record {run_dir / RECORD}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    run_dir = cfg.run_dir
    rec = read_record(run_dir)
    problems = verify_record(run_dir, rec, cfg)
    if problems:
        raise MissingArtifact("trained artifacts are incomplete: " + "; ".join(problems))
    for d in DRAWING_TYPES:
        load_classifier(run_dir / rec["artifacts"][f"classifier.{d}"])
    m = read_manifest(run_dir / rec["artifacts"]["manifest"])
    strategy = args.strategy or cfg.strategy
    with run_lock(run_dir):
        fs = run_dir / rec["artifacts"].get("feature_store", "features.npz")
        store = FeatureStore.load(fs) if fs.exists() else FeatureStore()
        tiles = TileCache(run_dir / "tiles") if (run_dir / "tiles").exists() else None
        plan = make_split(m, strategy, cfg.seed)
        report = evaluate_config(cfg, m, store, plan=plan, tile_cache=tiles)
        names = {k: f"{k}-{strategy}" for k in ("report", "leakage", "split")}
        (run_dir / f"{names['report']}.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (run_dir / f"{names['report']}.csv").write_text(report.to_csv(), encoding="utf-8")
        (run_dir / f"{names['leakage']}.json").write_text(json.dumps(report.leakage, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (run_dir / f"{names['split']}.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")
        store.save(fs)
        update_record(
            run_dir, cfg,
            **{f"report.{strategy}": f"{names['report']}.json", f"report_csv.{strategy}": f"{names['report']}.csv",
               f"leakage.{strategy}": f"{names['leakage']}.json", f"split.{strategy}": f"{names['split']}.json"},
        )
    print(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    m = load_dataset(cfg, args.config)
    _check_manifest(m)
    with run_lock(cfg.run_dir) as run_dir:
        tiles = TileCache(run_dir / "tiles") if (run_dir / "tiles").exists() else None
        table = ablate_config(cfg, m, tile_cache=tiles)
        (run_dir / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (run_dir / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
        cfg.save(run_dir / "config.json")
        update_record(run_dir, cfg, ablation="ablation.json", ablation_csv="ablation.csv", config="config.json")
    for row in table.rows():
        flag = " (reference)" if row["reference"] else ""
        print(f"{row['cell']:<22} weighted acc {row['weighted_accuracy'] * 100:6.2f}%  "
              f"delta {row['delta_vs_reference'] * 100:+6.2f} pp  ties {row['tie_broken']}{flag}")
    print(f"split {table.split_fingerprint}")
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args)
    run_dir = cfg.run_dir
    rec = read_record(run_dir)
    keys = sorted(k for k in rec["artifacts"] if k.startswith("report."))
    if args.strategy:
        keys = [k for k in keys if k == f"report.{args.strategy}"]
    if not keys:
        raise MissingArtifact(f"no evaluation report in {run_dir}; run `chunkpd evaluate` first")
    for k in keys:
        path = run_dir / rec["artifacts"][k]
        if not path.exists():
            raise MissingArtifact(f"report {path} is missing")
        report = MetricsReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
        path.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        print(report.to_text() if args.format == "text" else report.to_csv(), end="\n" if args.format == "text" else "")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkpd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str) -> None:
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("ingest", help="build a manifest from a directory or the toy generator")
    common(p, "manifest file to write (default manifest.jsonl)")
    p.add_argument("--toy", type=int, metavar="N", help="synthesise N toy subjects")
    p.add_argument("--root", help="dataset directory")
    p.add_argument("--layout", help="layout descriptor (INI) for --root")
    p.add_argument("--workers", type=int, default=1, help="decode threads for --root")
    p.add_argument("--write-images", metavar="DIR", help="with --toy: also write the drawings as PNG files")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="fill the run's tile cache")
    common(p, "override output_dir")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train all three stages and save checkpoints")
    common(p, "override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="cross-validate a trained run")
    common(p, "override output_dir")
    p.add_argument("--strategy", choices=("img_cv5", "ind_cv5", "loio"), help="override the split strategy")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="chunking x augmentation ablation on one shared split")
    common(p, "override output_dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render saved evaluation reports")
    common(p, "override output_dir")
    p.add_argument("--strategy", choices=("img_cv5", "ind_cv5", "loio"))
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ChunkPDError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
