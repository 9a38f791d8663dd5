"""Command-line pipeline driver.

One verb per pipeline stage so runs can be cached and partially redone:

    synth -> segment -> train -> embed/features -> combine -> eval -> report

plus ``pairs`` (inspect sampler output) and ``gradcheck`` (the 64-bit
gradient verification suite). Results go to files or stdout; logs go to
stderr. Every output is written atomically, and every command echoes its
fully resolved configuration next to what it wrote.

Config precedence is flags > ``--config`` file > built-in defaults. The
config file is a flat JSON object keyed by flag name (underscores for
hyphens, e.g. ``{"batch_size": 50}``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    CheckpointError,
    ContourlabError,
    FeasibilityError,
    FeatureError,
    ParseError,
    TrainingError,
    ValidationError,
)
from .util import atomic_write_text

logger = logging.getLogger(__name__)

THREADS_ENV = "CONTOURLAB_THREADS"
_BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS")

_ERROR_LABELS = (
    (FeasibilityError, "infeasible corpus"),
    (ParseError, "parse error"),
    (CheckpointError, "checkpoint error"),
    (TrainingError, "training error"),
    (FeatureError, "feature error"),
    (ValidationError, "invalid value"),
)


@dataclass
class RunConfig:
    """Fully resolved knobs for one command, for provenance echoes."""

    command: str
    values: dict

    def to_json(self) -> str:
        return json.dumps(
            {"command": self.command, "config": self.values},
            indent=2, sort_keys=True) + "\n"


def _echo_into_dir(run: RunConfig, out_dir: Path) -> None:
    atomic_write_text(out_dir / "run_config.json", run.to_json())


def _echo_beside_file(run: RunConfig, out_file: Path) -> None:
    atomic_write_text(out_file.with_suffix(".run.json"), run.to_json())


# Built-in defaults per command. Only keys listed here may appear in a
# config file; flags mirror a subset (paths stay flag-only).
_DEFAULTS: dict[str, dict] = {
    "synth": {
        "seed": 0, "recordings": 40, "frames": 3000,
        "rate_lo": 4.0, "rate_hi": 7.0, "depth_lo": 30.0, "depth_hi": 80.0,
        "slope_lo": -80.0, "slope_hi": 80.0, "base_lo": 150.0, "base_hi": 500.0,
        "noise_std": 3.0, "frame_period": 0.012,
    },
    "segment": {"voicing_threshold": 0.5},
    "pairs": {"task": "file", "n": 1000, "seed": 0},
    "train": {
        "task": "file", "epochs": 60, "batch_size": 50, "lr": 1e-4,
        "lr_floor": 1e-7, "patience": 5, "width": 1.0, "seed": 0,
        "augmentation": True, "max_shift": 1200.0,
        "train_samples": 2000, "val_samples": 400, "resample": False,
    },
    "embed": {"batch_size": 256},
    "features": {"skip_short": False},
    "combine": {},
    "eval": {
        "task": "task", "folds": 5, "seed": 0, "epochs": 100,
        "batch_size": 50, "lr": 1e-3, "label_name": "",
    },
    "report": {},
    "gradcheck": {"seeds": 10, "width": 0.25, "slotfill_hidden": 256, "seed": 0},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contourlab",
        description="Self-supervised pitch-contour representation pipeline.")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file; flags override it")
    shared.add_argument("--deterministic", action="store_true", default=None,
                        help="force single-worker execution (default: off)")
    shared.add_argument("-v", "--verbose", action="store_true",
                        help="log progress at info level to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared],
                       help="generate a synthetic sung-vibrato corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, help="corpus seed (default 0)")
    p.add_argument("--recordings", type=int, help="recording count (default 40)")
    p.add_argument("--frames", type=int, help="frames per recording (default 3000)")

    p = sub.add_parser("segment", parents=[shared],
                       help="cut voiced frames of a corpus into contours")
    p.add_argument("--manifest", required=True, help="corpus manifest JSON")
    p.add_argument("--out", required=True, help="output contour JSON file")
    p.add_argument("--voicing-threshold", type=float,
                   help="confidence cutoff (default 0.5)")
    p.add_argument("--labels-out",
                   help="also write per-contour recording labels to this CSV")

    p = sub.add_parser("pairs", parents=[shared],
                       help="sample pseudotask pairs/triples for inspection")
    p.add_argument("--contours", required=True, help="contour JSON file")
    p.add_argument("--task", choices=["file", "contiguous", "slotfill"],
                   help="pseudotask (default file)")
    p.add_argument("--out", required=True, help="output sample JSON file")
    p.add_argument("--n", type=int, help="sample count (default 1000)")
    p.add_argument("--seed", type=int, help="sampler seed (default 0)")

    p = sub.add_parser("train", parents=[shared], help="train one pseudotask")
    p.add_argument("--contours", required=True, help="contour JSON file")
    p.add_argument("--task", choices=["file", "contiguous", "slotfill"],
                   help="pseudotask (default file)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--epochs", type=int, help="training epochs (default 60)")
    p.add_argument("--batch-size", type=int, help="batch size (default 50)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-4)")
    p.add_argument("--width", type=float,
                   help="encoder width multiplier (default 1.0)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--augmentation", dest="augmentation", action="store_true",
                   default=None, help="transpose contours during training (default)")
    p.add_argument("--no-augmentation", dest="augmentation", action="store_false",
                   help="disable transposition augmentation")
    p.add_argument("--resample", action="store_true", default=None,
                   help="draw a fresh training sample set every epoch")

    p = sub.add_parser("embed", parents=[shared],
                       help="embed contours with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--contours", required=True, help="contour JSON file")
    p.add_argument("--out", required=True, help="output embedding CSV")
    p.add_argument("--batch-size", type=int, help="forward batch size (default 256)")

    p = sub.add_parser("features", parents=[shared],
                       help="extract 17 statistical features per contour")
    p.add_argument("--contours", required=True, help="contour JSON file")
    p.add_argument("--out", required=True, help="output feature CSV")

    p = sub.add_parser("combine", parents=[shared],
                       help="z-score and concatenate feature blocks")
    p.add_argument("--features", action="append", required=True,
                   metavar="NAME=PATH", help="named feature CSV (repeatable)")
    p.add_argument("--out", required=True, help="output combined CSV")

    p = sub.add_parser("eval", parents=[shared],
                       help="cross-validated downstream classification")
    p.add_argument("--features", action="append", required=True,
                   metavar="NAME=PATH",
                   help="named feature CSV; repeat to combine blocks")
    p.add_argument("--labels", required=True, help="per-contour label CSV")
    p.add_argument("--task", help="downstream task name for the report")
    p.add_argument("--label-name", help="label column to use (default: the only one)")
    p.add_argument("--folds", type=int, help="cross-validation folds (default 5)")
    p.add_argument("--seed", type=int, help="evaluation seed (default 0)")
    p.add_argument("--out", required=True, help="output report JSON")

    p = sub.add_parser("report", parents=[shared],
                       help="render evaluation reports as a results table")
    p.add_argument("inputs", nargs="+", help="eval report JSON files")
    p.add_argument("--out", help="directory for report.json and report.txt")

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="run the 64-bit gradient verification suite")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    p.add_argument("--seeds", type=int, help="number of seeds (default 10)")
    p.add_argument("--width", type=float,
                   help="encoder width for the full-model check (default 0.25)")
    return parser


def _load_config_file(path: str, command: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    allowed = _DEFAULTS[command]
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ValidationError(
            f"unknown config keys for {command}: {', '.join(unknown)}")
    return doc


def _resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config-file values, and explicit flags, in that order."""
    values = dict(_DEFAULTS[args.command])
    if args.config:
        values.update(_load_config_file(args.config, args.command))
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(command=args.command, values=values)


def _require_range(values: dict, lo_key: str, hi_key: str) -> tuple[float, float]:
    lo, hi = float(values[lo_key]), float(values[hi_key])
    if hi < lo:
        raise ValidationError(f"{hi_key} < {lo_key}")
    return lo, hi


def _cmd_synth(args, run: RunConfig) -> int:
    from .ingest import SynthSpec, generate_synthetic_corpus, write_corpus

    v = run.values
    spec = SynthSpec(
        n_recordings=int(v["recordings"]),
        frames_per_recording=int(v["frames"]),
        vibrato_rate_range=_require_range(v, "rate_lo", "rate_hi"),
        vibrato_depth_range=_require_range(v, "depth_lo", "depth_hi"),
        drift_slope_range=_require_range(v, "slope_lo", "slope_hi"),
        base_pitch_range=_require_range(v, "base_lo", "base_hi"),
        noise_std=float(v["noise_std"]),
        seed=int(v["seed"]),
        frame_period=float(v["frame_period"]),
    )
    tracks, manifest = generate_synthetic_corpus(spec)
    out_dir = Path(args.out)
    write_corpus(tracks, manifest, out_dir)
    _echo_into_dir(run, out_dir)
    print(f"wrote {len(tracks)} recordings to {out_dir}")
    return 0


def _segment_corpus(manifest_path: str, threshold: float):
    from .contour import segment_track
    from .ingest import load_corpus

    tracks, manifest = load_corpus(manifest_path)
    labels = {r.recording_id: dict(r.labels) for r in manifest.recordings}
    sequences = [segment_track(t, voicing_threshold=threshold) for t in tracks]
    return [s for s in sequences if s.contours], labels


def _cmd_segment(args, run: RunConfig) -> int:
    import csv as csv_mod
    import io

    from .contour import save_contours

    threshold = float(run.values["voicing_threshold"])
    sequences, labels = _segment_corpus(args.manifest, threshold)
    out = Path(args.out)
    save_contours(sequences, out)
    _echo_beside_file(run, out)
    n = sum(len(s) for s in sequences)
    if args.labels_out:
        keys = sorted({k for rec in labels.values() for k in rec})
        buf = io.StringIO()
        writer = csv_mod.writer(buf, lineterminator="\n")
        writer.writerow(["recording_id", "start_frame"] + keys)
        for seq in sequences:
            rec = labels[seq.recording_id]
            for c in seq.contours:
                writer.writerow([c.recording_id, c.start_frame]
                                + [rec.get(k, "") for k in keys])
        atomic_write_text(Path(args.labels_out), buf.getvalue())
    print(f"wrote {n} contours from {len(sequences)} recordings to {out}")
    return 0


def _load_sequences(path: str):
    from .contour import load_contours

    try:
        with open(path) as fh:
            return load_contours(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read contours: {exc}") from None


def _cmd_pairs(args, run: RunConfig) -> int:
    import numpy as np

    from .pipeline import sample_contiguous_pairs, sample_file_pairs, sample_triples

    v = run.values
    sequences = _load_sequences(args.contours)
    rng = np.random.default_rng(int(v["seed"]))
    n = int(v["n"])
    task = v["task"]

    def ref(c):
        return {"recording_id": c.recording_id, "start_frame": c.start_frame}

    if task == "slotfill":
        docs = [{"p1": ref(t.p1), "p2": ref(t.p2), "p3": ref(t.p3)}
                for t in sample_triples(sequences, n, rng)]
    else:
        sampler = sample_file_pairs if task == "file" else sample_contiguous_pairs
        docs = [{"a": ref(p.a), "b": ref(p.b), "label": p.label, "scheme": p.scheme}
                for p in sampler(sequences, n, rng)]
    out = Path(args.out)
    atomic_write_text(out, json.dumps({"task": task, "samples": docs}, indent=1) + "\n")
    _echo_beside_file(run, out)
    print(f"wrote {len(docs)} {task} samples to {out}")
    return 0


def _history_path(out: Path) -> Path:
    from .models import CHECKPOINT_SUFFIX

    name = out.name
    if name.endswith(CHECKPOINT_SUFFIX):
        return out.with_name(name[: -len(CHECKPOINT_SUFFIX)] + ".history.json")
    return out.with_name(out.stem + ".history.json")


def _cmd_train(args, run: RunConfig) -> int:
    from .pipeline import TrainConfig, train_pseudotask

    v = run.values
    config = TrainConfig(
        batch_size=int(v["batch_size"]),
        max_epochs=int(v["epochs"]),
        initial_lr=float(v["lr"]),
        lr_floor=float(v["lr_floor"]),
        patience=int(v["patience"]),
        seed=int(v["seed"]),
        width_multiplier=float(v["width"]),
        augmentation=bool(v["augmentation"]),
        max_shift_cents=float(v["max_shift"]),
        n_train_samples=int(v["train_samples"]),
        n_val_samples=int(v["val_samples"]),
        resample_per_epoch=bool(v["resample"]),
    )
    sequences = _load_sequences(args.contours)
    bundle, history = train_pseudotask(v["task"], sequences, config)
    out = Path(args.out)
    bundle.save(out)
    atomic_write_text(_history_path(out), json.dumps(history, indent=1) + "\n")
    _echo_beside_file(run, out)
    best = bundle.train_config
    print(f"trained {v['task']}: best epoch {best['best_epoch']} "
          f"val metric {best['best_val_metric']:.6f}, checkpoint {out}")
    return 0


def _embedding_names(dim: int) -> list[str]:
    width = max(3, len(str(dim - 1)))
    return [f"e{i:0{width}d}" for i in range(dim)]


def _cmd_embed(args, run: RunConfig) -> int:
    from .contour import flatten_sequences
    from .models import embed, load_checkpoint
    from .statfeat import features_to_csv

    bundle = load_checkpoint(args.checkpoint)
    contours = flatten_sequences(_load_sequences(args.contours))
    matrix = embed(bundle, contours, batch_size=int(run.values["batch_size"]))
    ids = [(c.recording_id, c.start_frame) for c in contours]
    text = features_to_csv(matrix, _embedding_names(matrix.shape[1]), ids=ids)
    out = Path(args.out)
    atomic_write_text(out, text)
    _echo_beside_file(run, out)
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} embeddings to {out}")
    return 0


def _cmd_features(args, run: RunConfig) -> int:
    from .contour import flatten_sequences
    from .statfeat import STAT_FEATURE_NAMES, features_to_csv, stat_feature_matrix

    contours = flatten_sequences(_load_sequences(args.contours))
    skip_short = bool(run.values["skip_short"])
    if skip_short:
        from .statfeat import MIN_VALID_FOR_FEATURES

        contours = [c for c in contours if c.valid_length >= MIN_VALID_FOR_FEATURES]
    matrix = stat_feature_matrix(contours)
    ids = [(c.recording_id, c.start_frame) for c in contours]
    out = Path(args.out)
    atomic_write_text(out, features_to_csv(matrix, STAT_FEATURE_NAMES, ids=ids))
    _echo_beside_file(run, out)
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} features to {out}")
    return 0


def _parse_named_features(specs: list[str]):
    """Load NAME=PATH feature blocks, checking row identity alignment."""
    from .statfeat import features_from_csv

    blocks = []
    ids0 = None
    for item in specs:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ValidationError(f"expected NAME=PATH, got {item!r}")
        try:
            with open(path) as fh:
                matrix, names, ids = features_from_csv(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read features {path!r}: {exc}") from None
        if not blocks:
            ids0 = ids
        elif (ids is None) != (ids0 is None) or (ids is not None and ids != ids0):
            raise ValidationError(
                f"feature block {name!r} rows do not line up with the first block")
        blocks.append((name, matrix, names))
    return blocks, ids0


def _cmd_combine(args, run: RunConfig) -> int:
    from .pipeline import combine_features
    from .statfeat import features_to_csv

    blocks, ids = _parse_named_features(args.features)
    combined_name, matrix = combine_features([(n, m) for n, m, _ in blocks])
    columns = [f"{name}.{col}" for name, _, cols in blocks for col in cols]
    out = Path(args.out)
    atomic_write_text(out, features_to_csv(matrix, columns, ids=ids))
    _echo_beside_file(run, out)
    print(f"wrote {combined_name}: {matrix.shape[0]}x{matrix.shape[1]} to {out}")
    return 0


def _read_labels(path: str, label_name: str):
    """Label CSV -> (picked column name, {(recording_id, start_frame): label})."""
    import csv as csv_mod

    try:
        with open(path, newline="") as fh:
            rows = list(csv_mod.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read labels: {exc}") from None
    if not rows:
        raise ParseError("label file is empty")
    header = rows[0]
    if header[:2] != ["recording_id", "start_frame"]:
        raise ParseError("label file must start with recording_id,start_frame columns")
    names = header[2:]
    if not names:
        raise ParseError("label file has no label columns")
    if not label_name:
        if len(names) > 1:
            raise ValidationError(
                f"label file has several columns ({', '.join(names)}); "
                "pick one with --label-name")
        label_name = names[0]
    if label_name not in names:
        raise ValidationError(
            f"label column {label_name!r} not in file (have {', '.join(names)})")
    col = 2 + names.index(label_name)
    table = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"label file line {lineno}: wrong column count")
        try:
            key = (row[0], int(row[1]))
        except ValueError:
            raise ParseError(f"label file line {lineno}: bad start_frame") from None
        table[key] = row[col]
    return label_name, table


def _cmd_eval(args, run: RunConfig) -> int:
    from .pipeline import EvalConfig, combine_features, crossval_eval

    v = run.values
    blocks, ids = _parse_named_features(args.features)
    if len(blocks) == 1:
        feature_set, matrix = blocks[0][0], blocks[0][1]
    else:
        feature_set, matrix = combine_features([(n, m) for n, m, _ in blocks])
    label_name, table = _read_labels(args.labels, v["label_name"])
    if ids is None:
        raise ValidationError(
            "feature file lacks recording_id,start_frame columns; "
            "cannot join labels")
    missing = [key for key in ids if key not in table]
    if missing:
        raise ValidationError(
            f"{len(missing)} contours have no label, first {missing[0]}")
    labels = [table[key] for key in ids]
    task = v["task"]
    config = EvalConfig(
        folds=int(v["folds"]), seed=int(v["seed"]), batch_size=int(v["batch_size"]),
        max_epochs=int(v["epochs"]), initial_lr=float(v["lr"]))
    report = crossval_eval(matrix, labels, task, config, feature_set=feature_set)
    out = Path(args.out)
    atomic_write_text(out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _echo_beside_file(run, out)
    print(f"{feature_set} on {task} ({label_name}): "
          f"mean accuracy {report.mean_acc:.3f} (chance {report.chance:.3f})")
    return 0


def _cmd_report(args, run: RunConfig) -> int:
    from .pipeline import EvalReport, render_report

    reports = []
    for path in args.inputs:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read report {path!r}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"report {path!r} is not valid JSON: {exc}") from None
        items = doc["reports"] if isinstance(doc, dict) and "reports" in doc else [doc]
        for item in items:
            try:
                reports.append(EvalReport(**item))
            except TypeError as exc:
                raise ValidationError(f"report {path!r}: {exc}") from None
    json_text, table_text = render_report(reports)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "report.json", json_text + "\n")
        atomic_write_text(out_dir / "report.txt", table_text)
        _echo_into_dir(run, out_dir)
    sys.stdout.write(table_text)
    return 0


def _cmd_gradcheck(args, run: RunConfig) -> int:
    from .verify import run_gradcheck_suite

    v = run.values
    results = run_gradcheck_suite(
        n_seeds=int(v["seeds"]), width=float(v["width"]),
        slotfill_hidden=int(v["slotfill_hidden"]), base_seed=int(v["seed"]))
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "segment": _cmd_segment,
    "pairs": _cmd_pairs,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "features": _cmd_features,
    "combine": _cmd_combine,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "gradcheck": _cmd_gradcheck,
}


def _cap_threads(deterministic: bool) -> None:
    cap = "1" if deterministic else os.environ.get(THREADS_ENV)
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {cap!r}")
    for name in _BLAS_ENV:
        os.environ.setdefault(name, cap)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        # BLAS pools size themselves when numpy first loads, so the cap
        # must land before any handler import pulls it in.
        _cap_threads(bool(args.deterministic))
        run = _resolve(args)
        return _COMMANDS[args.command](args, run)
    except ContourlabError as exc:
        for klass, label in _ERROR_LABELS:
            if isinstance(exc, klass):
                print(f"error: {label}: {exc}", file=sys.stderr)
                break
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
