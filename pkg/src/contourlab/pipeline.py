"""Pair/triple sampling, pseudotask training, and downstream evaluation.

The three self-supervised pseudotasks share one training loop:

* ``file``: classify whether two contours come from the same recording.
* ``contiguous``: classify whether two contours of one recording are
  adjacent; negatives mix non-adjacent same-recording pairs with
  cross-recording pairs half and half.
* ``slotfill``: reconstruct the outer contours of a consecutive triple
  and predict the middle one from the difference of the outer codes.

Recordings are split 90/10 into train/validation before any sampling, so
no validation contour ever reaches a training batch. The checkpoint
returned is the epoch with the best validation loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, f1_score
from sklearn.model_selection import StratifiedKFold

from .autodiff import Adam, PlateauSchedule, plateau_update
from .contour import MAX_SHIFT_CENTS, Contour, ContourSequence
from .errors import FeasibilityError, TrainingError, ValidationError
from .models import CheckpointBundle, DownstreamMlp, SiameseModel, SlotFillModel, VggConfig
from .statfeat import zscore_block

logger = logging.getLogger(__name__)

PAIR_TASKS = ("file", "contiguous")
TASKS = PAIR_TASKS + ("slotfill",)
VAL_FRACTION = 0.1


@dataclass
class PairSample:
    """Two contours and the pseudotask label (1 positive, 0 negative)."""

    a: Contour
    b: Contour
    label: int
    scheme: str


@dataclass
class TripleSample:
    """Three consecutive contours of one recording."""

    p1: Contour
    p2: Contour
    p3: Contour


@dataclass
class TrainConfig:
    """Knobs for one pseudotask training run."""

    batch_size: int = 50
    max_epochs: int = 60
    initial_lr: float = 1e-4
    lr_floor: float = 1e-7
    patience: int = 5
    seed: int = 0
    width_multiplier: float = 1.0
    augmentation: bool = True
    max_shift_cents: float = MAX_SHIFT_CENTS
    n_train_samples: int = 2000
    n_val_samples: int = 400
    resample_per_epoch: bool = False

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if not 30 <= self.max_epochs <= 100:
            raise ValidationError(f"max_epochs {self.max_epochs} outside [30, 100]")
        if self.initial_lr <= 0 or self.lr_floor <= 0 or self.lr_floor > self.initial_lr:
            raise ValidationError("need initial_lr >= lr_floor > 0")
        if self.patience < 1:
            raise ValidationError("patience must be positive")
        if self.max_shift_cents < 0:
            raise ValidationError("max_shift_cents must be non-negative")
        if self.n_train_samples < 1 or self.n_val_samples < 1:
            raise ValidationError("sample counts must be positive")
        return self


def sample_file_pairs(
    sequences: Sequence[ContourSequence], n: int, rng: np.random.Generator
) -> list[PairSample]:
    """Balanced file-membership pairs: ceil(n/2) positive, floor(n/2) negative.

    Positives draw two distinct contours of one recording; negatives draw
    contours of two distinct recordings.
    """
    seqs = [s for s in sequences if s.contours]
    n_pos = (n + 1) // 2
    n_neg = n // 2
    if n_neg and len(seqs) < 2:
        raise FeasibilityError("file pairing needs two recordings with contours")
    rich = [s for s in seqs if len(s.contours) >= 2]
    if n_pos and not rich:
        raise FeasibilityError("no recording has two contours for positive file pairs")
    samples = []
    for _ in range(n_pos):
        s = rich[rng.integers(len(rich))]
        i, j = rng.choice(len(s.contours), size=2, replace=False)
        samples.append(PairSample(s.contours[i], s.contours[j], 1, "file"))
    for _ in range(n_neg):
        u, v = rng.choice(len(seqs), size=2, replace=False)
        a = seqs[u].contours[rng.integers(len(seqs[u].contours))]
        b = seqs[v].contours[rng.integers(len(seqs[v].contours))]
        samples.append(PairSample(a, b, 0, "file"))
    return [samples[k] for k in rng.permutation(len(samples))]


def sample_contiguous_pairs(
    sequences: Sequence[ContourSequence], n: int, rng: np.random.Generator
) -> list[PairSample]:
    """Balanced adjacency pairs.

    Positives are consecutive contours (earlier first). Negatives split
    half and half between non-adjacent same-recording pairs (also earlier
    first, so ordering carries no label signal) and cross-recording
    pairs.
    """
    seqs = [s for s in sequences if s.contours]
    adjacent = [(s, i) for s in seqs for i in range(len(s.contours) - 1)]
    n_pos = (n + 1) // 2
    n_neg = n // 2
    n_same = n_neg // 2
    n_cross = n_neg - n_same
    if n_pos and not adjacent:
        raise FeasibilityError("no recording has adjacent contours")
    spread = [s for s in seqs if len(s.contours) >= 3]
    if n_same and not spread:
        raise FeasibilityError("no recording has three contours for same-file negatives")
    if n_cross and len(seqs) < 2:
        raise FeasibilityError("cross-file negatives need two recordings")
    samples = []
    for _ in range(n_pos):
        s, i = adjacent[rng.integers(len(adjacent))]
        samples.append(PairSample(s.contours[i], s.contours[i + 1], 1, "contiguous"))
    for _ in range(n_same):
        s = spread[rng.integers(len(spread))]
        while True:
            i, j = np.sort(rng.choice(len(s.contours), size=2, replace=False))
            if j - i >= 2:
                break
        samples.append(PairSample(s.contours[i], s.contours[j], 0, "contiguous"))
    for _ in range(n_cross):
        u, v = rng.choice(len(seqs), size=2, replace=False)
        a = seqs[u].contours[rng.integers(len(seqs[u].contours))]
        b = seqs[v].contours[rng.integers(len(seqs[v].contours))]
        samples.append(PairSample(a, b, 0, "contiguous"))
    return [samples[k] for k in rng.permutation(len(samples))]


def sample_triples(
    sequences: Sequence[ContourSequence], n: int, rng: np.random.Generator
) -> list[TripleSample]:
    """Uniform draws over all runs of three consecutive contours."""
    slots = [(s, i) for s in sequences for i in range(len(s.contours) - 2)]
    if not slots:
        raise FeasibilityError("no recording has three consecutive contours")
    out = []
    for _ in range(n):
        s, i = slots[rng.integers(len(slots))]
        out.append(TripleSample(s.contours[i], s.contours[i + 1], s.contours[i + 2]))
    return out


def split_by_recording(
    sequences: Sequence[ContourSequence],
    rng: np.random.Generator,
    val_fraction: float = VAL_FRACTION,
    min_val: int = 1,
    min_train: int = 1,
) -> tuple[list[ContourSequence], list[ContourSequence]]:
    """Disjoint train/validation split over whole recordings."""
    seqs = [s for s in sequences if s.contours]
    if len(seqs) < min_val + min_train:
        raise FeasibilityError(
            f"corpus has {len(seqs)} usable recordings, "
            f"need at least {min_val + min_train} for a train/validation split")
    order = rng.permutation(len(seqs))
    n_val = int(np.clip(round(val_fraction * len(seqs)), min_val, len(seqs) - min_train))
    val_idx = set(order[:n_val].tolist())
    train = [seqs[i] for i in range(len(seqs)) if i not in val_idx]
    val = [seqs[i] for i in sorted(val_idx)]
    return train, val


def _batch_cents(
    contours: Sequence[Contour],
    rng: np.random.Generator | None,
    max_shift: float,
) -> np.ndarray:
    """Stack cents rows; with an rng, transpose each row independently."""
    x = np.stack([c.values_cents for c in contours])
    if rng is not None and max_shift > 0:
        shifts = rng.uniform(-max_shift, max_shift, size=len(contours))
        for k, c in enumerate(contours):
            x[k, :c.valid_length] += shifts[k]
    return x


def _pair_arrays(samples, rng, max_shift):
    xa = _batch_cents([s.a for s in samples], rng, max_shift)
    xb = _batch_cents([s.b for s in samples], rng, max_shift)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return xa, xb, y


def _triple_arrays(samples, rng, max_shift):
    return tuple(
        _batch_cents([getattr(s, name) for s in samples], rng, max_shift)
        for name in ("p1", "p2", "p3")
    )


def _eval_pairs(model: SiameseModel, samples, batch_size) -> tuple[float, float]:
    """Mean loss and accuracy on pairs, no augmentation."""
    total_loss = 0.0
    correct = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        xa, xb, y = _pair_arrays(chunk, None, 0.0)
        logits, _, _ = model.pair_logits(xa, xb)
        z = logits.data.astype(np.float64)
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        total_loss += float(np.sum(lse - z[np.arange(len(y)), y]))
        correct += int(np.sum(np.argmax(z, axis=1) == y))
    return total_loss / len(samples), correct / len(samples)


def _eval_triples(model: SlotFillModel, samples, batch_size) -> dict[str, float]:
    """Weighted mean of the slot-fill loss terms, no augmentation."""
    sums = {"total": 0.0, "recon1": 0.0, "recon3": 0.0, "slot": 0.0}
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        p1, p2, p3 = _triple_arrays(chunk, None, 0.0)
        terms = model.triple_loss_terms(p1, p2, p3)
        for key in sums:
            sums[key] += float(terms[key].data) * len(chunk)
    return {key: value / len(samples) for key, value in sums.items()}


def train_pseudotask(
    kind: str,
    sequences: Sequence[ContourSequence],
    config: TrainConfig = TrainConfig(),
) -> tuple[CheckpointBundle, list[dict]]:
    """Train one pseudotask end to end.

    Returns the checkpoint of the best-validation-loss epoch plus one
    history row per epoch: ``epoch``, ``train_loss``, ``val_metric`` (the
    validation loss driving both the schedule and best-epoch selection),
    the ``lr`` used that epoch, and a task extra (``val_accuracy`` for
    pair tasks, ``val_e2_term`` for slot filling). Fully deterministic
    for a given corpus, config, and seed.

    With ``resample_per_epoch`` the training set is redrawn from the
    train split at the start of every epoch after the first, so no fixed
    pair set can be memorized; validation samples stay fixed throughout.
    """
    if kind not in TASKS:
        raise ValidationError(f"unknown pseudotask {kind!r}, expected one of {TASKS}")
    config.validate()
    rng = np.random.default_rng(config.seed)
    pair_task = kind in PAIR_TASKS
    min_recordings = 2 if pair_task else 1
    train_seqs, val_seqs = split_by_recording(
        sequences, rng, min_val=min_recordings, min_train=min_recordings)

    if kind == "file":
        sampler = sample_file_pairs
    elif kind == "contiguous":
        sampler = sample_contiguous_pairs
    else:
        sampler = sample_triples
    train_samples = sampler(train_seqs, config.n_train_samples, rng)
    val_samples = sampler(val_seqs, config.n_val_samples, rng)

    if pair_task:
        model = SiameseModel(
            VggConfig(width_multiplier=config.width_multiplier), seed=config.seed)
    else:
        model = SlotFillModel(seed=config.seed)
    optimizer = Adam(model.parameters(), lr=config.initial_lr)
    schedule = PlateauSchedule(
        current_lr=config.initial_lr, floor_lr=config.lr_floor, patience=config.patience)

    aug_rng = rng if config.augmentation else None
    best_val = math.inf
    best_epoch = 0
    best_params = {p.name: p.data.copy() for p in model.parameters()}
    history: list[dict] = []
    for epoch in range(1, config.max_epochs + 1):
        if config.resample_per_epoch and epoch > 1:
            train_samples = sampler(train_seqs, config.n_train_samples, rng)
        optimizer.lr = schedule.current_lr
        order = rng.permutation(len(train_samples))
        batch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            model.zero_grad()
            if pair_task:
                xa, xb, y = _pair_arrays(batch, aug_rng, config.max_shift_cents)
                loss = model.pair_loss(xa, xb, y)
            else:
                p1, p2, p3 = _triple_arrays(batch, aug_rng, config.max_shift_cents)
                loss = model.triple_loss(p1, p2, p3)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"{kind}: non-finite training loss {value} at epoch {epoch}, "
                    f"batch {lo // config.batch_size}")
            loss.backward()
            optimizer.step()
            batch_losses.append(value)
        train_loss = float(np.mean(batch_losses))

        row = {"epoch": epoch, "train_loss": train_loss, "lr": float(schedule.current_lr)}
        if pair_task:
            val_loss, val_acc = _eval_pairs(model, val_samples, config.batch_size)
            row["val_metric"] = val_loss
            row["val_accuracy"] = val_acc
        else:
            terms = _eval_triples(model, val_samples, config.batch_size)
            val_loss = terms["total"]
            row["val_metric"] = val_loss
            row["val_e2_term"] = terms["slot"]
        if not math.isfinite(val_loss):
            raise TrainingError(f"{kind}: non-finite validation loss at epoch {epoch}")
        history.append(row)
        logger.info("%s epoch %d: train %.4f val %.4f lr %.2e",
                    kind, epoch, train_loss, val_loss, schedule.current_lr)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {p.name: p.data.copy() for p in model.parameters()}
        schedule = plateau_update(schedule, val_loss)

    model.load_param_dict(best_params)
    snapshot = asdict(config)
    snapshot.update({
        "kind": kind,
        "best_epoch": best_epoch,
        "best_val_metric": best_val,
        "train_recordings": sorted(s.recording_id for s in train_seqs),
        "val_recordings": sorted(s.recording_id for s in val_seqs),
    })
    bundle = CheckpointBundle.from_model(
        model, train_config=snapshot, rng_seed=config.seed)
    return bundle, history


def combine_features(blocks: Sequence[tuple[str, np.ndarray]]) -> tuple[str, np.ndarray]:
    """Z-score each named block, then concatenate columns.

    The combined name joins the block names with ``-``. Row order is
    preserved, so permuting input rows permutes output rows identically.
    """
    if not blocks:
        raise ValidationError("combine_features needs at least one block")
    names = []
    mats = []
    n_rows = None
    for name, matrix in blocks:
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValidationError(f"block {name!r} is not a 2-D matrix")
        if n_rows is None:
            n_rows = m.shape[0]
        elif m.shape[0] != n_rows:
            raise ValidationError(
                f"block {name!r} has {m.shape[0]} rows, expected {n_rows}")
        names.append(name)
        mats.append(zscore_block(m)[0])
    return "-".join(names), np.hstack(mats)


def undersample(
    labels: Sequence, rng: np.random.Generator, classes: Sequence | None = None
) -> np.ndarray:
    """Indices of a class-balanced subset: every class at the minority count.

    Minority-class rows are all kept; each larger class contributes a
    uniform draw without replacement. Returned indices are sorted.
    """
    y = np.asarray(labels)
    if y.size == 0:
        raise ValidationError("undersample needs at least one label")
    values, counts = np.unique(y, return_counts=True)
    if classes is not None:
        missing = sorted(set(classes) - set(values.tolist()))
        if missing:
            raise ValidationError(f"classes with zero samples: {missing}")
    if len(values) < 2:
        raise ValidationError("undersampling needs at least two classes")
    m = int(counts.min())
    kept = []
    for v, c in zip(values, counts):
        idx = np.flatnonzero(y == v)
        kept.append(idx if c == m else rng.choice(idx, size=m, replace=False))
    return np.sort(np.concatenate(kept))


@dataclass
class EvalConfig:
    """Knobs for downstream cross-validated probing."""

    folds: int = 5
    seed: int = 0
    batch_size: int = 50
    max_epochs: int = 100
    initial_lr: float = 1e-3
    lr_floor: float = 1e-7
    patience: int = 5

    def validate(self) -> "EvalConfig":
        if self.folds < 2:
            raise ValidationError("folds must be at least 2")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be positive")
        if self.initial_lr <= 0 or self.lr_floor <= 0 or self.lr_floor > self.initial_lr:
            raise ValidationError("need initial_lr >= lr_floor > 0")
        return self


@dataclass
class EvalReport:
    """Cross-validated downstream accuracy for one task/feature-set pair."""

    task: str
    feature_set: str
    fold_accuracy: list[float]
    mean_acc: float
    std_acc: float
    macro_f1: list[float]
    mean_f1: float
    confusion: list[list[int]]
    chance: float
    n_per_class: int

    def to_dict(self) -> dict:
        return asdict(self)


def fit_downstream_mlp(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config: EvalConfig = EvalConfig(),
    seed: int = 0,
) -> DownstreamMlp:
    """Train the probe classifier; the plateau metric is the epoch train loss."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    model = DownstreamMlp(x.shape[1], n_classes, seed=seed)
    optimizer = Adam(model.parameters(), lr=config.initial_lr)
    schedule = PlateauSchedule(
        current_lr=config.initial_lr, floor_lr=config.lr_floor, patience=config.patience)
    rng = np.random.default_rng(seed)
    for epoch in range(1, config.max_epochs + 1):
        optimizer.lr = schedule.current_lr
        order = rng.permutation(len(y))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            model.zero_grad()
            loss = model.loss(x[idx], y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"probe: non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(value)
        schedule = plateau_update(schedule, float(np.mean(losses)))
    return model


def crossval_eval(
    features: np.ndarray,
    labels: Sequence,
    task: str,
    config: EvalConfig = EvalConfig(),
    feature_set: str = "features",
) -> EvalReport:
    """Stratified k-fold evaluation of features against labels.

    Inside each fold the training split is undersampled to class balance
    and z-scored; the held-out fold is untouched data transformed with
    the training statistics. Chance is 1/n_classes.
    """
    config.validate()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {x.shape}")
    y_raw = list(labels)
    if len(y_raw) != x.shape[0]:
        raise ValidationError(
            f"{len(y_raw)} labels for {x.shape[0]} feature rows")
    classes = sorted(set(y_raw))
    if len(classes) < 2:
        raise ValidationError("need at least two classes")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[v] for v in y_raw], dtype=np.int64)
    n_classes = len(classes)
    counts = np.bincount(y, minlength=n_classes)
    if counts.min() < config.folds:
        raise FeasibilityError(
            f"class {classes[int(np.argmin(counts))]!r} has {int(counts.min())} samples, "
            f"fewer than {config.folds} folds")

    rng = np.random.default_rng(config.seed)
    skf = StratifiedKFold(n_splits=config.folds, shuffle=True, random_state=config.seed)
    fold_acc: list[float] = []
    fold_f1: list[float] = []
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    n_per_class = None
    for fold, (train_idx, test_idx) in enumerate(skf.split(x, y)):
        kept = undersample(y[train_idx], rng)
        x_train = x[train_idx][kept]
        y_train = y[train_idx][kept]
        x_train_z, stats = zscore_block(x_train)
        x_test_z, _ = zscore_block(x[test_idx], stats)
        model = fit_downstream_mlp(
            x_train_z, y_train, n_classes, config, seed=config.seed + fold)
        pred = model.predict(x_test_z)
        y_test = y[test_idx]
        fold_acc.append(float(np.mean(pred == y_test)))
        fold_f1.append(float(f1_score(y_test, pred, average="macro",
                                      labels=np.arange(n_classes),
                                      zero_division=0)))
        confusion += confusion_matrix(y_test, pred, labels=np.arange(n_classes))
        fold_min = int(np.bincount(y_train, minlength=n_classes).min())
        n_per_class = fold_min if n_per_class is None else min(n_per_class, fold_min)
    return EvalReport(
        task=task,
        feature_set=feature_set,
        fold_accuracy=fold_acc,
        mean_acc=float(np.mean(fold_acc)),
        std_acc=float(np.std(fold_acc)),
        macro_f1=fold_f1,
        mean_f1=float(np.mean(fold_f1)),
        confusion=confusion.tolist(),
        chance=1.0 / n_classes,
        n_per_class=int(n_per_class),
    )


def render_report(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """Render evaluation reports as (json_text, table_text).

    The table has one row per feature set, one column per task, a final
    chance row, and accuracies in percent to one decimal place. The JSON
    document carries every field of every report.
    """
    if not reports:
        raise ValidationError("render_report needs at least one report")
    json_text = json.dumps(
        {"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True)

    tasks: list[str] = []
    feature_sets: list[str] = []
    cells: dict[tuple[str, str], EvalReport] = {}
    chance: dict[str, float] = {}
    for r in reports:
        if r.task not in tasks:
            tasks.append(r.task)
        if r.feature_set not in feature_sets:
            feature_sets.append(r.feature_set)
        cells[(r.feature_set, r.task)] = r
        chance[r.task] = r.chance

    def pct(value: float) -> str:
        return f"{100.0 * value:.1f}"

    rows = [["Features"] + tasks]
    for fs in feature_sets:
        rows.append([fs] + [
            pct(cells[(fs, t)].mean_acc) if (fs, t) in cells else "-"
            for t in tasks
        ])
    rows.append(["Chance"] + [pct(chance[t]) for t in tasks])
    widths = [max(len(row[i]) for row in rows) for i in range(len(tasks) + 1)]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(
            cell.ljust(w) if i == 0 else cell.rjust(w)
            for i, (cell, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    table_text = "\n".join(lines) + "\n"
    return json_text, table_text
