"""Pitch-track parsing, corpus manifests, and synthetic corpus generation.

The on-disk corpus layout is one CSV per recording (``time, frequency,
confidence`` rows on a fixed frame grid) plus a ``manifest.json`` that
names every recording, its relative path, and its categorical labels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from .errors import ParseError, ValidationError
from .util import atomic_write_text, fmt_float

DEFAULT_FRAME_PERIOD = 0.012  # seconds between analysis frames
MIN_VOICED_HZ = 20.0          # plausibility floor for nonzero f0
FRAME_GRID_TOL = 1e-6         # allowed jitter of time stamps off the grid
VALID_SPLITS = ("train", "validation", "test")
N_RATE_BINS = 3               # vibrato-rate classes in synthetic labels


@dataclass
class PitchTrack:
    """A fixed-rate f0 analysis of one recording.

    ``times``, ``f0`` and ``confidence`` are parallel float arrays; a
    frame is unvoiced when its f0 is exactly 0.
    """

    recording_id: str
    times: np.ndarray
    f0: np.ndarray
    confidence: np.ndarray
    frame_period: float = DEFAULT_FRAME_PERIOD

    def __len__(self) -> int:
        return len(self.times)

    def validate(self) -> "PitchTrack":
        if not self.recording_id:
            raise ValidationError("recording_id must be non-empty")
        if not (len(self.times) == len(self.f0) == len(self.confidence)):
            raise ValidationError("times, f0 and confidence must have equal length")
        if len(self.times) == 0:
            raise ValidationError(f"{self.recording_id}: pitch track has no frames")
        deltas = np.diff(self.times)
        if len(deltas) and deltas.min() <= 0:
            i = int(np.argmax(deltas <= 0))
            raise ValidationError(
                f"{self.recording_id}: non-increasing time at frame {i + 1}")
        if len(deltas) and np.abs(deltas - self.frame_period).max() > FRAME_GRID_TOL:
            i = int(np.argmax(np.abs(deltas - self.frame_period) > FRAME_GRID_TOL))
            raise ValidationError(
                f"{self.recording_id}: frame {i + 1} is off the "
                f"{self.frame_period}s grid (delta {deltas[i]:.9f})")
        bad = (self.f0 != 0) & (self.f0 <= MIN_VOICED_HZ)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(
                f"{self.recording_id}: f0 {self.f0[i]} Hz at frame {i} is neither 0 "
                f"nor above {MIN_VOICED_HZ} Hz")
        if (self.confidence < 0).any() or (self.confidence > 1).any():
            i = int(np.argmax((self.confidence < 0) | (self.confidence > 1)))
            raise ValidationError(
                f"{self.recording_id}: confidence {self.confidence[i]} at frame {i} "
                f"outside [0, 1]")
        return self


def parse_pitch_track(
    source: str | TextIO,
    recording_id: str,
    frame_period: float = DEFAULT_FRAME_PERIOD,
) -> PitchTrack:
    """Parse ``time,frequency,confidence`` CSV text into a PitchTrack.

    A single header row is tolerated (detected by a non-numeric first
    field on line 1). Extra or missing columns and unparseable numbers
    raise :class:`ParseError` with the 1-based line number.
    """
    text = source.read() if hasattr(source, "read") else source
    rows: list[tuple[float, float, float]] = []
    for lineno, raw in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not raw or (len(raw) == 1 and not raw[0].strip()):
            continue  # blank line
        if len(raw) != 3:
            raise ParseError(
                f"{recording_id}: line {lineno}: expected 3 columns, got {len(raw)}")
        if lineno == 1:
            try:
                float(raw[0])
            except ValueError:
                continue  # header row
        try:
            rows.append((float(raw[0]), float(raw[1]), float(raw[2])))
        except ValueError as exc:
            raise ParseError(f"{recording_id}: line {lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{recording_id}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    track = PitchTrack(
        recording_id=recording_id,
        times=arr[:, 0],
        f0=arr[:, 1],
        confidence=arr[:, 2],
        frame_period=frame_period,
    )
    return track.validate()


def serialize_pitch_track(track: PitchTrack) -> str:
    """Render a PitchTrack back to CSV; floats round-trip exactly."""
    lines = ["time,frequency,confidence"]
    for t, f, c in zip(track.times, track.f0, track.confidence):
        lines.append(f"{fmt_float(t)},{fmt_float(f)},{fmt_float(c)}")
    return "\n".join(lines) + "\n"


@dataclass
class RecordingMeta:
    """Manifest entry: a recording id, its file path, and label values."""

    recording_id: str
    path: str
    labels: dict[str, str] = field(default_factory=dict)


@dataclass
class Manifest:
    """A split tag plus the recordings that belong to the split."""

    split: str
    recordings: list[RecordingMeta]

    def validate(self, base_dir: str | Path | None = None) -> "Manifest":
        if self.split not in VALID_SPLITS:
            raise ValidationError(
                f"split {self.split!r} not one of {', '.join(VALID_SPLITS)}")
        if not self.recordings:
            raise ValidationError("manifest lists no recordings")
        seen: set[str] = set()
        for rec in self.recordings:
            if not rec.recording_id:
                raise ValidationError("manifest entry with empty id")
            if rec.recording_id in seen:
                raise ValidationError(f"duplicate recording id {rec.recording_id!r}")
            seen.add(rec.recording_id)
            if not rec.path:
                raise ValidationError(f"{rec.recording_id}: empty path")
            if base_dir is not None and not (Path(base_dir) / rec.path).is_file():
                raise ValidationError(
                    f"{rec.recording_id}: file {rec.path!r} not found under {base_dir}")
        return self


def load_manifest(source: str | TextIO, base_dir: str | Path | None = None) -> Manifest:
    """Parse manifest JSON; with ``base_dir``, check each path resolves."""
    text = source.read() if hasattr(source, "read") else source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "split" not in doc or "recordings" not in doc:
        raise ParseError('manifest must be an object with "split" and "recordings"')
    if not isinstance(doc["recordings"], list):
        raise ParseError('"recordings" must be a list')
    recordings = []
    for i, entry in enumerate(doc["recordings"]):
        if not isinstance(entry, dict) or "id" not in entry or "path" not in entry:
            raise ParseError(f'recording {i}: each entry needs "id" and "path"')
        labels_raw = entry.get("labels", {})
        if not isinstance(labels_raw, dict):
            raise ParseError(f'recording {i}: "labels" must be an object')
        labels = {str(k): str(v) for k, v in labels_raw.items()}
        recordings.append(RecordingMeta(str(entry["id"]), str(entry["path"]), labels))
    manifest = Manifest(split=str(doc["split"]), recordings=recordings)
    return manifest.validate(base_dir=base_dir)


def manifest_to_json(manifest: Manifest) -> str:
    doc = {
        "split": manifest.split,
        "recordings": [
            {"id": r.recording_id, "path": r.path, "labels": dict(r.labels)}
            for r in manifest.recordings
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic sung-vibrato corpus.

    Each recording draws one latent style tuple (vibrato rate and depth,
    drift slope, base pitch) held constant for its whole duration:

        f0(t) = base * 2 ** ((slope*t + depth*sin(2*pi*rate*t) + noise) / 1200)

    Ranges may be degenerate points (lo == hi) to pin a value.
    """

    n_recordings: int = 40
    frames_per_recording: int = 3000
    vibrato_rate_range: tuple[float, float] = (4.0, 7.0)
    vibrato_depth_range: tuple[float, float] = (30.0, 80.0)
    drift_slope_range: tuple[float, float] = (-80.0, 80.0)
    base_pitch_range: tuple[float, float] = (150.0, 500.0)
    noise_std: float = 3.0
    seed: int = 0
    frame_period: float = DEFAULT_FRAME_PERIOD

    def validate(self) -> "SynthSpec":
        if self.n_recordings < 1:
            raise ValidationError("n_recordings must be positive")
        if self.frames_per_recording < 1:
            raise ValidationError("frames_per_recording must be positive")
        for name in ("vibrato_rate_range", "vibrato_depth_range",
                     "drift_slope_range", "base_pitch_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} has lo > hi")
        if self.vibrato_rate_range[0] < 0 or self.vibrato_depth_range[0] < 0:
            raise ValidationError("vibrato rate and depth must be non-negative")
        if self.base_pitch_range[0] <= MIN_VOICED_HZ:
            raise ValidationError(f"base pitch must stay above {MIN_VOICED_HZ} Hz")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if self.frame_period <= 0:
            raise ValidationError("frame_period must be positive")
        return self


def _rate_class(rate: float, lo: float, hi: float) -> str:
    if hi <= lo:
        return "vr0"
    idx = min(N_RATE_BINS - 1, int((rate - lo) / (hi - lo) * N_RATE_BINS))
    return f"vr{idx}"


def generate_synthetic_corpus(spec: SynthSpec) -> tuple[list[PitchTrack], Manifest]:
    """Draw a corpus from ``spec``; byte-identical given the same seed.

    Labels carry both derived classes (binned vibrato rate, slope sign)
    and the exact latent values as strings, so the style tuple of every
    recording can be recovered from the manifest alone.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.frames_per_recording, dtype=np.float64) * spec.frame_period
    tracks: list[PitchTrack] = []
    entries: list[RecordingMeta] = []
    for r in range(spec.n_recordings):
        rate = float(rng.uniform(*spec.vibrato_rate_range))
        depth = float(rng.uniform(*spec.vibrato_depth_range))
        slope = float(rng.uniform(*spec.drift_slope_range))
        base = float(rng.uniform(*spec.base_pitch_range))
        noise = (rng.normal(0.0, spec.noise_std, size=t.shape)
                 if spec.noise_std > 0 else np.zeros_like(t))
        cents = slope * t + depth * np.sin(2.0 * math.pi * rate * t) + noise
        f0 = base * np.power(2.0, cents / 1200.0)
        if f0.min() <= MIN_VOICED_HZ:
            raise ValidationError(
                f"synthetic recording {r} dips to {f0.min():.2f} Hz; "
                "narrow the drift or raise the base pitch range")
        rid = f"synth{r:04d}"
        tracks.append(PitchTrack(
            recording_id=rid,
            times=t.copy(),
            f0=f0,
            confidence=np.ones_like(t),
            frame_period=spec.frame_period,
        ))
        entries.append(RecordingMeta(rid, f"{rid}.csv", {
            "vibrato_rate_class": _rate_class(rate, *spec.vibrato_rate_range),
            "slope_sign": "up" if slope >= 0 else "down",
            "vibrato_rate_hz": fmt_float(rate),
            "vibrato_depth_cents": fmt_float(depth),
            "drift_slope_cents_per_s": fmt_float(slope),
            "base_pitch_hz": fmt_float(base),
        }))
    return tracks, Manifest(split="train", recordings=entries)


def write_corpus(tracks: list[PitchTrack], manifest: Manifest, out_dir: str | Path) -> Path:
    """Write one CSV per track plus manifest.json under ``out_dir``."""
    out_dir = Path(out_dir)
    by_id = {t.recording_id: t for t in tracks}
    missing = [r.recording_id for r in manifest.recordings if r.recording_id not in by_id]
    if missing:
        raise ValidationError(f"manifest names recordings with no track: {missing}")
    for rec in manifest.recordings:
        atomic_write_text(out_dir / rec.path, serialize_pitch_track(by_id[rec.recording_id]))
    atomic_write_text(out_dir / "manifest.json", manifest_to_json(manifest))
    return out_dir


def load_corpus(manifest_path: str | Path) -> tuple[list[PitchTrack], Manifest]:
    """Read a manifest file and every pitch track it references."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path) as fh:
        manifest = load_manifest(fh, base_dir=base)
    tracks = []
    for rec in manifest.recordings:
        with open(base / rec.path) as fh:
            tracks.append(parse_pitch_track(fh, rec.recording_id))
    return tracks, manifest
