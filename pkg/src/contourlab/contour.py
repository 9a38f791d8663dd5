"""Segmentation of pitch tracks into fixed-length, median-centered contours.

Voiced frames (confidence at or above threshold, f0 > 0) are concatenated
and chopped into non-overlapping 100-frame windows. Each window's cents
values are centered so their median is 0; a final short window is kept
and zero-padded, with ``valid_length`` recording where the data ends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import ParseError, ValidationError
from .ingest import PitchTrack
from .util import atomic_write_text

CONTOUR_LEN = 100           # frames per contour
REFERENCE_HZ = 440.0        # 0 cents reference before median centering
DEFAULT_VOICING_THRESHOLD = 0.5
MAX_SHIFT_CENTS = 1200.0    # augmentation draws from [-MAX_SHIFT, +MAX_SHIFT]


def hz_to_cents(f0_hz, reference_hz: float = REFERENCE_HZ):
    """Map frequency to cents relative to ``reference_hz``.

    Accepts a scalar or array; every value must be positive.
    """
    arr = np.asarray(f0_hz, dtype=np.float64)
    if (arr <= 0).any():
        raise ValidationError("hz_to_cents requires strictly positive frequencies")
    out = 1200.0 * np.log2(arr / reference_hz)
    return float(out) if np.isscalar(f0_hz) or arr.ndim == 0 else out


@dataclass
class Contour:
    """One 100-frame pitch contour.

    ``values_cents`` is median-centered over the first ``valid_length``
    entries and exactly zero in the padding; ``values_hz`` keeps the raw
    voiced frequencies (padding zeros). ``start_frame`` indexes into the
    recording's concatenated voiced-frame stream, so consecutive contours
    of one recording sit 100 frames apart regardless of unvoiced gaps in
    the source.
    """

    recording_id: str
    start_frame: int
    values_cents: np.ndarray
    values_hz: np.ndarray
    valid_length: int

    def validate(self) -> "Contour":
        if len(self.values_cents) != CONTOUR_LEN or len(self.values_hz) != CONTOUR_LEN:
            raise ValidationError(
                f"contour arrays must have length {CONTOUR_LEN}, "
                f"got {len(self.values_cents)}/{len(self.values_hz)}")
        if not 1 <= self.valid_length <= CONTOUR_LEN:
            raise ValidationError(f"valid_length {self.valid_length} outside [1, {CONTOUR_LEN}]")
        if self.start_frame < 0 or self.start_frame % CONTOUR_LEN != 0:
            raise ValidationError(f"start_frame {self.start_frame} not a multiple of {CONTOUR_LEN}")
        pad = self.values_cents[self.valid_length:]
        if pad.size and np.abs(pad).max() != 0:
            raise ValidationError("cents padding must be exactly zero")
        return self


@dataclass
class ContourSequence:
    """All contours of one recording, in stream order."""

    recording_id: str
    contours: list[Contour] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.contours)

    def validate(self) -> "ContourSequence":
        for i, c in enumerate(self.contours):
            if c.recording_id != self.recording_id:
                raise ValidationError(
                    f"contour {i} belongs to {c.recording_id!r}, not {self.recording_id!r}")
            if c.start_frame != i * CONTOUR_LEN:
                raise ValidationError(
                    f"contour {i} starts at {c.start_frame}, expected {i * CONTOUR_LEN}")
            c.validate()
        return self


def center_median(values, valid_length: int | None = None) -> np.ndarray:
    """Subtract the median of the first ``valid_length`` entries from them.

    Entries past ``valid_length`` are returned untouched (they are
    padding). Defaults to the full length.
    """
    arr = np.array(values, dtype=np.float64)
    n = len(arr) if valid_length is None else int(valid_length)
    if not 1 <= n <= len(arr):
        raise ValidationError(f"valid_length {n} outside [1, {len(arr)}]")
    arr[:n] -= np.median(arr[:n])
    return arr


def segment_track(
    track: PitchTrack,
    voicing_threshold: float = DEFAULT_VOICING_THRESHOLD,
) -> ContourSequence:
    """Chop the voiced frames of ``track`` into centered contours.

    Returns an empty sequence when no frame passes the voicing gate.
    """
    if not 0.0 <= voicing_threshold <= 1.0:
        raise ValidationError(f"voicing threshold {voicing_threshold} outside [0, 1]")
    voiced = (track.confidence >= voicing_threshold) & (track.f0 > 0)
    voiced_hz = track.f0[voiced]
    seq = ContourSequence(recording_id=track.recording_id)
    if voiced_hz.size == 0:
        return seq
    cents_stream = hz_to_cents(voiced_hz)
    for start in range(0, voiced_hz.size, CONTOUR_LEN):
        chunk_hz = voiced_hz[start:start + CONTOUR_LEN]
        chunk_cents = cents_stream[start:start + CONTOUR_LEN]
        n = chunk_hz.size
        cents = np.zeros(CONTOUR_LEN, dtype=np.float64)
        hz = np.zeros(CONTOUR_LEN, dtype=np.float64)
        cents[:n] = chunk_cents - np.median(chunk_cents)
        hz[:n] = chunk_hz
        seq.contours.append(Contour(
            recording_id=track.recording_id,
            start_frame=start,
            values_cents=cents,
            values_hz=hz,
            valid_length=n,
        ))
    return seq.validate()


def augment_transpose(
    contour: Contour,
    rng: np.random.Generator,
    max_shift: float = MAX_SHIFT_CENTS,
) -> Contour:
    """Return a copy shifted by one uniform draw from [-max_shift, +max_shift].

    The shift applies to the valid cents region only; padding stays zero
    and ``values_hz`` is untouched. Draw anew on every use.
    """
    shift = float(rng.uniform(-max_shift, max_shift))
    cents = contour.values_cents.copy()
    cents[:contour.valid_length] += shift
    return Contour(
        recording_id=contour.recording_id,
        start_frame=contour.start_frame,
        values_cents=cents,
        values_hz=contour.values_hz.copy(),
        valid_length=contour.valid_length,
    )


def contour_to_dict(contour: Contour) -> dict:
    return {
        "recording_id": contour.recording_id,
        "start_frame": int(contour.start_frame),
        "valid_length": int(contour.valid_length),
        "values_cents": [float(v) for v in contour.values_cents],
        "values_hz": [float(v) for v in contour.values_hz],
    }


def contour_from_dict(doc: dict) -> Contour:
    try:
        contour = Contour(
            recording_id=str(doc["recording_id"]),
            start_frame=int(doc["start_frame"]),
            values_cents=np.asarray(doc["values_cents"], dtype=np.float64),
            values_hz=np.asarray(doc["values_hz"], dtype=np.float64),
            valid_length=int(doc["valid_length"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad contour record: {exc}") from None
    return contour.validate()


def save_contours(sequences: Iterable[ContourSequence], path) -> None:
    """Write sequences as one flat JSON array, stream order preserved."""
    docs = [contour_to_dict(c) for seq in sequences for c in seq.contours]
    atomic_write_text(path, json.dumps(docs) + "\n")


def load_contours(source: str | TextIO) -> list[ContourSequence]:
    """Read a flat contour array back into per-recording sequences.

    Consecutive records with the same recording_id form one sequence;
    each sequence must again start at frame 0 and step by 100.
    """
    text = source.read() if hasattr(source, "read") else source
    try:
        docs = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"contour file is not valid JSON: {exc}") from None
    if not isinstance(docs, list):
        raise ParseError("contour file must be a JSON array")
    sequences: list[ContourSequence] = []
    for doc in docs:
        c = contour_from_dict(doc)
        if not sequences or sequences[-1].recording_id != c.recording_id:
            sequences.append(ContourSequence(recording_id=c.recording_id))
        sequences[-1].contours.append(c)
    seen = set()
    for seq in sequences:
        if seq.recording_id in seen:
            raise ValidationError(
                f"recording {seq.recording_id!r} appears in two separate runs")
        seen.add(seq.recording_id)
        seq.validate()
    return sequences


def flatten_sequences(sequences: Iterable[ContourSequence]) -> list[Contour]:
    return [c for seq in sequences for c in seq.contours]


def cent_matrix(contours: Iterable[Contour]) -> np.ndarray:
    """Stack contour cents rows into an (n, 100) float64 matrix."""
    rows = [c.values_cents for c in contours]
    if not rows:
        return np.zeros((0, CONTOUR_LEN), dtype=np.float64)
    return np.stack(rows).astype(np.float64)
