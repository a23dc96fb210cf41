"""Sensor sequences, sliding-window weak labelling, CSV I/O and a synthetic generator."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decoder import LabelVocabulary

log = logging.getLogger(__name__)


@dataclass
class SensorSequence:
    samples: np.ndarray  # [time, modalities]
    sampling_rate: float
    subject_id: str
    annotations: list[tuple[str, int, int]] = field(default_factory=list)  # (class, start, end) end exclusive
    name: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or len(self.samples) < 1:
            raise ValueError("samples must be a non-empty [time, modalities] array")
        self.annotations = sorted(self.annotations, key=lambda a: a[1])
        for (_, s0, e0), (_, s1, _) in zip(self.annotations, self.annotations[1:]):
            if s1 < e0:
                raise ValueError("annotations overlap")

    @property
    def length(self) -> int:
        return len(self.samples)


@dataclass
class WeakSample:
    window: np.ndarray  # [window_length, modalities]
    weak_label: list[str]
    subject_id: str
    truth_spans: list[tuple[str, int, int]] = field(default_factory=list)  # evaluation only
    sample_id: str = ""
    offset: int = 0

    @property
    def kind(self) -> str:
        """Sample type such as ``"A"`` or ``"A-B"`` (empty string for background)."""
        return "-".join(self.weak_label)


def segment(
    seq: SensorSequence,
    window_length: int,
    stride: int | None = None,
    overlap_min: float = 0.5,
    null_label: str | None = None,
    ambiguity_margin: float = 0.0,
) -> list[WeakSample]:
    """Cut fixed-length windows and attach sequential weak labels.

    An annotated activity enters a window's label when at least
    ``overlap_min`` of its own length lies inside the window. Windows with no
    activity are dropped, or labelled ``[null_label]`` when one is given.
    With ``ambiguity_margin > 0``, windows holding an activity whose covered
    fraction is within the margin of ``overlap_min`` are dropped.
    """
    if stride is None:
        stride = max(1, window_length // 2)
    if window_length < 1 or stride < 1:
        raise ValueError("window_length and stride must be positive")
    if window_length > seq.length:
        log.warning("window_length %d exceeds sequence length %d; no windows", window_length, seq.length)
        return []
    out = []
    for k, start in enumerate(range(0, seq.length - window_length + 1, stride)):
        end = start + window_length
        labels, spans = [], []
        ambiguous = False
        for cls, a0, a1 in seq.annotations:
            inside = min(a1, end) - max(a0, start)
            if inside <= 0:
                continue
            frac = inside / (a1 - a0)
            if abs(frac - overlap_min) < ambiguity_margin:
                ambiguous = True
            if frac >= overlap_min:
                labels.append(cls)
                spans.append((cls, max(a0, start) - start, min(a1, end) - start))
        if ambiguous:
            continue
        if not labels:
            if null_label is None:
                continue
            labels = [null_label]
        out.append(
            WeakSample(
                window=seq.samples[start:end],
                weak_label=labels,
                subject_id=seq.subject_id,
                truth_spans=spans,
                sample_id=f"{seq.subject_id}/{seq.name or 'seq'}/{k}",
                offset=start,
            )
        )
    return out


def segment_all(sequences: Iterable[SensorSequence], window_length: int, stride: int | None = None, **kw) -> list[WeakSample]:
    out = []
    for seq in sequences:
        out.extend(segment(seq, window_length, stride, **kw))
    return out


def split_by_subject(data: Sequence, train_subjects, test_subjects) -> tuple[list, list]:
    """Partition items carrying ``subject_id`` into train and test lists."""
    train_subjects, test_subjects = {str(s) for s in train_subjects}, {str(s) for s in test_subjects}
    overlap = train_subjects & test_subjects
    if overlap:
        raise ValueError(f"subjects in both splits: {sorted(overlap)}")
    train = [d for d in data if str(d.subject_id) in train_subjects]
    test = [d for d in data if str(d.subject_id) in test_subjects]
    return train, test


def encode_label_sequence(weak_label: Sequence[str], vocab: LabelVocabulary, length: int = 10) -> np.ndarray:
    """``[START, classes..., END, PAD...]`` as token indices, exactly ``length`` long."""
    if len(weak_label) > length - 2:
        raise ValueError(f"{len(weak_label)} activities do not fit a label sequence of length {length}")
    idx = [vocab.start] + [vocab.encode(c) for c in weak_label] + [vocab.end]
    idx += [vocab.pad] * (length - len(idx))
    return np.array(idx, dtype=np.int64)


# synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class ClassWaveform:
    amplitude: float
    frequency: float  # Hz
    axis_mix: tuple[float, ...]  # per-modality gain
    harmonic: float = 0.0  # relative amplitude of the second harmonic


DEFAULT_CLASSES = {
    "A": ClassWaveform(1.0, 1.0, (1.0, 0.3, 0.0)),
    "B": ClassWaveform(1.0, 2.5, (0.0, 1.0, 0.3), harmonic=0.3),
    "C": ClassWaveform(1.0, 0.5, (0.3, 0.0, 1.0), harmonic=0.5),
}


@dataclass(frozen=True)
class SyntheticSpec:
    classes: dict = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    orders: tuple[str, ...] = ("A-B-C", "C-B-A")
    activity_duration: float = 5.0  # seconds
    gap_range: tuple[float, float] = (2.0, 6.0)  # seconds
    noise_std: float = 0.1
    background_std: float = 0.05
    sampling_rate: float = 50.0
    window_length: int = 650
    subjects: int = 10
    cycles: int = 10  # repetitions of each order per subject
    amplitude_jitter: float = 0.15
    frequency_jitter: float = 0.05

    def __post_init__(self):
        if self.window_length < self.sampling_rate * self.activity_duration:
            raise ValueError("window_length must fit at least one activity")
        for order in self.orders:
            for cls in order.split("-"):
                if cls not in self.classes:
                    raise ValueError(f"order {order!r} uses unknown class {cls!r}")

    @property
    def modalities(self) -> int:
        return len(next(iter(self.classes.values())).axis_mix)


def _waveform(wf: ClassWaveform, n: int, rate: float, amp: float, freq: float, phase: float) -> np.ndarray:
    t = np.arange(n) / rate
    base = np.sin(2 * np.pi * freq * t + phase) + wf.harmonic * np.sin(4 * np.pi * freq * t + 2 * phase)
    return amp * wf.amplitude * base[:, None] * np.asarray(wf.axis_mix)[None, :]


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[SensorSequence]:
    """One sequence per (subject, order): the order repeated ``cycles`` times with random gaps."""
    rng = np.random.default_rng(seed)
    rate = spec.sampling_rate
    act_len = int(round(spec.activity_duration * rate))
    m = spec.modalities
    out = []
    for s in range(spec.subjects):
        subject = f"s{s:02d}"
        amp = {c: 1.0 + rng.uniform(-1, 1) * spec.amplitude_jitter for c in spec.classes}
        freq = {c: wf.frequency * (1.0 + rng.uniform(-1, 1) * spec.frequency_jitter) for c, wf in spec.classes.items()}
        for order in spec.orders:
            chunks, annotations, pos = [], [], 0
            for _ in range(spec.cycles):
                for cls in order.split("-"):
                    gap = int(round(rng.uniform(*spec.gap_range) * rate))
                    chunks.append(rng.normal(0.0, spec.background_std, size=(gap, m)))
                    pos += gap
                    wave = _waveform(spec.classes[cls], act_len, rate, amp[cls], freq[cls], rng.uniform(0, 2 * np.pi))
                    chunks.append(wave + rng.normal(0.0, spec.noise_std, size=wave.shape))
                    annotations.append((cls, pos, pos + act_len))
                    pos += act_len
            tail = int(round(spec.gap_range[1] * rate))
            chunks.append(rng.normal(0.0, spec.background_std, size=(tail, m)))
            out.append(SensorSequence(np.concatenate(chunks), rate, subject, annotations, name=order))
    return out


# CSV -----------------------------------------------------------------------


class SchemaError(ValueError):
    pass


def write_csv(sequences: Sequence[SensorSequence], path, annotations_path=None) -> None:
    """Write sequences in the sensor CSV schema (timestamps in seconds)."""
    if not sequences:
        raise ValueError("nothing to write")
    m = sequences[0].samples.shape[1]
    rate = sequences[0].sampling_rate
    names = _channel_names(m)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "timestamp"] + names)
        for seq in sequences:
            if seq.sampling_rate != rate or seq.samples.shape[1] != m:
                raise ValueError("all sequences in one file share rate and channel count")
            subject = _sequence_key(seq)
            for i, row in enumerate(seq.samples):
                w.writerow([subject, repr(i / rate)] + [repr(float(v)) for v in row])
    if annotations_path is not None:
        with open(annotations_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "class", "start_index", "end_index"])
            for seq in sequences:
                for cls, a0, a1 in seq.annotations:
                    w.writerow([_sequence_key(seq), cls, a0, a1])


def _sequence_key(seq: SensorSequence) -> str:
    return f"{seq.subject_id}:{seq.name}" if seq.name else str(seq.subject_id)


def _channel_names(m: int) -> list[str]:
    base = ["ax", "ay", "az"]
    return base[:m] + [f"ch{i}" for i in range(3, m)]


def load_csv(path, annotations_path=None, sampling_rate: float | None = None) -> list[SensorSequence]:
    """Load sensor CSV rows grouped by the ``subject`` column.

    A subject value of the form ``id:name`` marks separate recordings of one
    subject. The sampling rate comes from the timestamp spacing unless given.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, expected a header line")
        header = [h.strip() for h in header]
        required = ["subject", "timestamp", "ax", "ay", "az"]
        if header[:5] != required:
            raise SchemaError(f"{path}: header must start with {','.join(required)}, got {','.join(header)}")
        width = len(header)
        rows: dict[str, list] = defaultdict(list)
        stamps: dict[str, list] = defaultdict(list)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise SchemaError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                t = float(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            key = row[0]
            if stamps[key] and t <= stamps[key][-1]:
                raise SchemaError(f"{path}:{lineno}: timestamps must increase within subject {key}")
            rows[key].append(values)
            stamps[key].append(t)
    if not rows:
        log.warning("%s has a header but no rows", path)
        return []
    notes: dict[str, list] = defaultdict(list)
    if annotations_path is not None:
        for key, cls, a0, a1 in load_annotations(annotations_path):
            notes[key].append((cls, a0, a1))
    out = []
    for key, values in rows.items():
        rate = sampling_rate
        if rate is None:
            ts = stamps[key]
            rate = round((len(ts) - 1) / (ts[-1] - ts[0]), 6) if len(ts) > 1 else 1.0
        subject, _, name = key.partition(":")
        out.append(SensorSequence(np.array(values), float(rate), subject, notes.get(key, []), name=name))
    return out


def load_annotations(path) -> list[tuple[str, str, int, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject", "class", "start_index", "end_index"]:
            raise SchemaError(f"{path}: header must be subject,class,start_index,end_index")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                out.append((row[0], row[1], int(row[2]), int(row[3])))
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return out


def load_dir(directory) -> list[SensorSequence]:
    """Load every ``*.csv`` in a directory, pairing ``X.csv`` with ``X.annotations.csv``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    out = []
    for p in sorted(directory.glob("*.csv")):
        if p.name.endswith(".annotations.csv"):
            continue
        notes = p.with_name(p.stem + ".annotations.csv")
        out.extend(load_csv(p, notes if notes.exists() else None))
    return out
