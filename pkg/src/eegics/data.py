"""EEG datasets: container, EEGD binary format, CSV import, LOSO splits and
a synthetic generator with planted discriminative channels."""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# 30-electrode montage of the simulated-driving recordings
MONTAGE_30 = (
    "FP1", "FP2", "F7", "F3", "FZ", "F4", "F8", "FT7", "FC3", "FCZ",
    "FC4", "FT8", "T3", "C3", "CZ", "C4", "T4", "TP7", "CP3", "CPZ",
    "CP4", "TP8", "T5", "P3", "PZ", "P4", "T6", "O1", "OZ", "O2",
)


class DatasetError(ValueError):
    """Invalid dataset contents or a malformed file."""


def default_channel_names(n):
    if n == len(MONTAGE_30):
        return list(MONTAGE_30)
    return [f"ch{i:02d}" for i in range(n)]


@dataclass(eq=False)
class EegDataset:
    """Labelled samples of shape channels x timepoints.

    Labels are 0 (alert) and 1 (drowsy).  ``planted`` lists ground-truth
    discriminative channels for synthetic data and is empty otherwise.
    """

    X: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    channel_names: list
    sampling_rate: int = 128
    planted: tuple = ()

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.channel_names = list(self.channel_names)
        self.planted = tuple(int(p) for p in self.planted)
        self.validate()

    def validate(self):
        if self.X.ndim != 3:
            raise DatasetError(f"samples must form an (n, channels, time) array, got {self.X.shape}")
        n, c, _ = self.X.shape
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise DatasetError("labels and subjects need one entry per sample")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise DatasetError("labels must be 0 or 1")
        if np.any(self.subjects < 0) or np.any(self.subjects > 0xFFFF):
            raise DatasetError("subject ids must fit in 0..65535")
        if len(self.channel_names) != c:
            raise DatasetError(f"{len(self.channel_names)} channel names for {c} channels")
        if any("\n" in name for name in self.channel_names):
            raise DatasetError("channel names cannot contain newlines")
        if any(not 0 <= p < c for p in self.planted):
            raise DatasetError("planted channel index out of range")

    def __len__(self):
        return len(self.X)

    @property
    def n_channels(self):
        return self.X.shape[1]

    @property
    def n_timepoints(self):
        return self.X.shape[2]

    def subject_ids(self):
        return np.unique(self.subjects)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return EegDataset(self.X[idx], self.labels[idx], self.subjects[idx],
                          self.channel_names, self.sampling_rate, self.planted)

    def equals(self, other):
        return (np.array_equal(self.X, other.X) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.subjects, other.subjects)
                and self.channel_names == other.channel_names
                and self.sampling_rate == other.sampling_rate
                and self.planted == other.planted)


@dataclass
class LosoSplit:
    subject: int
    train: np.ndarray
    test: np.ndarray


def loso_splits(dataset):
    """One split per subject (ascending id), holding that subject out."""
    subjects = dataset.subject_ids()
    if len(subjects) < 2:
        raise DatasetError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    all_idx = np.arange(len(dataset))
    return [LosoSplit(int(s), all_idx[dataset.subjects != s], all_idx[dataset.subjects == s])
            for s in subjects]


def restrict_channels(dataset, channels):
    """Keep only the listed channel rows (strictly ascending indices)."""
    ch = np.asarray(channels, dtype=np.int64)
    if ch.ndim != 1 or len(ch) == 0:
        raise DatasetError("channel list must be a non-empty 1-D sequence")
    if np.any(ch < 0) or np.any(ch >= dataset.n_channels):
        raise DatasetError(f"channel index out of range [0, {dataset.n_channels})")
    if np.any(np.diff(ch) <= 0):
        raise DatasetError("channel indices must be strictly ascending without duplicates")
    pos = {int(c): i for i, c in enumerate(ch)}
    planted = tuple(pos[p] for p in dataset.planted if p in pos)
    return EegDataset(dataset.X[:, ch, :], dataset.labels, dataset.subjects,
                      [dataset.channel_names[c] for c in ch], dataset.sampling_rate, planted)


def accuracy(predictions, labels):
    """Fraction of predictions equal to the labels."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return int(np.count_nonzero(p == y)) / p.size


# synthetic generator


@dataclass(frozen=True)
class SynthParams:
    n_subjects: int = 8
    per_subject: int = 200
    channels: int = 30
    timepoints: int = 384
    planted: int = 10
    amplitude: float = 1.0
    noise: float = 1.0
    jitter: float = 0.2
    freq_hz: float = 5.0
    sampling_rate: int = 128
    seed: int = 0

    def validate(self):
        if self.n_subjects < 1 or self.per_subject < 2:
            raise DatasetError("need >= 1 subject with >= 2 samples each")
        if self.channels < 1 or self.timepoints < 1:
            raise DatasetError("channels and timepoints must be positive")
        if not 0 <= self.planted <= self.channels:
            raise DatasetError(f"planted count {self.planted} outside [0, {self.channels}]")
        if self.amplitude < 0 or self.noise <= 0:
            raise DatasetError("amplitude must be >= 0 and noise > 0")
        if not 0 <= self.jitter < 1:
            raise DatasetError("gain jitter must lie in [0, 1)")


def synth_generate(params):
    """Gaussian noise for class 0; class 1 adds a sinusoid on planted channels only.

    ``amplitude = 0`` is accepted as the null configuration in which both
    classes share one distribution.
    """
    params.validate()
    p = params
    rng = np.random.default_rng(p.seed)
    planted = np.sort(rng.choice(p.channels, size=p.planted, replace=False))
    t = np.arange(p.timepoints) / p.sampling_rate
    n = p.n_subjects * p.per_subject
    X = np.empty((n, p.channels, p.timepoints), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    subjects = np.repeat(np.arange(p.n_subjects), p.per_subject)
    k = 0
    for _ in range(p.n_subjects):
        gain = rng.uniform(1 - p.jitter, 1 + p.jitter, size=p.channels)
        lab = rng.permutation(np.arange(p.per_subject) % 2)
        for y in lab:
            x = rng.normal(0.0, p.noise, size=(p.channels, p.timepoints))
            phase = rng.uniform(0, 2 * np.pi)
            if y == 1 and p.planted:
                x[planted] += p.amplitude * np.sin(2 * np.pi * p.freq_hz * t + phase)
            X[k] = x * gain[:, None]
            labels[k] = y
            k += 1
    return EegDataset(X, labels, subjects, default_channel_names(p.channels),
                      p.sampling_rate, tuple(int(i) for i in planted))


# EEGD binary format

MAGIC = b"EEGD"
VERSION = 1


def _record_dtype(c, t):
    return np.dtype([("label", "u1"), ("subject", "<u2"), ("x", "<f4", (c, t))])


def dataset_to_bytes(ds):
    n, c, t = ds.X.shape
    if max(c, t, ds.sampling_rate, len(ds.planted)) > 0xFFFF:
        raise DatasetError("dataset extents exceed the u16 header fields")
    names = "\n".join(ds.channel_names).encode("utf-8")
    if len(names) > 0xFFFF:
        raise DatasetError("channel name table exceeds 65535 bytes")
    head = [MAGIC, struct.pack("<HIHHHH", VERSION, n, c, t, ds.sampling_rate, len(ds.planted)),
            struct.pack(f"<{len(ds.planted)}H", *ds.planted),
            struct.pack("<H", len(names)), names]
    rec = np.empty(n, dtype=_record_dtype(c, t))
    rec["label"] = ds.labels
    rec["subject"] = ds.subjects
    rec["x"] = ds.X
    return b"".join(head) + rec.tobytes()


def dataset_from_bytes(buf):
    def need(off, size, what):
        if off + size > len(buf):
            raise DatasetError(f"truncated {what} at offset {off}: need {size} bytes, "
                               f"{len(buf) - off} available")

    need(0, 4, "magic")
    if buf[:4] != MAGIC:
        raise DatasetError(f"bad magic {bytes(buf[:4])!r} at offset 0, expected 'EEGD'")
    need(4, 14, "header")
    version, n, c, t, rate, n_planted = struct.unpack_from("<HIHHHH", buf, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported EEGD version {version} at offset 4, expected {VERSION}")
    off = 18
    need(off, 2 * n_planted, "planted index table")
    planted = struct.unpack_from(f"<{n_planted}H", buf, off)
    off += 2 * n_planted
    need(off, 2, "name table length")
    (name_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    need(off, name_len, "channel name table")
    try:
        text = bytes(buf[off:off + name_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetError(f"channel names at offset {off} are not UTF-8: {exc}") from None
    names = text.split("\n") if c else []
    off += name_len
    dt = _record_dtype(c, t)
    payload = len(buf) - off
    if payload != n * dt.itemsize:
        raise DatasetError(
            f"header declares {n} samples ({n * dt.itemsize} bytes) but payload at offset "
            f"{off} holds {payload} bytes")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    return EegDataset(rec["x"].astype(np.float32), rec["label"], rec["subject"], names,
                      rate, planted)


def write_dataset(ds, path):
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes())


def import_csv(directory, manifest="manifest.csv", sampling_rate=128):
    """Assemble a dataset from per-sample CSVs listed in a manifest.

    Each sample file has a header row of channel names followed by one row
    per timepoint.  The manifest has columns ``file,label,subject``.
    """
    directory = Path(directory)
    mpath = directory / manifest
    if not mpath.exists():
        raise DatasetError(f"manifest {mpath} not found")
    with open(mpath, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"manifest {mpath} lists no samples")
    missing = {"file", "label", "subject"} - set(rows[0])
    if missing:
        raise DatasetError(f"manifest {mpath} lacks columns {sorted(missing)}")
    names = None
    samples, labels, subjects = [], [], []
    for row in rows:
        fpath = directory / row["file"]
        if not fpath.exists():
            raise DatasetError(f"manifest references missing file {fpath}")
        with open(fpath, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            body = [r for r in reader if r]
        if names is None:
            names = header
        elif header != names:
            raise DatasetError(f"{fpath}: channel header {header} differs from {names}")
        if any(len(r) != len(names) for r in body):
            raise DatasetError(f"{fpath}: rows must have {len(names)} columns")
        try:
            x = np.array(body, dtype=np.float64).T
        except ValueError:
            raise DatasetError(f"{fpath}: non-numeric value") from None
        if samples and x.shape != samples[0].shape:
            raise DatasetError(f"{fpath}: shape {x.shape} differs from {samples[0].shape}")
        samples.append(x)
        try:
            labels.append(int(row["label"]))
            subjects.append(int(row["subject"]))
        except ValueError:
            raise DatasetError(f"manifest row for {row['file']}: label/subject not integers") from None
    return EegDataset(np.stack(samples), labels, subjects, names, sampling_rate)
