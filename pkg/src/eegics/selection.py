"""High-confidence filtering and channel voting over normalized CAMs."""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cam import cam_batch, interpolate_maps, normalize_maps
from .nn import softmax


class SelectionError(RuntimeError):
    pass


class NoConfidentSamples(SelectionError):
    def __init__(self, tau):
        super().__init__(f"no high-confidence samples at threshold tau={tau}")
        self.tau = tau


@dataclass(frozen=True)
class ConfidenceFilterConfig:
    threshold: float = 0.90

    def __post_init__(self):
        if not 0.5 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0.5, 1], got {self.threshold}")


@dataclass
class ChannelRanking:
    scores: np.ndarray
    order: np.ndarray
    n_voters: int


def high_confidence_indices(probs, labels, tau):
    """Indices predicted correctly with probability >= tau, in dataset order."""
    ConfidenceFilterConfig(tau)
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(labels)), labels]
    return np.flatnonzero((pred == labels) & (conf >= tau))


def filter_high_confidence(model, dataset, tau=0.90):
    return high_confidence_indices(model.predict_proba(dataset.X), dataset.labels, tau)


def channel_scores(h):
    """Per-channel sum of a (normalized) heatmap over time."""
    m = h.map if hasattr(h, "map") else np.asarray(h)
    return np.asarray(m, dtype=np.float64).sum(axis=-1)


def rank_channels(totals):
    """Channel indices by descending total, ties by ascending index."""
    totals = np.asarray(totals, dtype=np.float64)
    return np.lexsort((np.arange(len(totals)), -totals))


def vote_from_scores(score_rows, tau=None):
    """Rank channels from per-sample score rows, summed in row order."""
    rows = np.asarray(score_rows, dtype=np.float64)
    if len(rows) == 0:
        raise NoConfidentSamples(tau)
    totals = np.zeros(rows.shape[1], dtype=np.float64)
    for r in rows:
        totals += r
    return ChannelRanking(totals, rank_channels(totals), len(rows))


def vote_channels(heatmaps, tau=None):
    """Sum per-channel scores over heatmaps (in list order) and rank."""
    maps = [h.map if hasattr(h, "map") else np.asarray(h) for h in heatmaps]
    if not maps:
        raise NoConfidentSamples(tau)
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"heatmap shape {m.shape} differs from {shape}")
    return vote_from_scores([channel_scores(m) for m in maps], tau)


def select_top_n(ranking, n):
    """First n ranked channels, returned in ascending channel order."""
    c = len(ranking.order)
    if not 1 <= n <= c:
        raise ValueError(f"N must lie in [1, {c}], got {n}")
    return sorted(int(i) for i in ranking.order[:n])


@dataclass
class Selection:
    selected: list
    channel_names: list
    totals: list
    tau: float
    n: int
    n_voters: int
    teacher_checksum: str
    order: list = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**d)


def normalized_cams(model, X, classes, timepoints, batch_size=100):
    """Interpolated, per-sample normalized CAMs, computed batch by batch."""
    out = []
    for s in range(0, len(X), batch_size):
        raw = cam_batch(model, X[s:s + batch_size], classes[s:s + batch_size], batch_size)
        out.append(normalize_maps(interpolate_maps(raw, timepoints)))
    return np.concatenate(out) if out else np.empty((0, X.shape[1], timepoints))


def rank_from_training(model, dataset, tau=0.90, tau_floor=None):
    """Confidence filter, CAM, interpolation, normalization and vote.

    Returns ``(ranking, effective_tau)``.  With ``tau_floor`` set, an empty
    high-confidence set at ``tau`` retries once at ``tau_floor``.  Raw CAMs
    for the label class and the logits share one forward pass per batch.
    """
    raw, logits = cam_batch(model, dataset.X, dataset.labels, return_logits=True)
    probs = softmax(logits, axis=1)
    keep = high_confidence_indices(probs, dataset.labels, tau)
    used_tau = tau
    if len(keep) == 0 and tau_floor is not None and tau_floor < tau:
        keep = high_confidence_indices(probs, dataset.labels, tau_floor)
        used_tau = tau_floor
    if len(keep) == 0:
        raise NoConfidentSamples(tau if tau_floor is None else tau_floor)
    t = dataset.n_timepoints
    scores = np.concatenate([
        channel_scores(normalize_maps(interpolate_maps(raw[keep[s:s + 200]], t)))
        for s in range(0, len(keep), 200)])
    return vote_from_scores(scores, used_tau), used_tau


def select_channels(model, dataset, tau=0.90, n=10, tau_floor=None):
    ranking, used_tau = rank_from_training(model, dataset, tau, tau_floor)
    chosen = select_top_n(ranking, n)
    return Selection(
        selected=chosen,
        channel_names=[dataset.channel_names[i] for i in chosen],
        totals=[float(v) for v in ranking.scores],
        tau=used_tau, n=n, n_voters=ranking.n_voters,
        teacher_checksum=model.checksum(),
        order=[int(i) for i in ranking.order])
