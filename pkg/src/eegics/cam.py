"""Class activation maps for GAP-headed networks.

For class c the raw map is ``M_c(ch, t) = sum_k w[c, k] * A_k(ch, t)`` where
``A_k`` are the feature maps entering global average pooling and ``w`` is
the dense head.  Because the head is linear after GAP, ``mean(M_c)`` equals
``logit_c - b_c``.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .model import LayerKind


class CamError(ValueError):
    pass


@dataclass(frozen=True)
class CamHeatmap:
    class_id: int
    map: np.ndarray  # (channels, timepoints)
    normalized: bool = False

    @property
    def shape(self):
        return self.map.shape


def _check_head(model):
    layers = model.spec.layers
    if layers[-2].kind != LayerKind.GLOBAL_AVG_POOL or layers[-1].kind != LayerKind.DENSE:
        raise CamError("CAM requires a GlobalAvgPool -> Dense head")


def cam_batch(model, X, classes, batch_size=100, return_logits=False):
    """Raw maps for every sample in ``X``; shape (n, channels, reduced_time).

    With ``return_logits`` the logits of the same forward passes come back too.
    """
    _check_head(model)
    X = np.asarray(X)
    classes = np.asarray(classes, dtype=np.int64)
    if np.any((classes < 0) | (classes >= model.spec.n_classes)):
        raise CamError(f"class id out of range [0, {model.spec.n_classes})")
    w, _ = model.dense_head()
    w = w.astype(np.float64)
    out, logits = [], []
    for s in range(0, len(X), batch_size):
        z, cache = model.forward(X[s:s + batch_size])
        A = cache.feature_maps.astype(np.float64)  # (b, C, T', K)
        wc = w[classes[s:s + batch_size]]  # (b, K)
        out.append(np.einsum("bctk,bk->bct", A, wc))
        logits.append(z)
    if not out:
        maps = np.empty((0,) + X.shape[1:2] + (0,))
        return (maps, np.empty((0, 2))) if return_logits else maps
    maps = np.concatenate(out)
    return (maps, np.concatenate(logits)) if return_logits else maps


def compute_cam(model, sample, class_id):
    """Raw CAM of one (channels, timepoints) sample at reduced time resolution."""
    if not 0 <= class_id < model.spec.n_classes:
        raise CamError(f"class id {class_id} out of range [0, {model.spec.n_classes})")
    m = cam_batch(model, np.asarray(sample)[None], [class_id])[0]
    return CamHeatmap(int(class_id), m)


def interpolate_maps(maps, timepoints):
    """Linear interpolation along the last axis with both endpoints anchored."""
    maps = np.asarray(maps, dtype=np.float64)
    cur = maps.shape[-1]
    if timepoints < cur:
        raise CamError(f"cannot interpolate {cur} timepoints down to {timepoints}")
    if timepoints == cur:
        return maps.copy()
    if cur == 1:
        return np.repeat(maps, timepoints, axis=-1)
    pos = np.arange(timepoints) * ((cur - 1) / (timepoints - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), cur - 2)
    frac = pos - lo
    return maps[..., lo] * (1.0 - frac) + maps[..., lo + 1] * frac


def interpolate_heatmap(h, timepoints):
    return replace(h, map=interpolate_maps(h.map, timepoints))


def normalize_maps(maps):
    """Min-max rescale each map (last two axes) to [0, 1]; constant maps become 0."""
    maps = np.asarray(maps, dtype=np.float64)
    lo = maps.min(axis=(-2, -1), keepdims=True)
    span = maps.max(axis=(-2, -1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (maps - lo) / safe, 0.0)


def normalize_heatmap(h):
    return replace(h, map=normalize_maps(h.map), normalized=True)


def cam_filename(sample_index, class_id):
    return f"cam_{sample_index}_c{class_id}.csv"


def export_heatmap_csv(h, path, channel_names=None):
    """One row per channel; the header carries timepoint indices."""
    names = channel_names or [str(i) for i in range(h.map.shape[0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["channel"] + list(range(h.map.shape[1])))
        for name, row in zip(names, h.map):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_heatmap_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def export_cams(model, dataset, indices, out_dir, normalize=True):
    """Write full-resolution CAMs for the ground-truth class of each listed sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = np.asarray(indices, dtype=np.int64)
    if np.any((idx < 0) | (idx >= len(dataset))):
        raise CamError(f"sample index out of range [0, {len(dataset)})")
    classes = dataset.labels[idx]
    maps = interpolate_maps(cam_batch(model, dataset.X[idx], classes), dataset.n_timepoints)
    if normalize:
        maps = normalize_maps(maps)
    paths = []
    for i, c, m in zip(idx, classes, maps):
        p = out_dir / cam_filename(int(i), int(c))
        export_heatmap_csv(CamHeatmap(int(c), m, normalize), p, dataset.channel_names)
        paths.append(p)
    return paths
