"""Eye-fixation evaluation measures.

Location-based scores (the three AUC variants) use the rank / Mann-Whitney
form, so tied saliency values contribute one half and a constant map scores
exactly 0.5.  Distribution-based scores (CC, SIM, EMD) treat both maps as
non-negative densities; NSS standardises the prediction and averages it over
fixated pixels.  No border handling is applied anywhere.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, ShapeError
from .tensor import make_rng

log = logging.getLogger(__name__)

METRICS = ("AUC_Judd", "SIM", "EMD", "AUC_Borji", "sAUC", "CC", "NSS")
_ALIASES = {m.lower(): m for m in METRICS}
_ALIASES.update({"auc-judd": "AUC_Judd", "judd": "AUC_Judd", "auc-borji": "AUC_Borji", "borji": "AUC_Borji",
                 "s-auc": "sAUC", "shuffled_auc": "sAUC", "auc_shuffled": "sAUC"})


def metric_name(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise InputError(f"unknown metric {name!r}; choose from {', '.join(METRICS)}") from None


def _map(x, what="map") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 and a.size == np.prod(a.shape[-2:]) else a
    if a.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{what} has non-finite values")
    return a


def _fixmap(q) -> np.ndarray:
    a = _map(q, "fixation map")
    if not np.all((a == 0) | (a == 1)):
        raise InputError("fixation map must be binary")
    return a.astype(bool)


def _same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# value / distribution based


def nss(s, q) -> float:
    s, q = _map(s, "saliency map"), _fixmap(q)
    _same(s, q)
    if not q.any():
        raise InputError("NSS needs at least one fixation")
    sd = s.std()
    if sd == 0:
        warnings.warn("constant saliency map: NSS defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(((s - s.mean()) / sd)[q].mean())


def cc(s, g) -> float:
    s, g = _map(s), _map(g)
    _same(s, g)
    ds, dg = s - s.mean(), g - g.mean()
    ss, sg = np.sqrt(np.mean(ds * ds)), np.sqrt(np.mean(dg * dg))
    if ss == 0 or sg == 0:
        raise InputError("CC is undefined for a constant map")
    return float(np.mean(ds * dg) / (ss * sg))


def _density(m, what) -> np.ndarray:
    if m.min() < 0:
        raise InputError(f"{what} must be non-negative")
    total = m.sum()
    if not total > 0:
        raise InputError(f"{what} has zero mass")
    return m / total


def sim(s, g) -> float:
    s, g = _map(s), _map(g)
    _same(s, g)
    return float(np.minimum(_density(s, "saliency map"), _density(g, "ground-truth map")).sum())


def _area_matrix(n: int, m: int) -> np.ndarray:
    """``(m, n)`` fractional-overlap matrix averaging n source cells into m bins."""
    edges_src = np.arange(n + 1, dtype=np.float64)
    edges_dst = np.linspace(0.0, n, m + 1)
    lo = np.maximum(edges_dst[:-1, None], edges_src[None, :-1])
    hi = np.minimum(edges_dst[1:, None], edges_src[None, 1:])
    return np.clip(hi - lo, 0.0, None) * (m / n)


def area_downsample(m: np.ndarray, dims) -> np.ndarray:
    h, w = m.shape
    th, tw = dims
    return _area_matrix(h, th) @ m @ _area_matrix(w, tw).T


def _transport_solver():
    for backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    from ot.lp import emd2

    return emd2


def emd(s, g, work_res=(32, 32)) -> float:
    """Exact optimal-transport cost between the normalised maps.

    Both maps are area-averaged to ``work_res`` (clamped to the map size, or
    the native size when ``None``), renormalised, and moved under Euclidean
    ground distance measured in working-grid pixels.
    """
    s, g = _map(s), _map(g)
    _same(s, g)
    h, w = s.shape
    dims = (h, w) if work_res is None else (min(h, int(work_res[0])), min(w, int(work_res[1])))
    a = _density(area_downsample(_density(s, "saliency map"), dims), "saliency map")
    b = _density(area_downsample(_density(g, "ground-truth map"), dims), "ground-truth map")
    if np.array_equal(a, b):
        return 0.0
    yy, xx = np.mgrid[: dims[0], : dims[1]]
    coords = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    a, b = a.ravel(), b.ravel()
    ia, ib = a > 0, b > 0
    pa, pb = a[ia] / a[ia].sum(), b[ib] / b[ib].sum()
    ca, cb = coords[ia], coords[ib]
    cost = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))
    return float(_transport_solver()(pa, pb, cost, numItermax=10_000_000))


# ---------------------------------------------------------------------------
# location based


def auc_scores(pos, neg) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) via average ranks."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise InputError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def roc_curve(s, q):
    """``(fpr, tpr)`` at every distinct saliency value, from (0, 0) to (1, 1).

    The trapezoidal area under this curve equals :func:`auc_judd`.
    """
    s, q = _map(s), _fixmap(q)
    _same(s, q)
    pos, neg = s[q], s[~q]
    thresholds = np.unique(s)[::-1]
    tpr = np.array([0.0] + [(pos >= t).mean() for t in thresholds])
    fpr = np.array([0.0] + [(neg >= t).mean() for t in thresholds])
    return fpr, tpr


def auc_judd(s, q) -> float:
    s, q = _map(s, "saliency map"), _fixmap(q)
    _same(s, q)
    return auc_scores(s[q], s[~q])


def _split_mean(pos, pool, splits, rng):
    n = pos.size
    vals = [auc_scores(pos, pool[rng.integers(0, pool.size, size=n)]) for _ in range(splits)]
    return float(np.mean(vals))


def auc_borji(s, q, splits: int = 100, seed: int = 0) -> float:
    """Mean AUC over ``splits`` uniform negative sets of size N (with replacement)."""
    s, q = _map(s, "saliency map"), _fixmap(q)
    _same(s, q)
    if splits < 1:
        raise ValueError("splits must be >= 1")
    pos, pool = s[q], s[~q]
    if pos.size == 0 or pool.size == 0:
        raise InputError("AUC-Borji needs fixated and non-fixated pixels")
    return _split_mean(pos, pool, splits, make_rng(seed, 3))


def pooled_fixations(q: np.ndarray, others) -> np.ndarray:
    """Flat pixel indices of other maps' fixations on ``q``'s grid, minus ``q``'s own."""
    q = _fixmap(q)
    h, w = q.shape
    idx = []
    for o in others:
        o = _fixmap(o)
        rows, cols = np.nonzero(o)
        if o.shape != (h, w):
            rows = np.minimum(np.floor((rows + 0.5) * h / o.shape[0]).astype(int), h - 1)
            cols = np.minimum(np.floor((cols + 0.5) * w / o.shape[1]).astype(int), w - 1)
        idx.append(rows * w + cols)
    flat = np.concatenate(idx) if idx else np.zeros(0, dtype=int)
    return flat[~q.ravel()[flat]]


def shuffled_auc(s, q, other_fixations, splits: int = 100, seed: int = 0) -> float:
    """AUC with negatives drawn from other images' fixation locations."""
    s, q = _map(s, "saliency map"), _fixmap(q)
    _same(s, q)
    if splits < 1:
        raise ValueError("splits must be >= 1")
    pool_idx = pooled_fixations(q, other_fixations)
    if pool_idx.size == 0 or not q.any():
        raise InputError("shuffled AUC needs fixations and a non-empty pool of other-image fixations")
    return _split_mean(s[q], s.ravel()[pool_idx], splits, make_rng(seed, 4))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EvalOptions:
    metrics: tuple = METRICS
    emd_res: tuple | None = (32, 32)
    borji_splits: int = 100
    sauc_splits: int = 100
    seed: int = 0


def evaluate_pair(s, q, g, options: EvalOptions | None = None, other_fixations=None) -> dict[str, float]:
    """Every requested metric for one image; sAUC is NaN without other fixations."""
    o = options or EvalOptions()
    out = {}
    for name in o.metrics:
        if name == "AUC_Judd":
            out[name] = auc_judd(s, q)
        elif name == "SIM":
            out[name] = sim(s, g)
        elif name == "EMD":
            out[name] = emd(s, g, o.emd_res)
        elif name == "AUC_Borji":
            out[name] = auc_borji(s, q, o.borji_splits, o.seed)
        elif name == "sAUC":
            if other_fixations:
                try:
                    out[name] = shuffled_auc(s, q, other_fixations, o.sauc_splits, o.seed)
                except InputError:
                    out[name] = math.nan
            else:
                out[name] = math.nan
        elif name == "CC":
            out[name] = cc(s, g)
        elif name == "NSS":
            out[name] = nss(s, q)
        else:
            raise InputError(f"unknown metric {name!r}")
    return out


def aggregate(reports) -> dict[str, float]:
    """Unweighted mean per metric (NaN entries skipped)."""
    reports = list(reports)
    if not reports:
        return {}
    out = {}
    for name in reports[0]:
        vals = np.array([r[name] for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[name] = float(vals.mean()) if vals.size else math.nan
    return out


def find_prediction(pred_dir: Path, image_id: str) -> Path | None:
    for name in (f"{image_id}_sal.png", f"{image_id}_sal.pgm", f"{image_id}.png", f"{image_id}.pgm"):
        p = pred_dir / name
        if p.exists():
            return p
    return None


@dataclass
class DatasetEvaluation:
    aggregate: dict
    per_image: list  # [(image_id, report)]
    missing: list


def evaluate_dataset(pred_dir, manifest, options: EvalOptions | None = None, split: str | None = None,
                     csv_path=None) -> DatasetEvaluation:
    """Score every manifest image that has a prediction in ``pred_dir``.

    Ground truth is taken at the source resolution; predictions of another
    size are resized bilinearly before scoring.  Images without a prediction
    are reported and skipped.
    """
    from . import data

    o = options or EvalOptions()
    pred_dir = Path(pred_dir)
    records = manifest.records if split is None else manifest.split(split)
    truth = [data.load_original_gt(r) for r in records]
    per_image, missing = [], []
    for i, rec in enumerate(records):
        path = find_prediction(pred_dir, rec.image_id)
        if path is None:
            log.warning("no prediction for %s in %s", rec.image_id, pred_dir)
            warnings.warn(f"missing prediction for {rec.image_id}", RuntimeWarning, stacklevel=2)
            missing.append(rec.image_id)
            continue
        fix, g = truth[i]
        s = data.resize_map(data.read_saliency(path), fix.shape)
        others = [truth[j][0] for j in range(len(records)) if j != i]
        per_image.append((rec.image_id, evaluate_pair(s, fix, g, o, others)))
    agg = aggregate(r for _, r in per_image)
    if csv_path is not None:
        write_metrics_csv(csv_path, per_image, agg, o.metrics)
    return DatasetEvaluation(agg, per_image, missing)


def _fmt6(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6g}"


def write_metrics_csv(path, per_image, agg, columns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", *columns])
        for image_id, rep in per_image:
            wr.writerow([image_id, *(_fmt6(rep[c]) for c in columns)])
        wr.writerow(["MEAN", *(_fmt6(agg.get(c, math.nan)) for c in columns)])
