"""Region and lesion-level segmentation metrics and the paired Wilcoxon test.

Conventions for degenerate inputs:

* ``dsc`` of two empty masks is 1.
* ``hausdorff95`` is 0 when both masks are empty and the image diagonal
  when exactly one is (reported with ``h95_sentinel=True``).
* ``lesion_recall`` is 1 when the ground truth has no lesions; lesion
  precision is 1 when the prediction has none.

Lesions are 8-connected components; a lesion counts as detected when it
shares at least one pixel with the other mask's foreground.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage, stats

from .datasets import reveal_mask
from .errors import DegenerateSampleError, ShapeError

METRIC_NAMES = ("dsc", "h95", "lavd", "recall", "f1")
_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour background pixel (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def _nearest_distances(from_mask, to_mask):
    """Euclidean distance from each ``from_mask`` pixel to the nearest ``to_mask`` pixel."""
    _, (iy, ix) = ndimage.distance_transform_edt(~to_mask, return_indices=True)
    ys, xs = np.nonzero(from_mask)
    dy = (ys - iy[ys, xs]).astype(np.float64)
    dx = (xs - ix[ys, xs]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def hausdorff95(pred, gt) -> float:
    """95th percentile of pooled symmetric boundary-to-boundary distances."""
    p, g = _pair(pred, gt)
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return float(math.hypot(*p.shape))
    bp, bg = boundary(p), boundary(g)
    d = np.concatenate([_nearest_distances(bp, bg), _nearest_distances(bg, bp)])
    return _percentile(d, 95)


def _percentile(values, q):
    """Linear-interpolation percentile written as ``a + (b - a) * t``.

    Same definition as numpy's ``linear`` method, without its branch on
    ``t``, so results are reproducible to the last bit by a plain loop.
    """
    d = np.sort(np.asarray(values, dtype=np.float64))
    pos = q / 100 * (len(d) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(d) - 1)
    return float(d[lo] + (d[hi] - d[lo]) * (pos - lo))


def lavd(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return abs(math.log(int(p.sum()) + 1) - math.log(int(g.sum()) + 1))


class LesionSet(list):
    """Connected components, each a ``(k, 2)`` array of (row, col) coordinates."""


def _label(mask, connectivity=8):
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    return ndimage.label(np.asarray(mask).astype(bool), structure=structure)


def connected_components(mask, connectivity: int = 8) -> LesionSet:
    labels, n = _label(mask, connectivity)
    out = LesionSet()
    for k in range(1, n + 1):
        out.append(np.argwhere(labels == k))
    return out


def _hit_fraction(components_of, other):
    """(number of components of ``components_of`` touching ``other``, total components)."""
    labels, n = _label(components_of)
    if n == 0:
        return 0, 0
    touched = np.unique(labels[other & (labels > 0)])
    return len(touched), n


def lesion_counts(pred, gt):
    """``(gt lesions, detected gt lesions, pred lesions, pred lesions touching gt)``."""
    p, g = _pair(pred, gt)
    hit_g, n_g = _hit_fraction(g, p)
    hit_p, n_p = _hit_fraction(p, g)
    return n_g, hit_g, n_p, hit_p


def lesion_recall(pred, gt) -> float:
    n_g, hit_g, _, _ = lesion_counts(pred, gt)
    return 1.0 if n_g == 0 else hit_g / n_g


def lesion_f1(pred, gt) -> float:
    n_g, hit_g, n_p, hit_p = lesion_counts(pred, gt)
    recall = 1.0 if n_g == 0 else hit_g / n_g
    precision = 1.0 if n_p == 0 else hit_p / n_p
    if recall + precision == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    dsc: float
    h95: float
    lavd: float
    recall: float
    f1: float
    n_gt: int
    n_pred: int
    n_matched: int
    h95_sentinel: bool = False
    empty_gt: bool = False
    empty_pred: bool = False
    sample_id: str = ""

    def row(self):
        return {"sample_id": self.sample_id, **{k: getattr(self, k) for k in METRIC_NAMES}}


def evaluate(pred, gt, sample_id="") -> MetricReport:
    p, g = _pair(pred, gt)
    n_g, hit_g, n_p, hit_p = lesion_counts(p, g)
    p_any, g_any = bool(p.any()), bool(g.any())
    return MetricReport(
        dsc=dsc(p, g),
        h95=hausdorff95(p, g),
        lavd=lavd(p, g),
        recall=1.0 if n_g == 0 else hit_g / n_g,
        f1=lesion_f1(p, g),
        n_gt=n_g,
        n_pred=n_p,
        n_matched=hit_g,
        h95_sentinel=p_any != g_any,
        empty_gt=not g_any,
        empty_pred=not p_any,
        sample_id=sample_id,
    )


def evaluate_samples(pred_masks, samples) -> list[MetricReport]:
    """Score predictions against sample ground truth (the only quarantine-lifting reader)."""
    reports = []
    for pred, sample in zip(pred_masks, samples, strict=True):
        gt = reveal_mask(sample)
        if gt is None:
            raise ShapeError(f"sample {sample.id!r} has no ground truth")
        reports.append(evaluate(pred, gt, sample.id))
    return reports


def summarize(reports) -> dict:
    """``{metric: (mean, std)}`` with population std, as in a results table."""
    out = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(values.mean()), float(values.std())) if len(values) else (math.nan, math.nan)
    return out


def write_metrics_csv(reports, path):
    summary = summarize(reports)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("sample_id",) + METRIC_NAMES)
        for r in reports:
            w.writerow([r.sample_id] + [repr(float(getattr(r, k))) for k in METRIC_NAMES])
        w.writerow(["mean"] + [repr(summary[k][0]) for k in METRIC_NAMES])
        w.writerow(["std"] + [repr(summary[k][1]) for k in METRIC_NAMES])


def read_metrics_csv(path) -> list[dict]:
    """Per-sample rows only; summary rows are dropped."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {"sample_id": r["sample_id"], **{k: float(r[k]) for k in METRIC_NAMES}}
        for r in rows
        if r["sample_id"] not in ("mean", "std")
    ]


def evaluate_manifest(manifest, out_csv) -> list[MetricReport]:
    """Score mask pairs listed as ``id=.. pred=.. gt=..`` lines (paths relative to the manifest)."""
    manifest = Path(manifest)
    reports = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = dict(kv.split("=", 1) for kv in line.split())
        pred = np.array(Image.open(manifest.parent / rec["pred"])) > 0
        gt = np.array(Image.open(manifest.parent / rec["gt"])) > 0
        reports.append(evaluate(pred, gt, rec["id"]))
    write_metrics_csv(reports, out_csv)
    return reports


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test

EXACT_MAX_N = 12
MIN_N = 5


class WilcoxonResult(NamedTuple):
    statistic: float  # sum of ranks of positive differences
    pvalue: float
    n: int
    exact: bool


def _exact_null(ranks):
    """Distribution of the positive-rank sum over all 2^n sign patterns.

    Ranks may be half-integers under ties, so sums are tracked doubled.
    """
    counts = {0: 1}
    for r in (int(round(2 * r)) for r in ranks):
        nxt = defaultdict(int)
        for s, c in counts.items():
            nxt[s] += c
            nxt[s + r] += c
        counts = nxt
    return counts


def wilcoxon_signed_rank(a, b, alternative="two-sided") -> WilcoxonResult:
    """Paired signed-rank test of ``a - b``; zero differences are discarded.

    Exact enumeration of the sign-flip null for n <= 12, otherwise a normal
    approximation with tie correction. ``alternative="greater"`` tests
    whether ``a`` tends to exceed ``b``.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1D arrays of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateSampleError("all paired differences are zero")
    if n < MIN_N:
        raise DegenerateSampleError(f"need at least {MIN_N} non-zero differences, got {n}")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_MAX_N:
        null = _exact_null(ranks)
        total = float(2**n)
        w2 = int(round(2 * w_plus))
        p_ge = sum(c for s, c in null.items() if s >= w2) / total
        p_le = sum(c for s, c in null.items() if s <= w2) / total
        exact = True
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p_ge, p_le = float(stats.norm.sf(z)), float(stats.norm.cdf(z))
        exact = False

    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2 * min(p_ge, p_le))
    return WilcoxonResult(w_plus, float(p), n, exact)

