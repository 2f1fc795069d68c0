"""One-dimensional calibrators: histogram binning, isotonic regression (PAVA), step functions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import LengthMismatch, NonpositiveWeight


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous-from-the-left step function.

    Cells are ``(-inf, b1], (b1, b2], ..., (b_{m-1}, inf)``; ``levels[j]`` is the
    value on cell ``j``.
    """

    breakpoints: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float).reshape(-1)
        lv = np.asarray(self.levels, dtype=float).reshape(-1)
        if lv.shape[0] != b.shape[0] + 1:
            raise LengthMismatch(f"{lv.shape[0]} levels for {b.shape[0]} breakpoints")
        if b.shape[0] > 1 and not np.all(np.diff(b) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not np.all(np.isfinite(lv)):
            raise ValueError("levels must be finite")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "levels", lv)

    @classmethod
    def constant(cls, c: float) -> "PiecewiseConstant":
        return cls(np.empty(0), np.array([float(c)]))

    @property
    def num_cells(self) -> int:
        return self.levels.shape[0]

    def cell_index(self, t) -> np.ndarray:
        return np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="left")

    def __call__(self, t):
        out = self.levels[self.cell_index(t)]
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "levels": self.levels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseConstant":
        return cls(np.array(d["breakpoints"], dtype=float), np.array(d["levels"], dtype=float))


def evaluate_piecewise(theta: PiecewiseConstant, t):
    return theta(t)


class BinScheme(str, Enum):
    EQUAL_MASS = "equal_mass"
    EQUAL_WIDTH = "equal_width"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class HistogramPartition:
    """Cells ``(-inf, e1], (e1, e2], ..., (e_{B-1}, inf)`` given interior edges."""

    edges: np.ndarray
    scheme: BinScheme = BinScheme.EXPLICIT

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float).reshape(-1)
        if e.shape[0] > 1 and np.any(np.diff(e) < 0):
            raise ValueError("partition edges must be nondecreasing")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "scheme", BinScheme(self.scheme))

    @property
    def num_cells(self) -> int:
        return self.edges.shape[0] + 1

    def assign(self, xs) -> np.ndarray:
        return np.searchsorted(self.edges, np.asarray(xs, dtype=float), side="left")

    def counts(self, xs) -> np.ndarray:
        return np.bincount(self.assign(xs), minlength=self.num_cells)

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "scheme": self.scheme.value}


def default_bin_count(n: int) -> int:
    return max(1, math.ceil(n ** (1.0 / 3.0) - 1e-12))


def make_partition(xs, B: int, scheme: BinScheme | str = BinScheme.EQUAL_MASS) -> HistogramPartition:
    """Equal-mass (empirical quantile) or equal-width partition of ``xs``.

    Duplicate quantile edges are merged, so the effective number of cells may
    be smaller than ``B``.  Constant ``xs`` give a single cell.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if B < 1:
        raise ValueError("B must be >= 1")
    if xs.size == 0:
        raise ValueError("xs must be non-empty")
    scheme = BinScheme(scheme)
    lo, hi = float(xs.min()), float(xs.max())
    if B == 1 or lo == hi:
        return HistogramPartition(np.empty(0), scheme)
    if scheme is BinScheme.EQUAL_MASS:
        qs = np.arange(1, B) / B
        edges = np.quantile(xs, qs, method="inverted_cdf")
    elif scheme is BinScheme.EQUAL_WIDTH:
        edges = lo + (hi - lo) * np.arange(1, B) / B
    else:
        raise ValueError("explicit partitions are built directly, not from make_partition")
    edges = np.unique(edges)
    edges = edges[edges < hi]
    return HistogramPartition(edges, scheme)


def _check_xy(xs, ys, weights=None):
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.shape != ys.shape:
        raise LengthMismatch(f"|xs|={xs.shape[0]} but |ys|={ys.shape[0]}")
    if weights is None:
        w = np.ones_like(xs)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape != xs.shape:
            raise LengthMismatch("weights length differs from xs")
        if np.any(w <= 0):
            raise NonpositiveWeight("weights must be positive")
    return xs, ys, w


def fill_empty_cells(levels: np.ndarray, occupied: np.ndarray) -> np.ndarray:
    """Give every empty cell the level of the nearest occupied cell (ties go left)."""
    levels = levels.copy()
    occ = np.flatnonzero(occupied)
    if occ.size == 0:
        raise ValueError("no occupied cells")
    for j in np.flatnonzero(~occupied):
        pos = np.searchsorted(occ, j)
        left = occ[pos - 1] if pos > 0 else None
        right = occ[pos] if pos < occ.size else None
        if right is None or (left is not None and j - left <= right - j):
            levels[j] = levels[left]
        else:
            levels[j] = levels[right]
    return levels


def fit_histogram(xs, ys, partition: HistogramPartition, weights=None) -> PiecewiseConstant:
    """Cell means of ``ys`` grouped by the cell of ``xs``."""
    xs, ys, w = _check_xy(xs, ys, weights)
    if xs.size == 0:
        raise ValueError("xs must be non-empty")
    cells = partition.assign(xs)
    B = partition.num_cells
    sw = np.bincount(cells, weights=w, minlength=B)
    swy = np.bincount(cells, weights=w * ys, minlength=B)
    occupied = sw > 0
    levels = np.zeros(B)
    levels[occupied] = swy[occupied] / sw[occupied]
    levels = fill_empty_cells(levels, occupied)
    return PiecewiseConstant(partition.edges, levels)


def _pool_ties(xs, ys, w):
    order = np.argsort(xs, kind="stable")
    xs, ys, w = xs[order], ys[order], w[order]
    ux, start = np.unique(xs, return_index=True)
    sw = np.add.reduceat(w, start)
    swy = np.add.reduceat(w * ys, start)
    return ux, swy, sw


def _pava_blocks(swy: np.ndarray, sw: np.ndarray):
    """Pool adjacent violators over pre-aggregated groups.

    Returns ``(ends, means)``: the last group index of every block and its mean.
    Adjacent blocks with equal means are pooled too, so block means strictly
    increase.
    """
    n = swy.shape[0]
    b_wy = [0.0] * n
    b_w = [0.0] * n
    b_end = [0] * n
    top = -1
    for i in range(n):
        top += 1
        b_wy[top] = float(swy[i])
        b_w[top] = float(sw[i])
        b_end[top] = i
        while top > 0 and b_wy[top - 1] * b_w[top] >= b_wy[top] * b_w[top - 1]:
            b_wy[top - 1] += b_wy[top]
            b_w[top - 1] += b_w[top]
            b_end[top - 1] = b_end[top]
            top -= 1
    ends = np.array(b_end[: top + 1], dtype=np.int64)
    means = np.array(b_wy[: top + 1]) / np.array(b_w[: top + 1])
    return ends, means


def merge_small_blocks(ends, swy, sw, counts, min_size: int):
    """Merge blocks holding fewer than ``min_size`` samples into a neighbour.

    The smallest block is merged first (lowest index on ties), into whichever
    neighbour has the closer mean (left on ties).  Merging adjacent blocks of a
    monotone fit keeps it monotone.
    """
    bounds = np.concatenate([[0], np.asarray(ends) + 1])
    b_wy = list(np.add.reduceat(swy, bounds[:-1]))
    b_w = list(np.add.reduceat(sw, bounds[:-1]))
    b_n = list(np.add.reduceat(counts, bounds[:-1]))
    b_end = list(ends)
    while len(b_n) > 1 and min(b_n) < min_size:
        j = int(np.argmin(b_n))
        if j == 0:
            k = 1
        elif j == len(b_n) - 1:
            k = j - 1
        else:
            m = b_wy[j] / b_w[j]
            k = j - 1 if m - b_wy[j - 1] / b_w[j - 1] <= b_wy[j + 1] / b_w[j + 1] - m else j + 1
        lo, hi = min(j, k), max(j, k)
        b_wy[lo] += b_wy[hi]
        b_w[lo] += b_w[hi]
        b_n[lo] += b_n[hi]
        b_end[lo] = b_end[hi]
        for lst in (b_wy, b_w, b_n, b_end):
            del lst[hi]
    return np.array(b_end, dtype=np.int64), np.array(b_wy) / np.array(b_w)


def fit_isotonic_pava(xs, ys, weights=None, min_block_size: int | None = None) -> PiecewiseConstant:
    """Weighted least-squares nondecreasing fit of ``ys`` on ``xs``.

    Samples sharing an ``x`` are pooled first so the fit is a function of ``x``.
    Each breakpoint sits at the largest training ``x`` of the block on its left,
    so out-of-sample evaluation depends only on the order of ``t`` relative to
    the training points.  With ``min_block_size`` the exact PAVA solution is
    post-processed so every block holds at least that many samples.
    """
    xs, ys, w = _check_xy(xs, ys, weights)
    if xs.size == 0:
        raise ValueError("xs must be non-empty")
    ux, swy, sw = _pool_ties(xs, ys, w)
    ends, means = _pava_blocks(swy, sw)
    if min_block_size is not None and min_block_size > 1:
        counts = np.bincount(np.searchsorted(ux, xs), minlength=ux.size).astype(float)
        ends, means = merge_small_blocks(ends, swy, sw, counts, min_block_size)
    return PiecewiseConstant(ux[ends[:-1]], means)


def isotonic_fitted_values(xs, ys, weights=None) -> np.ndarray:
    return fit_isotonic_pava(xs, ys, weights)(np.asarray(xs, dtype=float))


def isotonic_minmax_oracle(ys, weights=None) -> np.ndarray:
    """Brute-force isotonic regression of ``ys`` in index order.

    Uses the min-max characterisation
    ``fit_i = min_{k >= i} max_{j <= i} mean(y[j..k])`` over all contiguous
    blocks, whose weighted means come from prefix sums (an O(n^2) table).
    Independent of PAVA; intended for small n.
    """
    y = np.asarray(ys, dtype=float).reshape(-1)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    n = y.shape[0]
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwy = np.concatenate([[0.0], np.cumsum(w * y)])
    j = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        block = (cwy[k + 1] - cwy[j]) / (cw[k + 1] - cw[j])
    block = np.where(k >= j, block, -np.inf)
    out = np.empty(n)
    for i in range(n):
        out[i] = block[: i + 1, i:].max(axis=0).min()
    return out


def flat_regions(theta: PiecewiseConstant, xs=None, tol: float = 0.0) -> HistogramPartition:
    """Partition whose cells are the maximal runs of (nearly) equal levels of ``theta``.

    Adjacent cells whose levels differ by at most ``tol`` are chained into one
    run.  When ``xs`` is given, runs containing none of the ``xs`` are absorbed
    into their left neighbour (the right one for a leading run).
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    lv = theta.levels
    bp = theta.breakpoints
    keep = np.abs(np.diff(lv)) > tol  # boundary j separates cells j and j+1
    edges = bp[keep]
    if xs is not None and edges.size:
        counts = np.bincount(
            np.searchsorted(edges, np.asarray(xs, dtype=float), side="left"),
            minlength=edges.size + 1,
        )
        while edges.size and np.any(counts == 0):
            j = int(np.flatnonzero(counts == 0)[0])
            drop = j - 1 if j > 0 else 0
            edges = np.delete(edges, drop)
            counts = np.bincount(
                np.searchsorted(edges, np.asarray(xs, dtype=float), side="left"),
                minlength=edges.size + 1,
            )
    return HistogramPartition(edges, BinScheme.EXPLICIT)
