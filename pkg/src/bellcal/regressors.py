"""Small regression models used for nuisances and base value estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

RIDGE_SCALE = 1e-3


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.coef + self.intercept

    def to_dict(self) -> dict:
        return {"kind": "linear", "coef": np.asarray(self.coef).tolist(), "intercept": float(self.intercept)}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.array(d["coef"], dtype=float), float(d["intercept"]))


class RidgeSolver:
    """Ridge regression on a fixed design; the intercept is not penalised.

    The factorisation is cached so many targets can be regressed on the same
    features cheaply (penalty ``scale * n``).
    """

    def __init__(self, X: np.ndarray, scale: float = RIDGE_SCALE):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.n, self.d = X.shape
        self.mean = X.mean(axis=0)
        self.Xc = X - self.mean
        lam = scale * self.n
        G = self.Xc.T @ self.Xc + lam * np.eye(self.d)
        self._chol = np.linalg.cholesky(G)

    def fit(self, y: np.ndarray) -> LinearModel:
        y = np.asarray(y, dtype=float).reshape(-1)
        ym = y.mean()
        rhs = self.Xc.T @ (y - ym)
        z = np.linalg.solve(self._chol, rhs)
        beta = np.linalg.solve(self._chol.T, z)
        return LinearModel(beta, float(ym - self.mean @ beta))


def fit_ridge(X: np.ndarray, y: np.ndarray, scale: float = RIDGE_SCALE) -> LinearModel:
    return RidgeSolver(X, scale).fit(y)


@dataclass(frozen=True)
class StumpEnsemble:
    init: float
    features: np.ndarray
    thresholds: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.full(X.shape[0], self.init)
        for f, t, lv, rv in zip(self.features, self.thresholds, self.left, self.right):
            out += np.where(X[:, f] <= t, lv, rv)
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "stumps",
            "init": float(self.init),
            "features": self.features.tolist(),
            "thresholds": self.thresholds.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StumpEnsemble":
        return cls(
            float(d["init"]),
            np.array(d["features"], dtype=np.int64),
            np.array(d["thresholds"], dtype=float),
            np.array(d["left"], dtype=float),
            np.array(d["right"], dtype=float),
        )


def fit_boosted_stumps(
    X: np.ndarray,
    y: np.ndarray,
    n_rounds: int = 200,
    learning_rate: float = 0.1,
    max_bins: int = 64,
) -> StumpEnsemble:
    """Least-squares gradient boosting with depth-1 trees.

    Candidate thresholds are per-feature empirical quantiles (at most
    ``max_bins`` of them), which keeps every round a couple of bincounts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n, d = X.shape
    init = float(y.mean())
    cuts = []
    codes = np.empty((n, d), dtype=np.int64)
    for f in range(d):
        c = np.unique(np.quantile(X[:, f], np.linspace(0, 1, max_bins + 1)[1:-1], method="inverted_cdf"))
        cuts.append(c)
        codes[:, f] = np.searchsorted(c, X[:, f], side="left")
    width = max_bins
    offsets = np.arange(d) * width
    flat = (codes + offsets).ravel()
    counts = np.bincount(flat, minlength=d * width).reshape(d, width).astype(float)
    ccount = np.cumsum(counts, axis=1)

    resid = y - init
    feats, thrs, lefts, rights = [], [], [], []
    for _ in range(n_rounds):
        sums = np.bincount(flat, weights=np.repeat(resid, d), minlength=d * width).reshape(d, width)
        csum = np.cumsum(sums, axis=1)
        total = csum[:, -1:]
        nl = ccount
        nr = n - nl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where((nl > 0) & (nr > 0), csum**2 / nl + (total - csum) ** 2 / nr, -np.inf)
        # only splits at an existing cut are valid
        for f in range(d):
            gain[f, len(cuts[f]):] = -np.inf
        f, j = np.unravel_index(np.argmax(gain), gain.shape)
        if not np.isfinite(gain[f, j]):
            break
        lv = learning_rate * csum[f, j] / nl[f, j]
        rv = learning_rate * (total[f, 0] - csum[f, j]) / nr[f, j]
        thr = cuts[f][j]
        resid -= np.where(codes[:, f] <= j, lv, rv)
        feats.append(f)
        thrs.append(thr)
        lefts.append(lv)
        rights.append(rv)
    return StumpEnsemble(
        init,
        np.array(feats, dtype=np.int64),
        np.array(thrs, dtype=float),
        np.array(lefts, dtype=float),
        np.array(rights, dtype=float),
    )


def fit_regressor(kind: str, X: np.ndarray, y: np.ndarray):
    if kind == "linear_ridge":
        return fit_ridge(X, y)
    if kind == "boosted_stumps":
        return fit_boosted_stumps(X, y)
    raise ValueError(f"unknown regressor {kind!r}")


def model_from_dict(d: dict):
    kind = d["kind"]
    if kind == "linear":
        return LinearModel.from_dict(d)
    if kind == "stumps":
        return StumpEnsemble.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class MultinomialLogit:
    """Softmax regression on standardised features, fit by full-batch gradient descent."""

    num_actions: int
    learning_rate: float | None = None
    tol: float = 1e-6
    max_epochs: int = 5000
    prob_floor: float = 1e-4
    weights: np.ndarray | None = field(default=None, repr=False)
    mean: np.ndarray | None = field(default=None, repr=False)
    scale: np.ndarray | None = field(default=None, repr=False)
    observed: np.ndarray | None = None
    epochs_run: int = 0
    grad_norm: float = np.inf

    def _design(self, X):
        Z = (np.atleast_2d(X) - self.mean) / self.scale
        return np.hstack([np.ones((Z.shape[0], 1)), Z])

    def fit(self, X: np.ndarray, a: np.ndarray) -> "MultinomialLogit":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = np.asarray(a, dtype=np.int64)
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        Z = self._design(X)
        n, p = Z.shape
        k = self.num_actions
        self.observed = np.bincount(a, minlength=k) > 0
        cols = np.flatnonzero(self.observed)
        Y = np.zeros((n, cols.size))
        Y[np.arange(n), np.searchsorted(cols, a)] = 1.0
        W = np.zeros((p, cols.size))
        # 1/L step: the softmax NLL Hessian is bounded by 0.5 * Z'Z/n per class
        lr = self.learning_rate or 1.0 / (0.5 * np.linalg.eigvalsh(Z.T @ Z / n)[-1])
        # Nesterov-accelerated gradient descent on the mean negative log-likelihood
        V = W.copy()
        t_prev = 1.0
        for epoch in range(1, self.max_epochs + 1):
            P = softmax(Z @ V, axis=1)
            grad = Z.T @ (P - Y) / n
            W_next = V - lr * grad
            t = 0.5 * (1 + np.sqrt(1 + 4 * t_prev**2))
            V = W_next + ((t_prev - 1) / t) * (W_next - W)
            W, t_prev = W_next, t
            self.grad_norm = float(np.linalg.norm(grad))
            self.epochs_run = epoch
            if self.grad_norm < self.tol:
                break
        full = np.zeros((p, k))
        full[:, cols] = W
        self.weights = full
        return self

    @property
    def degenerate(self) -> bool:
        return bool(self.observed is not None and not np.all(self.observed))

    def probs(self, X: np.ndarray) -> np.ndarray:
        logits = self._design(X) @ self.weights
        logits[:, ~self.observed] = -np.inf
        P = np.exp(log_softmax(logits, axis=1))
        P = np.maximum(P, self.prob_floor)
        return P / P.sum(axis=1, keepdims=True)
