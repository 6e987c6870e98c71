"""Space-time ARIMA forecaster for link flows.

The model for the ``d``-times differenced series ``z`` of all ``N`` links is::

    z(t) = sum_i sum_k phi[i][k] W_k z(t-i) - sum_i sum_k theta[i][k] W_k e(t-i) + e(t)

with scalar coefficients shared by all links and spatial weight matrices
``W_k`` (``W_0 = I``; ``W_k`` spreads weight uniformly over the links exactly
``k`` hops away in the undirected turning graph).

Fitting is two-stage least squares: a long spatial AR model estimates the
innovations, then the AR and lagged-innovation regressors are fitted jointly,
pooling every link and time step into one regression.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import NetworkTopology


class InsufficientHistoryError(ValueError):
    pass


class RankDeficientRegressionError(ValueError):
    def __init__(self, message: str, regressors: Sequence[str]):
        super().__init__(message)
        self.regressors = tuple(regressors)


@dataclass(frozen=True)
class SpatialWeights:
    matrices: tuple  # W_0 .. W_K, each (N, N)
    link_ids: tuple = ()

    @property
    def K(self) -> int:
        return len(self.matrices) - 1

    @property
    def N(self) -> int:
        return self.matrices[0].shape[0]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.matrices[k]


def hop_weights(adjacency: np.ndarray, K: int, link_ids: Sequence = ()) -> SpatialWeights:
    """Row-normalized exact-hop weights from a symmetric 0/1 adjacency."""
    if K < 0:
        raise ValueError("spatial order must be >= 0")
    A = np.asarray(adjacency, dtype=bool)
    A = A | A.T
    np.fill_diagonal(A, False)
    N = A.shape[0]
    dist = np.full((N, N), -1, dtype=int)
    for s in range(N):
        dist[s, s] = 0
        q = deque([s])
        while q:
            v = q.popleft()
            for w in np.flatnonzero(A[v]):
                if dist[s, w] < 0:
                    dist[s, w] = dist[s, v] + 1
                    q.append(w)
    mats = [np.eye(N)]
    for k in range(1, K + 1):
        M = (dist == k).astype(float)
        rs = M.sum(axis=1, keepdims=True)
        mats.append(np.divide(M, rs, out=np.zeros_like(M), where=rs > 0))
    return SpatialWeights(tuple(mats), tuple(link_ids))


def build_weights(topo: NetworkTopology, K: int = 1) -> SpatialWeights:
    ids = topo.link_ids
    idx = {z: i for i, z in enumerate(ids)}
    A = np.zeros((len(ids), len(ids)), dtype=bool)
    for z, d in topo.streams:
        A[idx[z], idx[d]] = True
    return hop_weights(A, K, ids)


# ---------------------------------------------------------------------------
# differencing


def difference(series, d: int):
    """``d``-fold first difference along time; returns ``(diffed, initials)``.

    ``initials[j]`` is the first row of the ``j``-times differenced series,
    which is what :func:`inverse_difference` needs to undo step ``j + 1``.
    """
    x = np.asarray(series, dtype=float)
    initials = []
    for _ in range(d):
        initials.append(x[0].copy())
        x = np.diff(x, axis=0)
    return x, initials


def inverse_difference(diffed, d: int, initials) -> np.ndarray:
    x = np.asarray(diffed, dtype=float)
    for j in reversed(range(d)):
        x = np.concatenate((initials[j][None, ...], x), axis=0).cumsum(axis=0)
    return x


# ---------------------------------------------------------------------------
# model


@dataclass
class StarimaModel:
    p: int
    d: int
    q: int
    m: tuple  # spatial order per AR lag
    n: tuple  # spatial order per MA lag
    phi: list  # phi[i][k], lag i+1
    theta: list
    weights: SpatialWeights
    residual_variance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nonnegative: bool = False

    def __post_init__(self):
        if len(self.m) != self.p or len(self.n) != self.q:
            raise ValueError("spatial orders must list one entry per lag")
        for i, mi in enumerate(self.m):
            if len(self.phi[i]) != mi + 1:
                raise ValueError(f"phi lag {i + 1}: expected {mi + 1} coefficients")
        for i, ni in enumerate(self.n):
            if len(self.theta[i]) != ni + 1:
                raise ValueError(f"theta lag {i + 1}: expected {ni + 1} coefficients")
        if max(self.m + self.n, default=0) > self.weights.K:
            raise ValueError("spatial order exceeds the available weight matrices")

    # -- one-step structure -------------------------------------------------
    def _ar_mats(self):
        W = self.weights
        return [sum(self.phi[i][k] * W[k] for k in range(self.m[i] + 1)) for i in range(self.p)]

    def _ma_mats(self):
        W = self.weights
        return [sum(self.theta[i][k] * W[k] for k in range(self.n[i] + 1)) for i in range(self.q)]

    def innovations(self, z: np.ndarray) -> np.ndarray:
        """One-step residuals of the differenced series (pre-sample terms zero)."""
        T = z.shape[0]
        ar, ma = self._ar_mats(), self._ma_mats()
        e = np.zeros_like(z)
        for t in range(T):
            pred = np.zeros(z.shape[1])
            for i in range(self.p):
                if t - i - 1 >= 0:
                    pred += ar[i] @ z[t - i - 1]
            for i in range(self.q):
                if t - i - 1 >= 0:
                    pred -= ma[i] @ e[t - i - 1]
            e[t] = z[t] - pred
        return e

    def to_dict(self) -> dict:
        return {
            "p": self.p, "d": self.d, "q": self.q, "m": list(self.m), "n": list(self.n),
            "phi": [list(map(float, r)) for r in self.phi],
            "theta": [list(map(float, r)) for r in self.theta],
            "residual_variance": [float(v) for v in self.residual_variance],
            "nonnegative": self.nonnegative,
            "link_ids": list(self.weights.link_ids),
            "weights": [w.tolist() for w in self.weights.matrices],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StarimaModel":
        W = SpatialWeights(tuple(np.array(w, dtype=float) for w in doc["weights"]), tuple(doc.get("link_ids", ())))
        return cls(p=int(doc["p"]), d=int(doc["d"]), q=int(doc["q"]), m=tuple(doc["m"]), n=tuple(doc["n"]),
                   phi=[list(r) for r in doc["phi"]], theta=[list(r) for r in doc["theta"]], weights=W,
                   residual_variance=np.array(doc.get("residual_variance", []), dtype=float),
                   nonnegative=bool(doc.get("nonnegative", False)))


def save_model(model: StarimaModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> StarimaModel:
    with open(path, encoding="utf-8") as fh:
        return StarimaModel.from_dict(json.load(fh))


def min_history(p: int, q: int, K: int) -> int:
    return 10 * (p + q) * (K + 1)


def _lagged(W: SpatialWeights, series: np.ndarray, lag: int, k: int, t0: int) -> np.ndarray:
    """Stacked ``W_k series(t - lag)`` for ``t = t0 .. T-1``, flattened over links."""
    T = series.shape[0]
    return (series[t0 - lag:T - lag] @ W[k].T).ravel()


def _lstsq(cols: list, names: list, y: np.ndarray) -> np.ndarray:
    if not cols:
        return np.zeros(0)
    X = np.column_stack(cols)
    if not np.any(X):
        return np.zeros(X.shape[1])
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        dependent, kept = [], []
        for j in range(X.shape[1]):
            trial = kept + [j]
            if np.linalg.matrix_rank(X[:, trial]) == len(trial):
                kept.append(j)
            else:
                dependent.append(names[j])
        raise RankDeficientRegressionError(
            f"design matrix has rank {rank} < {X.shape[1]}; dependent regressors: {dependent}", dependent)
    return np.linalg.lstsq(X, y, rcond=None)[0]


def fit(history, p: int = 2, d: int = 0, q: int = 1, m=1, n=1, weights: SpatialWeights | None = None,
        nonnegative: bool = False, long_ar: int | None = None) -> StarimaModel:
    """Fit coefficients to a ``(T, N)`` history.  ``m``/``n`` may be ints (same
    spatial order for every lag) or per-lag sequences."""
    y = np.asarray(history, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if not np.all(np.isfinite(y)):
        raise ValueError("history contains non-finite values")
    m = tuple([m] * p) if np.isscalar(m) else tuple(int(v) for v in m)
    n = tuple([n] * q) if np.isscalar(n) else tuple(int(v) for v in n)
    K = max(m + n, default=0)
    W = weights if weights is not None else hop_weights(np.zeros((y.shape[1], y.shape[1])), K)
    if W.N != y.shape[1]:
        raise ValueError(f"weights are {W.N}x{W.N} but history has {y.shape[1]} series")
    need = min_history(p, q, K)
    if y.shape[0] < need:
        raise InsufficientHistoryError(f"history has {y.shape[0]} steps, need at least {need}")
    z, _ = difference(y, d)
    T = z.shape[0]

    if q > 0:
        L = long_ar or max(p + q, min(3 * (p + q), T // 20))
        t0 = L
        cols, names = [], []
        for lag in range(1, L + 1):
            for k in range(K + 1):
                cols.append(_lagged(W, z, lag, k, t0))
                names.append(f"long_ar[{lag},{k}]")
        coef = _lstsq(cols, names, z[t0:].ravel())
        e = np.zeros_like(z)
        if coef.size:
            e[t0:] = (z[t0:].ravel() - np.column_stack(cols) @ coef).reshape(T - t0, -1)
        else:
            e[t0:] = z[t0:]
    else:
        L, e = 0, np.zeros_like(z)

    t0 = L + max(p, q)
    cols, names = [], []
    for i in range(p):
        for k in range(m[i] + 1):
            cols.append(_lagged(W, z, i + 1, k, t0))
            names.append(f"phi[{i + 1},{k}]")
    for i in range(q):
        for k in range(n[i] + 1):
            cols.append(-_lagged(W, e, i + 1, k, t0))
            names.append(f"theta[{i + 1},{k}]")
    coef = _lstsq(cols, names, z[t0:].ravel())
    phi, theta, c = [], [], 0
    for i in range(p):
        phi.append([float(v) for v in coef[c:c + m[i] + 1]])
        c += m[i] + 1
    for i in range(q):
        theta.append([float(v) for v in coef[c:c + n[i] + 1]])
        c += n[i] + 1
    model = StarimaModel(p=p, d=d, q=q, m=m, n=n, phi=phi, theta=theta, weights=W, nonnegative=nonnegative)
    res = model.innovations(z)[t0:]
    model.residual_variance = res.var(axis=0) if res.size else np.zeros(y.shape[1])
    return model


def predict(model: StarimaModel, history, horizon: int) -> np.ndarray:
    """Forecasts for ``t+1 .. t+horizon`` as a ``(horizon, N)`` array."""
    y = np.asarray(history, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < model.d + max(model.p, model.q, 1):
        raise InsufficientHistoryError(f"history has {y.shape[0]} steps, too short for the model lags")
    z, _ = difference(y, model.d)
    e = model.innovations(z)
    ar, ma = model._ar_mats(), model._ma_mats()
    zs = list(z)
    es = list(e)
    out = []
    for _ in range(horizon):
        t = len(zs)
        pred = np.zeros(z.shape[1])
        for i in range(model.p):
            if t - i - 1 >= 0:
                pred += ar[i] @ zs[t - i - 1]
        for i in range(model.q):
            if t - i - 1 >= 0:
                pred -= ma[i] @ es[t - i - 1]
        zs.append(pred)
        es.append(np.zeros_like(pred))
        out.append(pred)
    fz = np.array(out).reshape(horizon, z.shape[1])
    # undo differencing: level j forecasts continue from the last level-j value
    levels = [y]
    for _ in range(model.d):
        levels.append(np.diff(levels[-1], axis=0))
    for j in reversed(range(model.d)):
        fz = levels[j][-1] + np.cumsum(fz, axis=0)
    if model.nonnegative:
        fz = np.maximum(fz, 0.0)
    return fz


def history_from_trajectory(rows, column: str = "f_in", link_ids: Sequence | None = None) -> np.ndarray:
    """Per-control-step mean of a flow column from ``trajectory.csv`` rows.

    Returns a ``(steps, links)`` array, links in ``link_ids`` order (default:
    sorted ids found in the log).
    """
    acc: dict = {}
    for r in rows:
        key = (int(r["control_step"]), int(r["link"]))
        s, c = acc.get(key, (0.0, 0))
        acc[key] = (s + float(r[column]), c + 1)
    if not acc:
        raise ValueError("trajectory has no rows")
    ids = list(link_ids) if link_ids is not None else sorted({z for _, z in acc})
    steps = sorted({k for k, _ in acc})
    out = np.zeros((len(steps), len(ids)))
    for a, k in enumerate(steps):
        for b, z in enumerate(ids):
            s, c = acc.get((k, z), (0.0, 0))
            out[a, b] = s / c if c else 0.0
    return out
