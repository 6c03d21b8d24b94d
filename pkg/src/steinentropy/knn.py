"""k-nearest-neighbour local averaging and local linear fits.

In one dimension the k nearest training points of a query always form a
contiguous window of the sorted sample, so window sums are read off prefix
sums after a vectorized binary search for the window start.  Higher
dimensions use scipy's KD-tree.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateSampleError, SampleSizeError


def default_k(m: int, d: int) -> int:
    """ceil(m^{4/(4+d)}), capped at m - 1."""
    # guard the ceiling against float noise at exact powers (1e5 ** 0.8 = 10000)
    return int(min(m - 1, math.ceil(m ** (4.0 / (4.0 + d)) * (1 - 1e-12))))


def _cum(v: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros((1,) + v.shape[1:]), np.cumsum(v, axis=0)])


class KNNRegressor:
    """Nearest-neighbour regression of ``y`` (m, c) on ``x`` (m, d).

    ``weights`` are optional per-row sample weights for the local linear
    fit; they must be functions of x alone to keep the fit unbiased.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, k: int, scale: bool = True,
                 weights: np.ndarray | None = None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(y, dtype=float)
        self._vector = y.ndim == 1
        if self._vector:
            y = y[:, None]
        m, d = x.shape
        if y.shape[0] != m:
            raise ValueError("x and y must have the same number of rows")
        if k < 1 or k >= m:
            raise SampleSizeError(f"need 1 <= k < m, got k={k}, m={m}")
        sd = x.std(axis=0)
        if np.any(sd <= 1e-12 * (1.0 + np.abs(x).max(axis=0))):
            raise DegenerateSampleError("conditioning column has zero variance")
        self.k, self.m, self.d = int(k), m, d
        self._scale = sd if scale else np.ones(d)
        w = np.ones(m) if weights is None else np.asarray(weights, dtype=float).ravel()
        if d == 1:
            order = np.argsort(x[:, 0], kind="stable")
            self._rank = np.empty(m, dtype=np.int64)
            self._rank[order] = np.arange(m)
            self._xs = x[order, 0] / self._scale[0]
            self._ys = y[order]
            self._ws = w[order]
            self._sums = None
        else:
            self._tree = cKDTree(x / self._scale)
            self._y = y
            self._w = w

    # 1-d helpers ---------------------------------------------------------
    def _prefix(self):
        if self._sums is None:
            xs, ys, w = self._xs, self._ys, self._ws
            self._sums = {
                "w": _cum(w), "wx": _cum(w * xs), "wxx": _cum(w * xs * xs),
                "wy": _cum(w[:, None] * ys), "wxy": _cum((w * xs)[:, None] * ys),
                "y": _cum(ys), "yy": _cum(ys * ys), "n": _cum(np.ones_like(xs)),
            }
        return self._sums

    def _windows(self, q: np.ndarray, k: int) -> np.ndarray:
        # start index of the best length-k window of the sorted sample
        xs = self._xs
        m = xs.size
        p = np.searchsorted(xs, q)
        lo = np.clip(p - k, 0, m - k)
        hi = np.clip(p, 0, m - k)
        # move right while the point after the window is closer than its first point
        while True:
            active = lo < hi
            if not active.any():
                break
            mid = (lo + hi) // 2
            right = (xs[np.minimum(mid + k, m - 1)] - q) < (q - xs[mid])
            lo = np.where(active & right, mid + 1, lo)
            hi = np.where(active & ~right, mid, hi)
        return lo

    def _window_sums_1d(self, q: np.ndarray, exclude: np.ndarray | None) -> dict:
        r = 0 if exclude is None else exclude.shape[1]
        kk = self.k + r
        lo = self._windows(q, kk)
        S = self._prefix()
        out = {name: arr[lo + kk] - arr[lo] for name, arr in S.items()}
        if exclude is not None:
            pos = self._rank[exclude]
            inside = (pos >= lo[:, None]) & (pos < (lo + kk)[:, None])
            xs, ys, w = self._xs[pos], self._ys[pos], self._ws[pos]
            f = inside.astype(float)
            out["n"] = out["n"] - f.sum(axis=1)
            out["w"] = out["w"] - (f * w).sum(axis=1)
            out["wx"] = out["wx"] - (f * w * xs).sum(axis=1)
            out["wxx"] = out["wxx"] - (f * w * xs * xs).sum(axis=1)
            out["y"] = out["y"] - np.einsum("qr,qrc->qc", f, ys)
            out["yy"] = out["yy"] - np.einsum("qr,qrc->qc", f, ys * ys)
            out["wy"] = out["wy"] - np.einsum("qr,qrc->qc", f * w, ys)
            out["wxy"] = out["wxy"] - np.einsum("qr,qrc->qc", f * w * xs, ys)
        return out

    # public --------------------------------------------------------------
    def predict(self, q: np.ndarray, loo: bool = False, return_sq: bool = False, degree: int = 0,
                exclude: np.ndarray | None = None, chunk: int = 2000):
        """Neighbour mean (degree 0) or local linear value (degree 1) at ``q``.

        ``loo`` means the queries are the training rows themselves, in
        training order, each excluded from its own fit.  ``exclude`` gives,
        per query, training row indices to drop (shape (q, r)); in one
        dimension the window then holds between k and k + r - 1 rows.
        """
        q = np.asarray(q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if degree not in (0, 1):
            raise ValueError("degree must be 0 or 1")
        if return_sq and degree:
            raise ValueError("return_sq is only available for local averages")
        if loo:
            if q.shape[0] != self.m:
                raise ValueError("loo queries must be the training rows")
            own = np.arange(self.m)[:, None]
            exclude = own if exclude is None else np.hstack([own, exclude])
        if exclude is not None:
            exclude = np.asarray(exclude, dtype=np.int64).reshape(q.shape[0], -1)
        if self.d == 1:
            mean, sq = self._predict_1d(q[:, 0] / self._scale[0], exclude, degree)
        else:
            mean, sq = self._predict_nd(q / self._scale, exclude, degree, chunk)
        if self._vector:
            mean = mean[:, 0]
            sq = None if sq is None else sq[:, 0]
        return (mean, sq) if return_sq else mean

    def _predict_1d(self, qs, exclude, degree):
        s = self._window_sums_1d(qs, exclude)
        if degree == 0:
            n = s["n"][:, None]
            return s["y"] / n, s["yy"] / n
        sw = s["w"]
        mx = s["wx"] / sw
        my = s["wy"] / sw[:, None]
        vxx = s["wxx"] / sw - mx * mx
        cxy = s["wxy"] / sw[:, None] - mx[:, None] * my
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(vxx[:, None] > 1e-300, cxy / vxx[:, None], 0.0)
        return my + slope * (qs - mx)[:, None], None

    def _predict_nd(self, qq, exclude, degree, chunk):
        r = 0 if exclude is None else exclude.shape[1]
        c = self._y.shape[1]
        mean = np.empty((qq.shape[0], c))
        sq = np.empty_like(mean) if degree == 0 else None
        for a in range(0, qq.shape[0], chunk):
            _, idx = self._tree.query(qq[a:a + chunk], k=self.k + r)
            idx = idx.reshape(idx.shape[0], -1)
            keep = np.ones(idx.shape, bool)
            if exclude is not None:
                ex = exclude[a:a + chunk]
                keep = ~(idx[:, :, None] == ex[:, None, :]).any(axis=2)
                # exactly k neighbours: drop the farthest surplus
                keep &= np.cumsum(keep, axis=1) <= self.k
            f = keep.astype(float)
            Y = self._y[idx]
            if degree == 0:
                n = f.sum(axis=1)[:, None]
                mean[a:a + chunk] = np.einsum("qk,qkc->qc", f, Y) / n
                sq[a:a + chunk] = np.einsum("qk,qkc->qc", f, Y * Y) / n
            else:
                X = self._tree.data[idx] - qq[a:a + chunk, None, :]
                X1 = np.concatenate([np.ones(X.shape[:2] + (1,)), X], axis=2)
                W = f * self._w[idx]
                G = np.einsum("qk,qki,qkj->qij", W, X1, X1)
                R = np.einsum("qk,qki,qkc->qic", W, X1, Y)
                coef = np.linalg.solve(G + 1e-12 * np.eye(self.d + 1), R)
                mean[a:a + chunk] = coef[:, 0, :]
        return mean, sq
