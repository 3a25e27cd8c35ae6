"""1-D Gaussian-process regression mapping image radius to surface radius.

The posterior uses a squared-exponential kernel plus a linear trend
``a + b r`` whose coefficients are estimated by generalized least squares
(a GP with explicit basis functions). Fisheye radius maps are close to
linear, so the kernel only has to absorb the curvature.

Training pairs are ``(r, R0 sin θ)``: pixel radius from the image center
against the radius of the matching surface point from the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import GpHyperparameterError, GpInconsistencyError

LENGTH_SCALE_GRID = (0.05, 0.1, 0.15, 0.25, 0.5)


@dataclass(frozen=True)
class GpHyper:
    signal_var: float
    length_scale: float
    noise_var: float

    @property
    def noise_std(self) -> float:
        return math.sqrt(self.noise_var)


def rbf(a, b, hyper: GpHyper) -> np.ndarray:
    d = np.asarray(a, dtype=np.float64)[:, None] - np.asarray(b, dtype=np.float64)[None, :]
    return hyper.signal_var * np.exp(-0.5 * (d / hyper.length_scale) ** 2)


def default_hyper(r: np.ndarray, y: np.ndarray, length_factor: float = 0.15) -> GpHyper:
    span = float(r.max() - r.min())
    sf = float(np.std(y))
    if sf == 0.0:
        sf = max(float(np.abs(y).max()), 1.0)
    ell = length_factor * span if span > 0 else 1.0
    sn = 1e-3 * sf
    return GpHyper(sf * sf, ell, sn * sn)


@dataclass(frozen=True, eq=False)
class GpCorrespondence:
    """Fitted posterior; immutable and safe to share between readers."""

    r: np.ndarray
    y: np.ndarray
    hyper: GpHyper
    trend: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    log_marginal_likelihood: float

    @property
    def r_min(self) -> float:
        return float(self.r.min())

    @property
    def r_max(self) -> float:
        return float(self.r.max())

    def predict(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        flat = r.ravel()
        k = rbf(flat, self.r, self.hyper)
        return (_basis(flat, len(self.trend)) @ self.trend + k @ self.alpha).reshape(r.shape)

    def predict_var(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64).ravel()
        k = rbf(r, self.r, self.hyper)
        v = cho_solve((self.chol, True), k.T)
        return np.maximum(self.hyper.signal_var - np.einsum("ij,ji->i", k, v), 0.0)

    def inverse(self, y, lo: Optional[float] = None, hi: Optional[float] = None, iters: int = 80) -> np.ndarray:
        """Radius whose posterior mean equals ``y``, by bisection on [lo, hi].

        Assumes the mean is increasing on the bracket, which holds for a
        sensible fisheye calibration.
        """
        y = np.asarray(y, dtype=np.float64)
        a = np.full(y.shape, self.r_min if lo is None else lo)
        b = np.full(y.shape, self.r_max if hi is None else hi)
        for _ in range(iters):
            m = 0.5 * (a + b)
            below = self.predict(m) < y
            a = np.where(below, m, a)
            b = np.where(below, b, m)
        return 0.5 * (a + b)


def _lml(y0: np.ndarray, chol: np.ndarray, alpha: np.ndarray) -> float:
    n = len(y0)
    return float(-0.5 * y0 @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2 * math.pi))


def _basis(r: np.ndarray, n_terms: int) -> np.ndarray:
    return np.stack([np.ones_like(r), r][:n_terms], axis=1)


def _posterior(r, y, hyper: GpHyper) -> GpCorrespondence:
    k = rbf(r, r, hyper) + hyper.noise_var * np.eye(len(r))
    try:
        chol = cholesky(k, lower=True)
    except np.linalg.LinAlgError as exc:
        raise GpHyperparameterError(
            f"kernel matrix is not positive definite (noise_var={hyper.noise_var:g}); "
            "increase the noise variance") from exc
    # a single distinct radius only supports a constant trend
    h = _basis(r, 2 if len(r) >= 2 else 1)
    kinv_h = cho_solve((chol, True), h)
    trend = np.linalg.solve(h.T @ kinv_h, kinv_h.T @ y)
    resid = y - h @ trend
    alpha = cho_solve((chol, True), resid)
    return GpCorrespondence(r, y, hyper, trend, chol, alpha, _lml(resid, chol, alpha))


def fit_gp(samples, hyper: Optional[GpHyper] = None, optimize: bool = False) -> GpCorrespondence:
    """Fit the radius correspondence from ``(r, R0 sin θ)`` pairs.

    Without ``hyper`` the defaults are length scale 0.15 x radius span,
    signal std = target std, noise std = 1e-3 x signal std. ``optimize``
    picks the length scale from :data:`LENGTH_SCALE_GRID` (fractions of the
    span) by log marginal likelihood. Repeated radii with identical targets
    are merged; conflicting ones raise :class:`GpInconsistencyError`.
    """
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(s) < 1 or not np.all(np.isfinite(s)):
        raise ValueError("need at least one finite (r, y) sample")
    order = np.argsort(s[:, 0], kind="stable")
    s = s[order]
    r_u, first, counts = np.unique(s[:, 0], return_index=True, return_counts=True)
    y_u = np.empty_like(r_u)
    base = hyper or default_hyper(r_u, s[:, 1])
    tol = 3.0 * base.noise_std
    for i, (f0, c) in enumerate(zip(first, counts)):
        grp = s[f0:f0 + c, 1]
        if grp.max() - grp.min() > tol:
            raise GpInconsistencyError(
                f"radius {r_u[i]:g} has conflicting targets {grp.min():g} and {grp.max():g}")
        y_u[i] = grp.mean()
    if len(r_u) < 2 and len(s) < 2:
        raise ValueError("need at least two samples")
    if hyper is not None or not optimize:
        return _posterior(r_u, y_u, hyper or default_hyper(r_u, y_u))
    best = None
    for frac in LENGTH_SCALE_GRID:
        try:
            cand = _posterior(r_u, y_u, default_hyper(r_u, y_u, frac))
        except GpHyperparameterError:
            continue
        if best is None or cand.log_marginal_likelihood > best.log_marginal_likelihood:
            best = cand
    if best is None:
        raise GpHyperparameterError("no length scale in the search grid gives a positive definite kernel")
    return best
