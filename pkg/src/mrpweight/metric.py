"""Euclidean metrics for Hamiltonian transitions.

A metric is stored as its inverse (the covariance used to scale momenta into
velocities).  Coordinates with zero inverse-metric entries are frozen.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular


class Metric:
    """Diagonal or dense inverse metric.

    Parameters
    ----------
    inv : array (d,) or (d, d)
        Inverse metric.  Zero diagonal entries mark fixed coordinates; in the
        dense case their rows and columns must also be zero.
    """

    def __init__(self, inv):
        inv = np.array(inv, dtype=np.float64, order="C")
        if inv.ndim not in (1, 2):
            raise ValueError("inverse metric must be a vector or a square matrix")
        self.inv = inv
        self.dense = inv.ndim == 2
        self.dim = inv.shape[0]
        if self.dense:
            if inv.shape != (self.dim, self.dim):
                raise ValueError("dense inverse metric must be square")
            self.free = np.diag(inv) > 0
            sub = inv[np.ix_(self.free, self.free)]
            self._chol = cholesky(sub, lower=True) if sub.size else sub
        else:
            self.free = inv > 0
            self._sd = np.sqrt(np.where(self.free, 1.0 / np.where(self.free, inv, 1.0), 0.0))

    @classmethod
    def identity(cls, free) -> "Metric":
        return cls(np.asarray(free, dtype=float))

    def draw(self, rng) -> np.ndarray:
        """Momentum ``p ~ N(0, M)``; always consumes ``dim`` standard normals."""
        z = rng.standard_normal(self.dim)
        if not self.dense:
            return z * self._sd
        p = np.zeros(self.dim)
        if self._chol.size:
            p[self.free] = solve_triangular(self._chol, z[self.free], lower=True, trans="T")
        return p

    def sharp(self, p) -> np.ndarray:
        """Velocity ``M^{-1} p``."""
        return self.inv @ p if self.dense else self.inv * p

    def kinetic(self, p) -> float:
        return 0.5 * float(p @ self.sharp(p))

    def diag(self) -> np.ndarray:
        return np.diag(self.inv).copy() if self.dense else self.inv.copy()


def regularized_variance(x: np.ndarray) -> np.ndarray:
    """Window variance shrunk toward ``1e-3`` as for a short window."""
    n = x.shape[0]
    var = x.var(axis=0, ddof=1) if n > 1 else np.ones(x.shape[1])
    return var * n / (n + 5.0) + 1e-3 * 5.0 / (n + 5.0)


def regularized_covariance(x: np.ndarray) -> np.ndarray:
    """Window covariance for a dense metric, regularized like
    :func:`regularized_variance`.

    Windows with no more draws than dimensions cannot support a full
    covariance; they return the diagonal estimate instead.
    """
    n, d = x.shape
    if n <= d + 1:
        return np.diag(regularized_variance(x))
    cov = np.cov(x, rowvar=False).reshape(d, d) * n / (n + 5.0)
    cov[np.diag_indices(d)] += 1e-3 * 5.0 / (n + 5.0)
    return cov


class CoefficientBlock:
    """Conditional covariance of ``(alpha0, coefficients)`` given the scales.

    Given the local scales, ``sigma`` and ``sigma_y``, the intercept and
    coefficients have a Gaussian posterior whose precision is the cell design
    Gram matrix over ``sigma_y^2`` plus the prior precisions.  Its inverse,
    mapped into each coefficient's coordinate (the coefficient itself or its
    standardized value), captures the linear ridges between main effects and
    interactions that a diagonal metric cannot.
    """

    def __init__(self, frame, spec, centered=None, prior_only=False):
        P = spec.n_coef
        occ = np.flatnonzero(frame.n > 0)
        if prior_only:
            occ = occ[:0]
        x = np.zeros((occ.size, 1 + P))
        x[:, 0] = 1.0
        if P and occ.size:
            gidx = spec.cell_coef_index(frame.variables, frame.codes[occ])
            rows = np.repeat(np.arange(occ.size), gidx.shape[1])
            x[rows, 1 + gidx.ravel()] = 1.0
        self.gram = x.T @ (frame.n[occ].astype(float)[:, None] * x)
        self.spec = spec
        self.centered = np.zeros(P, dtype=bool) if centered is None else np.asarray(centered, dtype=bool)

    def covariance(self, q) -> np.ndarray:
        spec = self.spec
        P, S = spec.n_coef, spec.n_scale
        q = np.asarray(q, dtype=float)
        u = np.clip(q[1 + P:1 + P + S], -30.0, 30.0)
        sigma = np.exp(np.clip(q[1 + P + S], -30.0, 30.0))
        sigma_y2 = np.exp(2.0 * np.clip(q[2 + P + S], -30.0, 30.0))
        scales = spec.coefficient_scales(np.exp(u)) * sigma
        h = self.gram / sigma_y2
        h[0, 0] += 1.0 / spec.intercept_scale**2
        d = np.ones(1 + P)
        d[1:] = np.where(self.centered, 1.0, scales)
        h *= np.outer(d, d)
        h[np.diag_indices(1 + P)] += np.concatenate([[0.0], np.where(self.centered, 1.0 / scales**2, 1.0)])
        return cho_solve(cho_factor(h, lower=True), np.eye(1 + P))

    def metric(self, q, tail_var, free) -> Metric:
        """Dense metric: conditional coefficient block, diagonal ``tail_var`` for the scales."""
        P = self.spec.n_coef
        d = q.shape[0]
        inv = np.zeros((d, d))
        inv[:1 + P, :1 + P] = self.covariance(q)
        inv[np.arange(1 + P, d), np.arange(1 + P, d)] = tail_var
        inv[~free, :] = 0.0
        inv[:, ~free] = 0.0
        return Metric(inv)
