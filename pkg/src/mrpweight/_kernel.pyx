# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled log density, gradient and leapfrog on the unconstrained space.

Same contract as ``_kernel_py.DensityKernel``; loops over cells, terms and
coefficients in C.
"""
import numpy as np

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, fmax, isfinite, log, log1p
from numpy.random cimport bitgen_t
from scipy.linalg.cython_blas cimport dsymv


cdef inline double _logaddexp(double a, double b) noexcept nogil:
    cdef double m = fmax(a, b)
    return m + log(exp(a - m) + exp(b - m))


cdef class DensityKernel:
    cdef readonly int n_coef, n_scale, n_cells, n_terms, width, dim
    cdef readonly double alpha0_sd, sigma_scale, sigma_y_scale, n_total
    cdef double[::1] n, ybar, ss
    cdef int[:, ::1] gidx
    cdef int[:, ::1] sidx
    cdef unsigned char[::1] cent
    cdef double[::1] alpha, scale, logs, galpha, r
    # NUTS workspace: per-depth subtree buffers (raw and sharp edge momenta),
    # trajectory edges, top-level sums
    cdef double[:, ::1] w_q, w_g, w_rho, w_pb, w_pe, w_sb, w_se, e_q, e_p, e_g, top
    cdef double[::1] w_logw, w_lp, imass, s_q, s_g, v
    cdef double[:, ::1] dmass
    cdef object metric_ref
    cdef bitgen_t* bitgen
    cdef double H0, sum_metro
    cdef int n_leap, divergent, n_levels, dense

    backend = "cython"

    def __init__(self, n, ybar, ss, gidx, sidx, n_scale, alpha0_sd=100.0,
                 sigma_scale=1.0, sigma_y_scale=5.0, centered=None):
        self.n = np.array(n, dtype=np.float64)
        self.ybar = np.array(ybar, dtype=np.float64)
        self.ss = np.array(ss, dtype=np.float64)
        self.n_cells = self.n.shape[0]
        g = np.array(gidx, dtype=np.int32, order="C")
        self.gidx = g
        self.n_terms = g.shape[1]
        s = np.array(sidx, dtype=np.int32, order="C")
        if s.ndim != 2:
            s = s.reshape(-1, 1)
        self.sidx = s
        self.n_coef = s.shape[0]
        self.width = s.shape[1]
        self.n_scale = n_scale
        self.dim = self.n_coef + self.n_scale + 3
        self.alpha0_sd = alpha0_sd
        self.sigma_scale = sigma_scale
        self.sigma_y_scale = sigma_y_scale
        self.n_total = float(np.sum(self.n))
        self.alpha = np.zeros(max(self.n_coef, 1))
        self.scale = np.zeros(max(self.n_coef, 1))
        self.logs = np.zeros(max(self.n_coef, 1))
        c = np.zeros(max(self.n_coef, 1), dtype=np.uint8)
        if centered is not None and self.n_coef:
            c[: self.n_coef] = np.asarray(centered, dtype=bool)
        self.cent = c
        self.galpha = np.zeros(max(self.n_coef, 1))
        self.r = np.zeros(max(self.n_cells, 1))

    cdef double _logp_grad(self, double[::1] q, double[::1] grad) noexcept nogil:
        cdef int P = self.n_coef, S = self.n_scale, T = self.n_terms, W = self.width
        cdef int i, t, c, k, idx
        cdef double a0 = q[0]
        cdef double log_sigma = q[1 + P + S]
        cdef double log_sigma_y = q[2 + P + S]
        cdef double sigma = exp(log_sigma)
        cdef double sigma_y = exp(log_sigma_y)
        cdef double inv_var = exp(-2.0 * log_sigma_y)
        cdef double ls, theta, diff, quad_sum = 0.0, r_sum = 0.0, lp, zc, uk, e2
        cdef double gsig = 0.0, ga, x, xy, inv

        for c in range(P):
            ls = 0.0
            for k in range(W):
                idx = self.sidx[c, k]
                if idx >= 0:
                    ls += q[1 + P + idx]
            self.logs[c] = ls + log_sigma
            self.scale[c] = exp(ls) * sigma
            if self.cent[c]:
                self.alpha[c] = q[1 + c]
            else:
                self.alpha[c] = self.scale[c] * q[1 + c]
            self.galpha[c] = 0.0

        for i in range(self.n_cells):
            theta = a0
            for t in range(T):
                theta += self.alpha[self.gidx[i, t]]
            diff = self.ybar[i] - theta
            quad_sum += self.ss[i] + self.n[i] * diff * diff
            self.r[i] = self.n[i] * diff * inv_var
            r_sum += self.r[i]
            for t in range(T):
                self.galpha[self.gidx[i, t]] += self.r[i]

        lp = -self.n_total * log_sigma_y - 0.5 * quad_sum * inv_var
        lp -= 0.5 * (a0 / self.alpha0_sd) * (a0 / self.alpha0_sd)
        grad[0] = r_sum - a0 / (self.alpha0_sd * self.alpha0_sd)

        for k in range(S):
            uk = q[1 + P + k]
            e2 = exp(2.0 * uk)
            lp += uk - 0.5 * e2
            grad[1 + P + k] = 1.0 - e2

        for c in range(P):
            zc = q[1 + c]
            if self.cent[c]:
                # coordinate is the coefficient itself: N(0, scale^2) prior
                inv = 1.0 / (self.scale[c] * self.scale[c])
                lp -= self.logs[c] + 0.5 * zc * zc * inv
                grad[1 + c] = self.galpha[c] - zc * inv
                ga = zc * zc * inv - 1.0
            else:
                lp -= 0.5 * zc * zc
                grad[1 + c] = self.galpha[c] * self.scale[c] - zc
                ga = self.galpha[c] * self.alpha[c]
            gsig += ga
            for k in range(W):
                idx = self.sidx[c, k]
                if idx >= 0:
                    grad[1 + P + idx] += ga

        x = sigma / self.sigma_scale
        lp += log_sigma - log1p(x * x)
        grad[1 + P + S] = gsig + 1.0 - 2.0 * x * x / (1.0 + x * x)
        xy = sigma_y / self.sigma_y_scale
        lp += log_sigma_y - log1p(xy * xy)
        grad[2 + P + S] = -self.n_total + quad_sum * inv_var + 1.0 - 2.0 * xy * xy / (1.0 + xy * xy)
        return lp

    def logp_grad(self, double[::1] q, double[::1] grad):
        return self._logp_grad(q, grad)

    def leapfrog(self, double[::1] q, double[::1] p, double[::1] grad, double eps, metric):
        """One leapfrog step in place under ``metric``; returns the new log density."""
        cdef int i, d = self.dim
        cdef double lp
        if self.v is None or self.v.shape[0] != d:
            self.v = np.zeros(d)
        self._set_metric(metric)
        with nogil:
            for i in range(d):
                p[i] += 0.5 * eps * grad[i]
            self._sharp(p, self.v)
            for i in range(d):
                q[i] += eps * self.v[i]
            lp = self._logp_grad(q, grad)
            for i in range(d):
                p[i] += 0.5 * eps * grad[i]
        return lp

    # ------------------------------------------------------------ NUTS
    cdef void _sharp(self, double[::1] p, double[::1] out) noexcept nogil:
        """out = M^{-1} p"""
        cdef int i, d = self.dim, one = 1
        cdef double alpha = 1.0, beta = 0.0
        cdef char uplo = b'U'
        if self.dense:
            dsymv(&uplo, &d, &alpha, &self.dmass[0, 0], &d, &p[0], &one, &beta, &out[0], &one)
        else:
            for i in range(d):
                out[i] = self.imass[i] * p[i]

    cdef inline double _dot_sum(self, double[::1] s, double[::1] a, double[::1] b) noexcept nogil:
        cdef int i
        cdef double acc = 0.0
        for i in range(self.dim):
            acc += s[i] * (a[i] + b[i])
        return acc

    cdef inline int _no_uturn(self, double[::1] sm, double[::1] sp, double[::1] a,
                              double[::1] b) noexcept nogil:
        # sm, sp: sharp momenta at the two ends; a + b: momentum sum between them
        return self._dot_sum(sp, a, b) > 0.0 and self._dot_sum(sm, a, b) > 0.0

    cdef int _leaf(self, int e, int lvl, double eps) noexcept nogil:
        cdef int i, d = self.dim
        cdef double lp, H, kin = 0.0, delta
        for i in range(d):
            self.e_p[e, i] += 0.5 * eps * self.e_g[e, i]
        self._sharp(self.e_p[e], self.v)
        for i in range(d):
            self.e_q[e, i] += eps * self.v[i]
        lp = self._logp_grad(self.e_q[e], self.e_g[e])
        for i in range(d):
            self.e_p[e, i] += 0.5 * eps * self.e_g[e, i]
        self._sharp(self.e_p[e], self.v)
        for i in range(d):
            kin += self.v[i] * self.e_p[e, i]
        self.n_leap += 1
        H = -lp + 0.5 * kin
        if not isfinite(H):
            self.divergent = 1
            return 0
        if H - self.H0 > 1000.0:
            self.divergent = 1
            return 0
        delta = self.H0 - H
        self.sum_metro += 1.0 if delta > 0.0 else exp(delta)
        self.w_logw[lvl] = delta
        self.w_lp[lvl] = lp
        for i in range(d):
            self.w_q[lvl, i] = self.e_q[e, i]
            self.w_g[lvl, i] = self.e_g[e, i]
            self.w_rho[lvl, i] = self.e_p[e, i]
            self.w_pb[lvl, i] = self.e_p[e, i]
            self.w_pe[lvl, i] = self.e_p[e, i]
            self.w_sb[lvl, i] = self.v[i]
            self.w_se[lvl, i] = self.v[i]
        return 1

    cdef int _build(self, int depth, int e, int lvl, double eps) noexcept nogil:
        cdef int i, d = self.dim, ok
        cdef int nx = lvl + 1
        cdef double lw
        if depth == 0:
            return self._leaf(e, lvl, eps)
        if not self._build(depth - 1, e, nx, eps):
            return 0
        self.w_logw[lvl] = self.w_logw[nx]
        self.w_lp[lvl] = self.w_lp[nx]
        self.w_q[lvl, :] = self.w_q[nx, :]
        self.w_g[lvl, :] = self.w_g[nx, :]
        self.w_rho[lvl, :] = self.w_rho[nx, :]
        self.w_pb[lvl, :] = self.w_pb[nx, :]
        self.w_pe[lvl, :] = self.w_pe[nx, :]
        self.w_sb[lvl, :] = self.w_sb[nx, :]
        self.w_se[lvl, :] = self.w_se[nx, :]
        if not self._build(depth - 1, e, nx, eps):
            return 0
        lw = _logaddexp(self.w_logw[lvl], self.w_logw[nx])
        if self.bitgen.next_double(self.bitgen.state) < exp(self.w_logw[nx] - lw):
            self.w_lp[lvl] = self.w_lp[nx]
            self.w_q[lvl, :] = self.w_q[nx, :]
            self.w_g[lvl, :] = self.w_g[nx, :]
        self.w_logw[lvl] = lw
        ok = (self._no_uturn(self.w_sb[lvl], self.w_se[nx], self.w_rho[lvl], self.w_rho[nx])
              and self._no_uturn(self.w_sb[lvl], self.w_sb[nx], self.w_rho[lvl], self.w_pb[nx])
              and self._no_uturn(self.w_se[lvl], self.w_se[nx], self.w_rho[nx], self.w_pe[lvl]))
        for i in range(d):
            self.w_rho[lvl, i] += self.w_rho[nx, i]
            self.w_pe[lvl, i] = self.w_pe[nx, i]
            self.w_se[lvl, i] = self.w_se[nx, i]
        return ok

    def _workspace(self, int max_depth, rng):
        levels = max_depth + 2
        d = self.dim
        if self.n_levels != levels:
            self.w_q = np.zeros((levels, d))
            self.w_g = np.zeros((levels, d))
            self.w_rho = np.zeros((levels, d))
            self.w_pb = np.zeros((levels, d))
            self.w_pe = np.zeros((levels, d))
            self.w_sb = np.zeros((levels, d))
            self.w_se = np.zeros((levels, d))
            self.w_logw = np.zeros(levels)
            self.w_lp = np.zeros(levels)
            self.e_q = np.zeros((2, d))
            self.e_p = np.zeros((2, d))
            self.e_g = np.zeros((2, d))
            self.top = np.zeros((11, d))
            self.s_q = np.zeros(d)
            self.s_g = np.zeros(d)
            self.v = np.zeros(d)
            self.n_levels = levels
        capsule = rng.bit_generator.capsule
        self.bitgen = <bitgen_t*> PyCapsule_GetPointer(capsule, "BitGenerator")

    def _set_metric(self, metric):
        if metric is self.metric_ref:
            return
        inv = np.ascontiguousarray(metric.inv, dtype=np.float64)
        if inv.shape[0] != self.dim:
            raise ValueError("metric dimension does not match the kernel")
        self.dense = 1 if inv.ndim == 2 else 0
        if self.dense:
            self.dmass = inv.copy()
            self.imass = np.diag(inv).copy()
        else:
            self.dmass = np.zeros((1, 1))
            self.imass = inv.copy()
        self.metric_ref = metric

    def transition(self, q, double lp, g, double eps, metric, rng, int max_depth):
        """One multinomial NUTS transition.

        ``metric`` is a :class:`mrpweight.metric.Metric`.  Momentum is drawn by
        the metric and uniform variates come straight from ``rng``'s bit
        generator, in the same order as the pure-Python implementation.
        Returns ``(q, lp, grad, accept_stat, depth, divergent, n_leapfrog)``.
        """
        cdef int i, d = self.dim, depth = 0, valid, fwd
        cdef double log_w = 0.0, kin = 0.0, s_lp = lp
        # rows of `top`: rho, rho_fwd, rho_bck, p_ff, p_fb, p_bf, p_bb,
        # then the sharp versions s_ff, s_fb, s_bf, s_bb
        cdef double[:, ::1] t
        self._workspace(max_depth, rng)
        self._set_metric(metric)
        cdef double[::1] p0 = np.ascontiguousarray(metric.draw(rng), dtype=np.float64)
        cdef double[::1] qv = np.array(q, dtype=np.float64)
        cdef double[::1] gv = np.array(g, dtype=np.float64)
        t = self.top
        with nogil:
            self._sharp(p0, self.v)
            for i in range(d):
                kin += self.v[i] * p0[i]
            self.H0 = -lp + 0.5 * kin
            self.n_leap = 0
            self.sum_metro = 0.0
            self.divergent = 0
            for i in range(d):
                self.e_q[0, i] = qv[i]
                self.e_q[1, i] = qv[i]
                self.e_g[0, i] = gv[i]
                self.e_g[1, i] = gv[i]
                self.e_p[0, i] = p0[i]
                self.e_p[1, i] = p0[i]
                self.s_q[i] = qv[i]
                self.s_g[i] = gv[i]
                t[0, i] = p0[i]
                t[1, i] = p0[i]
                t[2, i] = p0[i]
                t[3, i] = p0[i]
                t[4, i] = p0[i]
                t[5, i] = p0[i]
                t[6, i] = p0[i]
                t[7, i] = self.v[i]
                t[8, i] = self.v[i]
                t[9, i] = self.v[i]
                t[10, i] = self.v[i]
            while depth < max_depth:
                fwd = self.bitgen.next_double(self.bitgen.state) > 0.5
                if fwd:
                    t[2, :] = t[0, :]
                    t[5, :] = t[3, :]
                    t[9, :] = t[7, :]
                    valid = self._build(depth, 0, 0, eps)
                    if valid:
                        t[1, :] = self.w_rho[0, :]
                        t[4, :] = self.w_pb[0, :]
                        t[3, :] = self.w_pe[0, :]
                        t[8, :] = self.w_sb[0, :]
                        t[7, :] = self.w_se[0, :]
                else:
                    t[1, :] = t[0, :]
                    t[4, :] = t[6, :]
                    t[8, :] = t[10, :]
                    valid = self._build(depth, 1, 0, -eps)
                    if valid:
                        t[2, :] = self.w_rho[0, :]
                        t[5, :] = self.w_pb[0, :]
                        t[6, :] = self.w_pe[0, :]
                        t[9, :] = self.w_sb[0, :]
                        t[10, :] = self.w_se[0, :]
                if not valid:
                    break
                depth += 1
                if (self.w_logw[0] > log_w
                        or self.bitgen.next_double(self.bitgen.state) < exp(self.w_logw[0] - log_w)):
                    s_lp = self.w_lp[0]
                    self.s_q[:] = self.w_q[0, :]
                    self.s_g[:] = self.w_g[0, :]
                log_w = _logaddexp(log_w, self.w_logw[0])
                for i in range(d):
                    t[0, i] = t[2, i] + t[1, i]
                if not (self._no_uturn(t[10], t[7], t[2], t[1])
                        and self._no_uturn(t[10], t[8], t[2], t[4])
                        and self._no_uturn(t[9], t[7], t[1], t[5])):
                    break
        accept = self.sum_metro / max(self.n_leap, 1)
        return (np.array(self.s_q), s_lp, np.array(self.s_g), accept, depth,
                bool(self.divergent), self.n_leap)
