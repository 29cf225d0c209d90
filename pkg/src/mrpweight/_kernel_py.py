"""Pure-numpy log density, gradient and leapfrog on the unconstrained space.

Mirrors the compiled ``_kernel`` extension; used when it is not built or
when ``MRPWEIGHT_PURE_PYTHON`` is set.
"""
import math

import numpy as np

_EXP_MAX = 300.0


class DensityKernel:
    """Unconstrained log posterior (up to a constant) and its gradient.

    Parameters
    ----------
    n, ybar, ss : arrays over occupied cells
        Sample count, mean and within-cell sum of squares.
    gidx : int array (cells, terms)
        Global coefficient index of each cell's level combination per term.
    sidx : int array (n_coef, width)
        Local-scale indices whose product is each coefficient's scale;
        ``-1`` pads.
    n_scale : int
    alpha0_sd, sigma_scale, sigma_y_scale : float
        Prior scales of the intercept, coefficient error scale and unit scale.
    centered : bool array (n_coef,), optional
        Coefficients whose coordinate is the coefficient itself rather than
        its standardized value ``alpha / scale``.
    """

    backend = "python"

    def __init__(self, n, ybar, ss, gidx, sidx, n_scale, alpha0_sd=100.0,
                 sigma_scale=1.0, sigma_y_scale=5.0, centered=None):
        self.n = np.ascontiguousarray(n, dtype=float)
        self.ybar = np.ascontiguousarray(ybar, dtype=float)
        self.ss = np.ascontiguousarray(ss, dtype=float)
        self.gidx = np.ascontiguousarray(gidx, dtype=np.int32)
        sidx = np.ascontiguousarray(sidx, dtype=np.int32)
        self.n_coef = sidx.shape[0]
        self.n_scale = int(n_scale)
        self.sidx = np.where(sidx < 0, self.n_scale, sidx)
        self.width = sidx.shape[1] if sidx.ndim == 2 else 0
        self.dim = self.n_coef + self.n_scale + 3
        self.alpha0_sd = float(alpha0_sd)
        self.sigma_scale = float(sigma_scale)
        self.sigma_y_scale = float(sigma_y_scale)
        self.n_total = float(self.n.sum())
        self.cent = (np.zeros(self.n_coef, dtype=bool) if centered is None
                     else np.asarray(centered, dtype=bool).copy())
        self._flat_g = self.gidx.ravel()
        self._flat_s = self.sidx.ravel()

    def logp_grad(self, q, grad):
        P, S = self.n_coef, self.n_scale
        a0 = q[0]
        z = q[1:1 + P]
        u = q[1 + P:1 + P + S]
        log_sigma = q[1 + P + S]
        log_sigma_y = q[2 + P + S]
        # clamp exponents so wild leapfrog steps give inf/nan density, not errors
        sigma = math.exp(min(log_sigma, _EXP_MAX))
        sigma_y = math.exp(min(log_sigma_y, _EXP_MAX))
        inv_var = math.exp(min(-2.0 * log_sigma_y, _EXP_MAX))

        u_pad = np.append(u, 0.0)
        logscale = u_pad[self.sidx].sum(axis=1) if P else np.empty(0)
        scale = np.exp(np.minimum(logscale, _EXP_MAX)) * sigma
        cent = self.cent
        alpha = np.where(cent, z, scale * z)

        T = self.gidx.shape[1]
        theta = a0 + (alpha[self.gidx].sum(axis=1) if T else 0.0)
        diff = self.ybar - theta
        quad = self.ss + self.n * diff * diff
        r = self.n * diff * inv_var

        lp = -self.n_total * log_sigma_y - 0.5 * quad.sum() * inv_var
        lp -= 0.5 * (a0 / self.alpha0_sd) ** 2
        # centered coordinates are the coefficients themselves: N(0, scale^2)
        inv = 1.0 / (scale * scale)
        prior = np.where(cent, (logscale + log_sigma) + 0.5 * z * z * inv, 0.5 * z * z)
        lp -= float(prior.sum())
        lp += float(np.sum(u - 0.5 * np.exp(np.minimum(2.0 * u, _EXP_MAX))))
        x = sigma / self.sigma_scale
        lp += log_sigma - math.log1p(x * x)
        xy = sigma_y / self.sigma_y_scale
        lp += log_sigma_y - math.log1p(xy * xy)

        grad[0] = r.sum() - a0 / self.alpha0_sd ** 2
        if P:
            galpha = np.bincount(self._flat_g, weights=np.repeat(r, T), minlength=P) if T else np.zeros(P)
            grad[1:1 + P] = np.where(cent, galpha - z * inv, galpha * scale - z)
            ga = np.where(cent, z * z * inv - 1.0, galpha * alpha)
            gu = np.bincount(self._flat_s, weights=np.repeat(ga, self.width), minlength=S + 1)[:S]
            grad[1 + P:1 + P + S] = gu + 1.0 - np.exp(np.minimum(2.0 * u, _EXP_MAX))
            gsig = ga.sum()
        else:
            grad[1 + P:1 + P + S] = 1.0 - np.exp(np.minimum(2.0 * u, _EXP_MAX))
            gsig = 0.0
        grad[1 + P + S] = gsig + 1.0 - 2.0 * x * x / (1.0 + x * x)
        grad[2 + P + S] = -self.n_total + quad.sum() * inv_var + 1.0 - 2.0 * xy * xy / (1.0 + xy * xy)
        return float(lp)

    def leapfrog(self, q, p, grad, eps, metric):
        """One leapfrog step in place under ``metric``; returns the new log density."""
        p += 0.5 * eps * grad
        q += eps * metric.sharp(p)
        lp = self.logp_grad(q, grad)
        p += 0.5 * eps * grad
        return lp

    # ------------------------------------------------------------ NUTS
    def transition(self, q, lp, g, eps, metric, rng, max_depth):
        """One multinomial NUTS transition.

        Returns ``(q, lp, grad, accept_stat, depth, divergent, n_leapfrog)``.
        Momentum is drawn by ``metric`` and uniform variates with
        ``rng.random()``, in the same order as the compiled kernel.
        """
        return _Trajectory(self, metric, rng).run(q, lp, g, eps, max_depth)


class _Sub:
    """Summary of a subtree: multinomial weight, proposal, momentum sum and edges.

    ``s_beg`` and ``s_end`` are the sharp (velocity) versions of the edge momenta.
    """

    __slots__ = ("log_w", "q", "lp", "g", "rho", "p_beg", "p_end", "s_beg", "s_end")

    def __init__(self, log_w, q, lp, g, rho, p_beg, p_end, s_beg, s_end):
        self.log_w, self.q, self.lp, self.g = log_w, q, lp, g
        self.rho, self.p_beg, self.p_end = rho, p_beg, p_end
        self.s_beg, self.s_end = s_beg, s_end


def _no_uturn(s_minus, s_plus, rho):
    return float(s_plus @ rho) > 0.0 and float(s_minus @ rho) > 0.0


class _Trajectory:
    def __init__(self, kernel, metric, rng):
        self.kernel = kernel
        self.metric = metric
        self.rng = rng
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def _leaf(self, z, eps):
        q, p, g = z
        lp = self.kernel.leapfrog(q, p, g, eps, self.metric)
        self.n_leapfrog += 1
        s = self.metric.sharp(p)
        H = -lp + 0.5 * float(p @ s)
        if not math.isfinite(H) or H - self.H0 > 1000.0:
            self.divergent = True
            return None
        d = self.H0 - H
        self.sum_metro += 1.0 if d > 0 else math.exp(d)
        pc = p.copy()
        return _Sub(d, q.copy(), lp, g.copy(), pc, pc, pc, s, s)

    def _build(self, depth, z, eps):
        """Returns the subtree summary, or None if it diverged or U-turned."""
        if depth == 0:
            return self._leaf(z, eps)
        init = self._build(depth - 1, z, eps)
        if init is None:
            return None
        final = self._build(depth - 1, z, eps)
        if final is None:
            return None
        log_w = np.logaddexp(init.log_w, final.log_w)
        pick = final if self.rng.random() < math.exp(final.log_w - log_w) else init
        ok = (
            _no_uturn(init.s_beg, final.s_end, init.rho + final.rho)
            and _no_uturn(init.s_beg, final.s_beg, init.rho + final.p_beg)
            and _no_uturn(init.s_end, final.s_end, final.rho + init.p_end)
        )
        if not ok:
            return None
        return _Sub(log_w, pick.q, pick.lp, pick.g, init.rho + final.rho,
                    init.p_beg, final.p_end, init.s_beg, final.s_end)

    def run(self, q, lp, g, eps, max_depth):
        p = np.asarray(self.metric.draw(self.rng), dtype=float)
        s = self.metric.sharp(p)
        self.H0 = -lp + 0.5 * float(p @ s)
        fwd = [np.array(q, dtype=float), p.copy(), np.array(g, dtype=float)]
        bck = [np.array(q, dtype=float), p.copy(), np.array(g, dtype=float)]
        rho = rho_fwd = rho_bck = p
        p_ff = p_fb = p_bf = p_bb = p
        s_ff = s_fb = s_bf = s_bb = s
        log_w = 0.0
        sample = (np.array(q, dtype=float), lp, np.array(g, dtype=float))
        depth = 0
        while depth < max_depth:
            if self.rng.random() > 0.5:
                rho_bck, p_bf, s_bf = rho, p_ff, s_ff
                sub = self._build(depth, fwd, eps)
                if sub is not None:
                    rho_fwd, p_fb, p_ff = sub.rho, sub.p_beg, sub.p_end
                    s_fb, s_ff = sub.s_beg, sub.s_end
            else:
                rho_fwd, p_fb, s_fb = rho, p_bb, s_bb
                sub = self._build(depth, bck, -eps)
                if sub is not None:
                    rho_bck, p_bf, p_bb = sub.rho, sub.p_beg, sub.p_end
                    s_bf, s_bb = sub.s_beg, sub.s_end
            if sub is None:
                break
            depth += 1
            if sub.log_w > log_w or self.rng.random() < math.exp(sub.log_w - log_w):
                sample = (sub.q, sub.lp, sub.g)
            log_w = np.logaddexp(log_w, sub.log_w)
            rho = rho_bck + rho_fwd
            if not (
                _no_uturn(s_bb, s_ff, rho)
                and _no_uturn(s_bb, s_fb, rho_bck + p_fb)
                and _no_uturn(s_bf, s_ff, rho_fwd + p_bf)
            ):
                break
        accept = self.sum_metro / max(self.n_leapfrog, 1)
        q, lp, g = sample
        return q.copy(), lp, g.copy(), accept, depth, self.divergent, self.n_leapfrog
