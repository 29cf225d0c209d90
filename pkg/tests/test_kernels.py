import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpweight import kernels
from mrpweight.kernels import coefficient_support, kernel_for
from mrpweight.metric import CoefficientBlock, Metric, regularized_covariance, regularized_variance
from mrpweight.model import all_terms, enumerate_terms, independent_prior_variant, log_posterior

BACKENDS = ["python"] + (["cython"] if kernels.CDensityKernel is not None else [])


def spec_for(frame, variables, prior="structured"):
    spec = enumerate_terms(variables, all_terms(variables, len(variables)))
    return independent_prior_variant(spec) if prior == "independent" else spec


def central_diff(kernel, q, h=1e-6):
    g = np.empty_like(q)
    buf = np.empty_like(q)
    for i in range(q.size):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        g[i] = (kernel.logp_grad(qp, buf) - kernel.logp_grad(qm, buf)) / (2 * h)
    return g


class TestGradient:
    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("prior", ["structured", "independent"])
    @pytest.mark.parametrize("mode", ["noncentered", "centered", "mixed"])
    def test_finite_difference(self, small_frame, backend, prior, mode):
        frame, variables = small_frame
        spec = spec_for(frame, variables, prior)
        rng = np.random.default_rng(7)
        centered = {"noncentered": None, "centered": np.ones(spec.n_coef, bool),
                    "mixed": rng.random(spec.n_coef) < 0.5}[mode]
        kern = kernel_for(frame, spec, backend=backend, centered=centered)
        for _ in range(3):
            q = rng.normal(scale=0.5, size=spec.dim)
            g = np.empty(spec.dim)
            kern.logp_grad(q, g)
            fd = central_diff(kern, q)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd).max()))


class TestJacobian:
    @given(st.integers(0, 10_000))
    def test_unconstrained_density_matches_natural(self, seed):
        """Unconstrained density = natural log posterior + log|Jacobian| + const."""
        import pandas as pd
        from mrpweight.cells import VariableSpec, build_cell_frame

        rng = np.random.default_rng(seed)
        vs = [VariableSpec("a", ("p", "q", "r")), VariableSpec("b", ("s", "t"))]
        pop = pd.DataFrame({"a": rng.choice(["p", "q", "r"], 200), "b": rng.choice(["s", "t"], 200)})
        frame = build_cell_frame(pop.sample(30, random_state=1).assign(y=rng.normal(size=30)), pop, vs)
        spec = enumerate_terms(vs, ["a:b"])
        kern = kernel_for(frame, spec, backend="python")
        diffs = []
        for _ in range(3):
            q = rng.normal(scale=0.5, size=spec.dim)
            state = spec.unpack(q)
            scales = spec.coefficient_scales(state.local) * state.sigma
            log_jac = np.log(scales).sum() + np.log(state.local).sum() + math.log(state.sigma) + math.log(state.sigma_y)
            diffs.append(kern.logp_grad(q, np.empty(spec.dim)) - (log_posterior(state, frame, spec) + log_jac))
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-8)

    def test_centered_matches_natural(self, small_frame):
        frame, variables = small_frame
        spec = spec_for(frame, variables)
        cent = np.ones(spec.n_coef, bool)
        kern = kernel_for(frame, spec, backend="python", centered=cent)
        rng = np.random.default_rng(0)
        diffs = []
        for _ in range(3):
            q = rng.normal(scale=0.5, size=spec.dim)
            P = spec.n_coef
            state = spec.unpack(q)
            state.alpha = q[1:1 + P].copy()
            log_jac = np.log(state.local).sum() + math.log(state.sigma) + math.log(state.sigma_y)
            diffs.append(kern.logp_grad(q, np.empty(spec.dim)) - (log_posterior(state, frame, spec) + log_jac))
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-8)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
class TestBackendParity:
    def kernels(self, frame, spec, centered=None):
        return (kernel_for(frame, spec, backend="python", centered=centered),
                kernel_for(frame, spec, backend="cython", centered=centered))

    def test_logp_grad(self, small_frame):
        frame, variables = small_frame
        spec = spec_for(frame, variables)
        kp, kc = self.kernels(frame, spec)
        rng = np.random.default_rng(1)
        for _ in range(5):
            q = rng.normal(size=spec.dim)
            gp, gc = np.empty(spec.dim), np.empty(spec.dim)
            assert kp.logp_grad(q, gp) == pytest.approx(kc.logp_grad(q, gc), rel=1e-12)
            np.testing.assert_allclose(gp, gc, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("dense", [False, True])
    @pytest.mark.parametrize("centered", [False, True])
    def test_transition(self, small_frame, dense, centered):
        frame, variables = small_frame
        spec = spec_for(frame, variables)
        cent = np.ones(spec.n_coef, bool) if centered else None
        kp, kc = self.kernels(frame, spec, cent)
        rng = np.random.default_rng(2)
        q = rng.normal(scale=0.3, size=spec.dim)
        if dense:
            a = rng.normal(size=(spec.dim, spec.dim)) * 0.1
            metric = Metric(a @ a.T + np.eye(spec.dim))
        else:
            metric = Metric(rng.uniform(0.5, 1.5, spec.dim))
        g = np.empty(spec.dim)
        lp = kp.logp_grad(q, g)
        outs = []
        for k in (kp, kc):
            r = np.random.default_rng(99)
            state = (q.copy(), lp, g.copy())
            for _ in range(5):
                res = k.transition(*state, 0.05, metric, r, 8)
                state = res[:3]
            outs.append((res, r.random()))
        (rp, up), (rc, uc) = outs
        np.testing.assert_allclose(rp[0], rc[0], rtol=1e-9, atol=1e-9)
        assert rp[3] == pytest.approx(rc[3], rel=1e-9)
        assert rp[4:] == rc[4:]
        assert up == uc


class TestLeapfrog:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_reversible(self, small_frame, backend):
        frame, variables = small_frame
        spec = spec_for(frame, variables)
        kern = kernel_for(frame, spec, backend=backend)
        rng = np.random.default_rng(3)
        metric = Metric(rng.uniform(0.5, 1.5, spec.dim))
        q0 = rng.normal(scale=0.3, size=spec.dim)
        p0 = rng.normal(size=spec.dim)
        q, p, g = q0.copy(), p0.copy(), np.empty(spec.dim)
        kern.logp_grad(q, g)
        for _ in range(20):
            kern.leapfrog(q, p, g, 0.01, metric)
        p = -p
        for _ in range(20):
            kern.leapfrog(q, p, g, 0.01, metric)
        np.testing.assert_allclose(q, q0, atol=1e-9)
        np.testing.assert_allclose(-p, p0, atol=1e-9)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_energy_error_second_order(self, small_frame, backend):
        frame, variables = small_frame
        spec = spec_for(frame, variables)
        kern = kernel_for(frame, spec, backend=backend)
        rng = np.random.default_rng(4)
        metric = Metric(np.ones(spec.dim))
        q0 = rng.normal(scale=0.3, size=spec.dim)
        p0 = rng.normal(size=spec.dim)

        def energy_err(eps, T=0.04):
            q, p, g = q0.copy(), p0.copy(), np.empty(spec.dim)
            h0 = -kern.logp_grad(q, g) + metric.kinetic(p)
            for _ in range(int(round(T / eps))):
                lp = kern.leapfrog(q, p, g, eps, metric)
            return abs(-lp + metric.kinetic(p) - h0)

        ratio = energy_err(0.002) / energy_err(0.001)
        assert 3.0 < ratio < 5.0


class TestSupport:
    def test_counts_units_per_coefficient(self, small_frame):
        frame, variables = small_frame
        spec = spec_for(frame, variables)
        sup = coefficient_support(frame, spec)
        a = frame.column("a")
        for k, lab in enumerate(variables[0].levels):
            assert sup[spec.coef_index("a", [lab])] == frame.n[a == k].sum()
        assert sup[spec.term_slice("a:b")].sum() == frame.n_total
