import numpy as np
import pytest

from lamnlab.blockcov import ktilde_build, psi_dense, spd_inverse
from lamnlab.errors import ConfigError
from lamnlab.model import BUILTINS, builtin_model, projection_frame
from lamnlab.score import (b_family, b_matrices, complete_terms, expansion_complete, expansion_partial,
                           gamma_block, lstat, partial_terms, score_blocks, u_v_stats, write_score_blocks)
from lamnlab.simulate import observe, simulate_path

STATEFUL = {
    "langevin": {"state": "sine", "amp": 0.3},
    "langevin-partial-velocity": {"state": "sine", "amp": 0.3},
    "integrated": {"state": "sqrtquad"},
    "shared-noise": {"state": "sine", "amp": 0.2},
    "factor": {"amp": 0.4},
    "scaled-factor": {"amp": 0.4},
    "stochvol-common": {"amp": 0.4},
    "stochvol-diagonal": {"state": "sine", "amp": 0.3},
}


def probe(spec, rng):
    z = rng.normal(size=spec.m)
    th = spec.lower + (spec.upper - spec.lower) * rng.uniform(0.2, 0.8, size=spec.d)
    return z, th


def five_point(f, th, i, h):
    e = np.zeros_like(th)
    e[i] = h
    return (-f(th + 2 * e) + 8 * f(th + e) - 8 * f(th - e) + f(th - 2 * e)) / (12 * h)


class TestCompleteScore:
    @pytest.mark.parametrize("theta", [1.0, 2.0])
    def test_zero_increment(self, theta):
        spec, _ = builtin_model("langevin", {})
        assert abs(lstat([0.0, 0.0], [0.0, 0.0], [theta], spec, 0) + 2.0 / theta) < 1e-12

    def test_gamma_block_langevin(self):
        spec, _ = builtin_model("langevin", {})
        assert abs(gamma_block([0.3, 0.1], [1.0], spec)[0, 0] - 4.0) < 1e-12

    def test_gamma_block_parameter_free(self):
        import dataclasses
        spec, _ = builtin_model("langevin", {})
        free = dataclasses.replace(spec, da_tilde=lambda z, t: np.zeros(np.shape(z)[:-1] + (1, 1, 1)))
        assert np.all(gamma_block([0.0, 0.0], [1.0], free) == 0.0)

    @pytest.mark.parametrize("name", sorted(BUILTINS))
    def test_trace_identity(self, name, rng):
        # E[l] = tr(B^T K^-1 K) - tr B = 0 exactly
        spec, _ = builtin_model(name, STATEFUL[name])
        for _ in range(10):
            z, th = probe(spec, rng)
            kt = ktilde_build(spec, z, th)
            B = b_matrices(spec, z, th)
            for i in range(spec.d):
                assert abs(np.trace(B[i].T @ kt.inv @ kt.dense) - np.trace(B[i])) < 1e-9 * max(1, np.abs(B).max())

    @pytest.mark.parametrize("name", sorted(BUILTINS))
    def test_derivative_of_ktilde(self, name, rng):
        spec, _ = builtin_model(name, STATEFUL[name])
        for _ in range(50):
            z, th = probe(spec, rng)
            fam = b_family(spec, z, th)
            K = ktilde_build(spec, z, th).dense
            for i in range(spec.d):
                h = 1e-3 * max(1.0, abs(th[i]))
                fd = five_point(lambda t: ktilde_build(spec, z, t).dense, th, i, h)
                exact = fam.B[i] @ K + K @ fam.B[i].T
                assert np.max(np.abs(fd - exact)) <= 1e-8 * max(1.0, np.abs(exact).max())

    @pytest.mark.parametrize("name", ["langevin", "shared-noise", "factor", "stochvol-common"])
    def test_score_is_log_density_derivative(self, name, rng):
        spec, _ = builtin_model(name, STATEFUL[name])
        for _ in range(10):
            z, th = probe(spec, rng)
            u = rng.normal(size=spec.m)

            def half_nll(t):
                kt = ktilde_build(spec, z, t)
                return -0.5 * (kt.logdet + u @ kt.inv @ u)

            ell, _ = complete_terms(spec, u, z, th)
            for i in range(spec.d):
                fd = five_point(half_nll, th, i, 1e-3 * max(1.0, abs(th[i])))
                assert abs(fd - ell[i]) <= 1e-7 * max(1.0, abs(ell[i]))

    @pytest.mark.parametrize("name,theta", [("langevin", [1.0]), ("factor", [0.3, -0.2]),
                                            ("stochvol-diagonal", [1.5, 0.8])])
    def test_monte_carlo_moments(self, name, theta, rng):
        params = dict(STATEFUL[name], d=len(theta))
        if name == "stochvol-diagonal":
            params["c22"] = 1.0
        spec, _ = builtin_model(name, params)
        z = rng.normal(size=spec.m)
        th = np.array(theta)
        K = ktilde_build(spec, z, th).dense
        u = rng.multivariate_normal(np.zeros(spec.m), K, size=100_000)
        ell, gam = complete_terms(spec, u, z, th)
        N = len(ell)
        se_mean = ell.std(axis=0, ddof=1) / np.sqrt(N)
        assert np.all(np.abs(ell.mean(axis=0)) < 3 * se_mean)
        prods = ell[:, :, None] * ell[:, None, :]
        se_cov = prods.std(axis=0, ddof=1) / np.sqrt(N)
        assert np.all(np.abs(prods.mean(axis=0) - gam) < 3 * se_cov + 1e-12)


class TestPartialScore:
    def _setup(self, name):
        spec, scheme = builtin_model(name, STATEFUL[name])
        return spec, projection_frame(scheme)

    @pytest.mark.parametrize("name", ["integrated", "stochvol-common", "stochvol-diagonal"])
    def test_score_is_log_density_derivative(self, name, rng):
        spec, fr = self._setup(name)
        e = 5
        for _ in range(5):
            z, th = probe(spec, rng)
            X = rng.normal(size=e * fr.q)

            def half_nll(t):
                inv, ld = spd_inverse(psi_dense(spec.aat(z, t), fr, 1, 1, e))
                return -0.5 * (ld + X @ inv @ X)

            U = partial_terms(spec, fr, X, z, th, e)[0]
            fd = five_point(half_nll, th, 0, 1e-3 * max(1.0, abs(th[0])))
            assert abs(fd - U[0]) <= 1e-7 * max(1.0, abs(U[0]))

    @pytest.mark.parametrize("name", ["integrated", "stochvol-common"])
    def test_monte_carlo_moments(self, name, rng):
        spec, fr = self._setup(name)
        e = 7
        z, th = probe(spec, rng)
        P = psi_dense(spec.aat(z, th), fr, 1, 1, e)
        X = rng.multivariate_normal(np.zeros(P.shape[0]), P, size=100_000)
        U, V, _, _ = partial_terms(spec, fr, X, z, th, e)
        N = len(U)
        assert abs(U[:, 0].mean()) < 3 * U[:, 0].std(ddof=1) / np.sqrt(N)
        sq = U[:, 0] ** 2
        assert abs(sq.mean() - V[0, 0]) < 3 * sq.std(ddof=1) / np.sqrt(N)

    def test_parameter_free(self):
        import dataclasses
        spec, fr = self._setup("integrated")
        free = dataclasses.replace(spec, da_tilde=lambda z, t: np.zeros(np.shape(z)[:-1] + (1, 1, 1)))
        blk = u_v_stats(np.ones(5), [0.0], free, fr, [1.0], 5)
        assert np.all(blk.score == 0.0) and np.all(blk.var == 0.0)

    def test_block_variance_psd(self, rng):
        spec, fr = self._setup("stochvol-diagonal")
        for _ in range(20):
            z, th = probe(spec, rng)
            blk = u_v_stats(rng.normal(size=6 * fr.q), z[:2], spec, fr, th, 6, Ycheck_j=z[2:])
            assert np.linalg.eigvalsh(blk.var)[0] >= 0


class TestExpansions:
    def test_complete_zero_direction(self):
        spec, scheme = builtin_model("langevin", {})
        obs = observe(simulate_path(spec, [1.0], 100, 2, seed=3), scheme, 100)
        ex = expansion_complete(obs, spec, [1.0], [0.0])
        assert ex.lam == 0.0 and ex.blocks == 100
        assert abs(ex.T[0, 0] - 4.0) < 1e-12

    def test_partial_zero_direction(self):
        spec, scheme = builtin_model("integrated", {})
        obs = observe(simulate_path(spec, [1.0], 100, 2, seed=3), scheme, 100)
        ex = expansion_partial(obs, spec, None, [1.0], [0.0], 5)
        assert ex.lam == 0.0 and ex.blocks == 19

    def test_scheme_mismatch(self):
        spec, scheme = builtin_model("integrated", {})
        obs = observe(simulate_path(spec, [1.0], 20, 1, seed=3), scheme, 20)
        with pytest.raises(ConfigError):
            expansion_complete(obs, spec, [1.0], [1.0])

    def test_expansion_is_quadratic_in_direction(self):
        spec, scheme = builtin_model("langevin", {})
        obs = observe(simulate_path(spec, [1.0], 100, 2, seed=3), scheme, 100)
        ex = expansion_complete(obs, spec, [1.0], [0.5])
        assert abs(ex.lam - (0.5 * ex.score[0] - 0.125 * ex.T[0, 0])) < 1e-12

    def test_score_block_file(self, tmp_path):
        spec, scheme = builtin_model("integrated", {})
        obs = observe(simulate_path(spec, [1.0], 50, 1, seed=3), scheme, 50)
        blocks = score_blocks(obs, spec, [1.0], 4)
        write_score_blocks(blocks, str(tmp_path / "s.csv"))
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "j,score1,trace_var" and len(lines) == len(blocks) + 1
