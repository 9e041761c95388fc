import json

import numpy as np
import pytest
from scipy import stats

from lamnlab.errors import ConfigError
from lamnlab.model import ModelSpec, SchemeSpec, builtin_model
from lamnlab.simulate import (BlockLayout, PathSample, derive_seed, observe, partial_blocks, read_path,
                              normalized_increments_complete, simulate_path, simulate_states, splitmix64,
                              write_path, write_observations)


def deterministic_spec(velocity=1.5):
    """Velocity held constant, position integrates it: no noise, no drift in the velocity."""
    def a(z, th):
        return np.zeros(np.shape(z)[:-1] + (1, 1))

    def zero(z, th):
        return np.zeros(np.shape(z)[:-1] + (1,))

    return ModelSpec("ode", 2, 1, 1, 1, np.array([0.1]), np.array([10.0]), np.array([velocity, 0.0]), np.eye(2),
                     a, zero, b_check=lambda z: z[..., :1], grad_b_check=lambda z: np.ones(np.shape(z)[:-1] + (1, 1)))


class TestSeeds:
    def test_splitmix_reference_value(self):
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_derive_seed_is_deterministic_and_distinct(self):
        seeds = [derive_seed(7, i) for i in range(1000)]
        assert seeds == [derive_seed(7, i) for i in range(1000)]
        assert len(set(seeds)) == 1000
        assert all(0 <= s < 2**64 for s in seeds)


class TestSimulation:
    def test_deterministic_ode(self):
        spec = deterministic_spec(1.5)
        Y = simulate_states(spec, [1.0], 10, 4, [1])[0]
        t = np.arange(41) / 40
        np.testing.assert_array_equal(Y[:, 0], 1.5)
        np.testing.assert_allclose(Y[:, 1], 1.5 * t, atol=1e-14)

    def test_terminal_variance(self):
        spec, _ = builtin_model("langevin", {})
        Y = simulate_states(spec, [1.0], 2, 1, [derive_seed(3, i) for i in range(10000)])
        v = Y[:, -1, 0].var(ddof=1)
        assert abs(v - 1.0) < 3 * np.sqrt(2.0 / 10000)
        # integrated coordinate has variance 1/3 at t = 1
        w = Y[:, -1, 1].var(ddof=1)
        assert abs(w - 1.0 / 3.0) < 3 * (1.0 / 3.0) * np.sqrt(2.0 / 10000)

    def test_reproducible(self):
        spec, _ = builtin_model("stochvol-common", {"amp": 0.3})
        a = simulate_states(spec, [0.2], 20, 4, [11, 12])
        b = simulate_states(spec, [0.2], 20, 4, [11, 12])
        assert np.array_equal(a, b)
        # a path does not depend on which other paths share its batch
        c = simulate_states(spec, [0.2], 20, 4, [12])
        assert np.array_equal(a[1], c[0])

    def test_adjacent_seeds_uncorrelated(self):
        spec, _ = builtin_model("langevin", {})
        first = simulate_states(spec, [1.0], 2, 1, [derive_seed(0, i) for i in range(2001)])[:, 1, 0]
        r = np.corrcoef(first[:-1], first[1:])[0, 1]
        assert abs(r) < 0.05

    def test_path_sample(self):
        spec, _ = builtin_model("langevin", {})
        p = simulate_path(spec, [1.0], 5, 3, seed=4)
        assert p.states.shape == (16, 2)
        assert p.model == "langevin"
        np.testing.assert_allclose(p.fine_times[[0, -1]], [0.0, 1.0])

    def test_bad_arguments(self):
        spec, _ = builtin_model("langevin", {})
        with pytest.raises(ConfigError):
            simulate_states(spec, [1.0], 1, 1, [0])


class TestObserve:
    def test_complete_grid(self):
        spec, scheme = builtin_model("langevin", {})
        p = simulate_path(spec, [1.0], 2, 4, seed=1)
        obs = observe(p, scheme, 2)
        np.testing.assert_array_equal(obs.times, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(obs.rows, p.states[[0, 4, 8]])

    def test_partial_hides_velocity(self):
        spec, scheme = builtin_model("integrated", {})
        p = simulate_path(spec, [1.0], 4, 2, seed=1)
        obs = observe(p, scheme, 4)
        assert obs.rows.shape == (5, 1)
        np.testing.assert_array_equal(obs.rows[:, 0], p.states[::2, 1])

    def test_rotated_rows_are_in_original_coordinates(self):
        spec, scheme = builtin_model("shared-noise", {})
        p = simulate_path(spec, [1.0], 4, 2, seed=1)
        obs = observe(p, scheme, 4)
        np.testing.assert_allclose(obs.rows, p.states[::2] @ spec.U, atol=1e-14)

    def test_mismatched_grid(self):
        spec, scheme = builtin_model("langevin", {})
        p = simulate_path(spec, [1.0], 4, 4, seed=1)
        with pytest.raises(ConfigError, match="divide"):
            observe(p, scheme, 5)


class TestIncrements:
    def test_deterministic_smooth_part_vanishes(self):
        spec = deterministic_spec(0.7)
        p = simulate_path(spec, [1.0], 50, 4, seed=0)
        X = normalized_increments_complete(observe(p, SchemeSpec("Complete"), 50))
        np.testing.assert_allclose(X, 0.0, atol=1e-9)

    def test_standard_normal_and_one_third(self):
        spec, scheme = builtin_model("langevin", {})
        p = simulate_path(spec, [1.0], 1000, 4, seed=5)
        X = normalized_increments_complete(observe(p, scheme, 1000))
        assert stats.kstest(X[:, 0], "norm").pvalue > 0.01
        se = (1.0 / 3.0) * np.sqrt(2.0 / 1000)
        assert abs(X[:, 1].var() - 1.0 / 3.0) < 3 * se
        assert abs(np.corrcoef(X.T)[0, 1] - np.sqrt(3) / 2) < 0.05

    def test_drift_removed(self):
        spec, scheme = builtin_model("langevin", {"drift": 3.0})
        Y = simulate_states(spec, [1.0], 200, 2, [derive_seed(9, i) for i in range(200)])
        means = []
        for y in Y:
            obs = observe(PathSample(spec, np.array([1.0]), 200, 2, 0, y), scheme, 200)
            means.append(normalized_increments_complete(obs)[:, 0].mean())
        means = np.array(means)
        assert abs(means.mean()) < 3 * means.std(ddof=1) / np.sqrt(len(means))

    @pytest.mark.slow
    def test_substep_stability(self):
        spec, _ = builtin_model("langevin", {"state": "sine", "amp": 0.4})
        seeds = [derive_seed(21, i) for i in range(2000)]
        samples = []
        for sub in (8, 32):
            Y = simulate_states(spec, [1.0], 500, sub, seeds)[:, ::sub]
            samples.append(np.sqrt(500) * np.diff(Y[:, :, 0], axis=1)[:, 250])
        assert stats.ks_2samp(*samples).statistic < 0.05


class TestBlocks:
    def test_layout(self):
        lay = BlockLayout(1000, 7)
        assert lay.L == 142 and lay.L * lay.e_n < 1000
        assert lay.t(1, 3) == 10 / 1000
        with pytest.raises(ConfigError):
            BlockLayout(5, 5)

    def test_first_plug_in_is_initial_state(self):
        spec, scheme = builtin_model("integrated", {"x0": 0.4})
        p = simulate_path(spec, [1.0], 100, 2, seed=3)
        blk = partial_blocks(observe(p, scheme, 100), BlockLayout(100, 5))
        assert blk.Ydot[0, 0] == 0.4
        assert blk.X.shape == (19, 5)

    def test_deterministic_plug_in_is_exact(self):
        spec = deterministic_spec(1.3)
        scheme = SchemeSpec("Partial", [[0.0]], [[1.0]])
        p = simulate_path(spec, [1.0], 60, 2, seed=0)
        blk = partial_blocks(observe(p, scheme, 60), BlockLayout(60, 6))
        np.testing.assert_allclose(blk.Ydot[:, 0], 1.3, atol=1e-9)
        np.testing.assert_allclose(blk.X, 0.0, atol=1e-6)

    def test_plug_in_error_rate(self):
        spec, scheme = builtin_model("integrated", {})
        grid = np.array([250, 500, 1000, 2000])
        rms = []
        for n in grid:
            Y = simulate_states(spec, [1.0], n, 2, [derive_seed(n, i) for i in range(40)])
            errs = []
            for y in Y:
                obs = observe(PathSample(spec, np.array([1.0]), n, 2, 0, y), scheme, n)
                blk = partial_blocks(obs, BlockLayout(n, 5))
                truth = y[::2][np.arange(blk.X.shape[0]) * 5, 0]
                errs.append((blk.Ydot[1:, 0] - truth[1:]) ** 2)
            rms.append(np.sqrt(np.mean(np.concatenate(errs))))
        slope = np.polyfit(np.log(grid), np.log(rms), 1)[0]
        assert -0.6 <= slope <= -0.4

    def test_proxy_anchor_inflates_first_entry(self):
        spec, scheme = builtin_model("integrated", {})
        Y = simulate_states(spec, [1.0], 400, 2, [derive_seed(1, i) for i in range(300)])
        first = {"augmented": [], "proxy": []}
        for y in Y:
            obs = observe(PathSample(spec, np.array([1.0]), 400, 2, 0, y), scheme, 400)
            for mode in first:
                first[mode].append(partial_blocks(obs, BlockLayout(400, 6), mode=mode).X[1:, 0])
        va = np.concatenate(first["augmented"]).var()
        vp = np.concatenate(first["proxy"]).var()
        assert abs(va - 1.0 / 3.0) < 0.02
        assert abs(vp - 2.0 / 3.0) < 0.04

    def test_mode_validation(self):
        spec, scheme = builtin_model("integrated", {})
        obs = observe(simulate_path(spec, [1.0], 20, 1, seed=0), scheme, 20)
        with pytest.raises(ConfigError):
            partial_blocks(obs, BlockLayout(20, 3), mode="other")
        with pytest.raises(ConfigError):
            partial_blocks(obs, BlockLayout(21, 3))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        spec, scheme = builtin_model("stochvol-common", {"amp": 0.2})
        p = simulate_path(spec, [0.3], 10, 3, seed=8)
        stem = str(tmp_path / "path")
        write_path(p, stem)
        q = read_path(stem, spec)
        assert np.array_equal(p.states, q.states)
        assert q.seed == 8 and q.n == 10 and q.substeps == 3
        meta = json.loads((tmp_path / "path.json").read_text())
        assert meta["model"] == "stochvol-common"
        assert (tmp_path / "path.csv").read_bytes().count(b"\r\n") == 32

    def test_observation_file(self, tmp_path):
        spec, scheme = builtin_model("integrated", {})
        obs = observe(simulate_path(spec, [1.0], 10, 1, seed=0), scheme, 10)
        write_observations(obs, str(tmp_path / "obs.csv"))
        data = np.loadtxt(tmp_path / "obs.csv", delimiter=",", skiprows=1)
        assert data.shape == (11, 3)
        np.testing.assert_array_equal(data[:, 1], obs.rows[:, 0])
        np.testing.assert_array_equal(data[:, 2], obs.hidden[:, 0])
