import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lamnlab.errors import ConfigError
from lamnlab.model import (BUILTINS, ModelSpec, SchemeSpec, builtin_model, load_model, projection_frame,
                           theta_derivative, validate_conditions)

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


def random_probes(spec, rng, count):
    out = []
    for _ in range(count):
        z = rng.normal(scale=2.0, size=spec.m)
        th = spec.lower + (spec.upper - spec.lower) * rng.uniform(0.05, 0.95, size=spec.d)
        out.append((z, th))
    return out


class TestBuiltins:
    def test_langevin_layout(self):
        spec, scheme = builtin_model("langevin", {"kappa": 1})
        assert (spec.m, spec.kappa, spec.r, spec.d) == (2, 1, 1, 1)
        np.testing.assert_array_equal(spec.U, np.eye(2))
        z = np.array([0.7, -3.0])
        np.testing.assert_array_equal(spec.b_check(z), [0.7])
        np.testing.assert_allclose(spec.a_tilde(z, [2.5]), [[2.5]])
        assert scheme.kind == "Complete"

    def test_integrated_scheme(self):
        _, scheme = builtin_model("integrated", {})
        assert scheme.kind == "Partial"
        np.testing.assert_array_equal(scheme.Q, np.zeros((1, 1)))
        np.testing.assert_array_equal(scheme.B, np.eye(1))
        assert (scheme.q1, scheme.q2, scheme.q) == (0, 1, 1)

    def test_factor_rotation_diagonalises_noise(self):
        spec, _ = builtin_model("factor", {"m": 3, "kappa": 2})
        A = spec.extras["A"]
        rotated = spec.U @ A
        np.testing.assert_allclose(rotated[2:], 0.0, atol=1e-12)
        np.testing.assert_allclose(spec.U @ spec.U.T, np.eye(3), atol=1e-12)

    def test_velocity_model_is_nondegenerate(self):
        spec, scheme = builtin_model("langevin-partial-velocity", {})
        assert spec.m == spec.kappa == 1 and not spec.degenerate

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="unknown model"):
            builtin_model("heston", {})

    @pytest.mark.parametrize("name,params", [("factor", {"amp": 1.5}), ("langevin", {"state": "sine", "amp": 1.0}),
                                             ("stochvol-diagonal", {"c22": -1.0})])
    def test_positivity_violations(self, name, params):
        with pytest.raises(ConfigError):
            builtin_model(name, params)

    def test_rank_deficient_factor_loading(self):
        with pytest.raises(ConfigError, match="rank"):
            builtin_model("factor", {"A": [[1, 1], [1, 1], [1, 1]]})


class TestConditions:
    @pytest.mark.parametrize("name", sorted(BUILTINS))
    @pytest.mark.parametrize("stateful", [False, True])
    def test_builtins_pass_at_random_probes(self, name, stateful, rng):
        spec, scheme = builtin_model(name, STATEFUL[name] if stateful else {})
        rep = validate_conditions(spec, scheme, random_probes(spec, rng, 100))
        assert rep.passed, rep.worst

    def test_langevin_residuals_vanish(self):
        spec, scheme = builtin_model("langevin", {})
        row = validate_conditions(spec, scheme, [(np.zeros(2), [1.0])]).rows[0]
        assert row["kernel"] == row["b_check"] == row["commute"] == 0.0

    def test_factor_commutation(self, rng):
        spec, scheme = builtin_model("stochvol-common", {"amp": 0.3})
        rep = validate_conditions(spec, scheme, random_probes(spec, rng, 10))
        assert max(r["commute"] for r in rep.rows) < 1e-12

    def test_broken_model_fails(self):
        # a has kernel span(e2) but its derivative does not vanish there
        def a(z, th):
            return np.broadcast_to(np.array([[th[0], 0.0]]), z.shape[:-1] + (1, 2))

        def da(z, th):
            return np.broadcast_to(np.array([[[1.0, 1.0]]]), z.shape[:-1] + (1, 1, 2))

        spec = ModelSpec("broken", 1, 1, 2, 1, np.array([0.1]), np.array([10.0]), np.zeros(1), np.eye(1),
                         a, lambda z, th: np.zeros(z.shape[:-1] + (1,)), da_tilde=da)
        rep = validate_conditions(spec, SchemeSpec("Complete"), [(np.zeros(1), [1.0])])
        assert not rep.passed
        assert rep.rows[0]["kernel"] > 1e-3

    def test_empty_probe_list(self):
        spec, scheme = builtin_model("langevin", {})
        with pytest.raises(ConfigError):
            validate_conditions(spec, scheme, [])


class TestThetaDerivative:
    def test_linear_coefficient(self):
        spec, _ = builtin_model("langevin", {})
        assert theta_derivative(spec, "a_tilde", np.zeros(2), [3.0], 0)[0, 0] == 1.0

    def test_exponential_by_finite_difference(self):
        spec, _ = builtin_model("scaled-factor", {"kappa": 1, "kappa2": 1, "A": [[1.0]]})
        fd_spec = dataclasses.replace(spec, da_tilde=None)
        val = theta_derivative(fd_spec, "a_tilde", np.zeros(2), [0.0], 0)
        assert abs(val[0, 0] - 1.0) < 1e-10

    def test_theta_free_coefficient(self):
        spec, _ = builtin_model("langevin", {})
        np.testing.assert_array_equal(theta_derivative(spec, "b_check", np.ones(2), [1.0], 0), np.zeros(1))
        np.testing.assert_array_equal(theta_derivative(spec, "b_tilde", np.ones(2), [1.0], 0), np.zeros(1))

    def test_boundary_rejected(self):
        spec, _ = builtin_model("langevin", {})
        with pytest.raises(ConfigError, match="box"):
            theta_derivative(spec, "a_tilde", np.zeros(2), [0.1 + 1e-9], 0)

    @pytest.mark.parametrize("name", sorted(BUILTINS))
    def test_fd_matches_analytic(self, name, rng):
        spec, _ = builtin_model(name, STATEFUL[name])
        fd_spec = dataclasses.replace(spec, da_tilde=None)
        for z, th in random_probes(spec, rng, 20):
            for i in range(spec.d):
                exact = theta_derivative(spec, "a_tilde", z, th, i)
                approx = theta_derivative(fd_spec, "a_tilde", z, th, i)
                assert np.max(np.abs(exact - approx)) <= 1e-6 * max(1.0, np.max(np.abs(exact)))


class TestSchemes:
    def test_not_a_projection(self):
        with pytest.raises(ConfigError, match="projection"):
            SchemeSpec("Partial", [[0.5]], [[1.0]])

    def test_kernel_condition(self):
        # Ker(B) = span(e1) but Q projects on e2
        with pytest.raises(ConfigError, match="Ker"):
            SchemeSpec("Partial", [[0.0, 0.0], [0.0, 1.0]], [[0.0, 1.0]])

    def test_b_rank(self):
        with pytest.raises(ConfigError):
            SchemeSpec("Partial", [[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0]])

    def test_frame_properties(self):
        _, scheme = builtin_model("stochvol-common", {})
        fr = projection_frame(scheme)
        np.testing.assert_allclose(fr.Qt1 @ fr.Qt1.T, np.eye(1))
        np.testing.assert_allclose(fr.Qt3 @ fr.Qt3.T, np.eye(1))
        np.testing.assert_allclose(fr.Qt1.T @ fr.Qt1, scheme.Q, atol=1e-15)
        np.testing.assert_allclose(fr.Qt3 @ fr.B_pinv @ scheme.B, fr.Qt3, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, np.pi), st.integers(0, 1))
    def test_frame_is_deterministic_for_rotated_projections(self, angle, q_rank):
        v = np.array([np.cos(angle), np.sin(angle)])
        Q = np.outer(v, v) if q_rank else np.zeros((2, 2))
        w = v if q_rank else np.array([0.3, 1.0])
        B = np.array([[-w[1], w[0]]]) if q_rank else np.vstack([w, [1.0, -0.2]])
        scheme = SchemeSpec("Partial", Q, B)
        f1, f2 = projection_frame(scheme), projection_frame(scheme)
        assert np.array_equal(f1.Qt1, f2.Qt1) and np.array_equal(f1.Qt3, f2.Qt3)
        np.testing.assert_allclose(f1.Qt3 @ f1.B_pinv @ scheme.B, f1.Qt3, atol=1e-10)


class TestLoading:
    def test_document(self):
        spec, scheme = load_model({"name": "integrated", "dims": {"m": 2, "kappa": 1}, "params": {"kappa": 1}})
        assert spec.m == 2 and scheme.kind == "Partial"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            load_model({"name": "langevin", "colour": 1})

    def test_dims_mismatch(self):
        with pytest.raises(ConfigError, match="dims.m"):
            load_model({"name": "langevin", "dims": {"m": 3}})

    def test_scheme_override_is_validated(self):
        with pytest.raises(ConfigError):
            load_model({"name": "integrated", "scheme": {"kind": "Partial", "Q": [[1.0]], "B": [[1.0]]}})
