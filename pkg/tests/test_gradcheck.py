import numpy as np
import pytest

from core import gradcheck
from core.errors import ConfigError
from core.gradcheck import CHECKS, numerical_gradient, register, relative_error, run_checks


def test_registry_covers_every_backward_pass():
    assert set(CHECKS) == {
        "meta_sqrt",
        "meta_inv_sqrt",
        "newton_schulz_sqrt",
        "newton_schulz_inv_sqrt",
        "ortho_loss",
        "ortho_weight",
        "spectral_norm",
        "pre_svd_end_to_end",
    }


def test_numerical_gradient_of_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.5, -1.0])
    grad = numerical_gradient(lambda v: float(v @ A @ v), x)
    np.testing.assert_allclose(grad, 2 * A @ x, rtol=1e-9)
    np.testing.assert_array_equal(x, [0.5, -1.0])


def test_relative_error():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(np.sqrt(2))


def test_smallest_dimension_passes_everything():
    results = run_checks(dims=[2], seeds=1)
    assert len(results) == len(CHECKS)
    failing = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert failing == []


def test_zero_tolerance_fails():
    results = run_checks(dims=[2], seeds=1, tol=0.0, names=["meta_sqrt", "ortho_weight"])
    assert [r.name for r in results] == ["meta_sqrt", "ortho_weight"]
    assert not any(r.passed for r in results)


@pytest.mark.parametrize("kwargs", [
    {"dims": [1]},
    {"dims": [17]},
    {"dims": []},
    {"seeds": 0},
    {"names": ["no_such_check"]},
])
def test_bad_arguments(kwargs):
    with pytest.raises(ConfigError):
        run_checks(**kwargs)


def test_duplicate_registration(monkeypatch):
    monkeypatch.setattr(gradcheck, "CHECKS", dict(CHECKS))
    with pytest.raises(ValueError):
        register("meta_sqrt")(lambda dim, rng: 0.0)


@pytest.mark.slow
def test_default_invocation_passes():
    results = run_checks()
    assert len(results) == len(CHECKS) * 3 * 3
    assert all(r.passed for r in results), [(r.name, r.dim, r.seed, r.max_rel_error) for r in results if not r.passed]
