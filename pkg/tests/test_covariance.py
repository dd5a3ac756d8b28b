import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmuopt.covariance import (
    Metric,
    PosteriorCovariance,
    metric_gradient,
    metric_value,
    posterior_cov,
    rank_one_add,
    top_eigenpair,
)
from pmuopt.errors import AlreadySelected, NonFiniteMetric, ShapeMismatch
from pmuopt.estimation import posterior_covariance_joseph

from helpers import random_model, rel_fro, toy_model

METRICS = list(Metric)


def test_empty_placement_is_prior(model10):
    _, prior, cands, model = model10
    cov = model.posterior(np.zeros(cands.n_x))
    np.testing.assert_array_equal(cov.Sigma_post, prior.Sigma_prior)
    assert cov.logdet == prior.logdet


@pytest.mark.parametrize("v", [1.0, 0.25, 4.0])
def test_scalar_information_addition(v):
    model = toy_model([[1.0]], [[1.0]], v)
    cov = model.posterior(np.ones(1))
    assert cov.Sigma_post[0, 0] == pytest.approx(v / (1 + v), rel=1e-14)
    assert cov.logdet == pytest.approx(np.log(v / (1 + v)), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_whitened_form_matches_gain_form(seed):
    _, prior, cands, model = random_model(10, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, cands.n_x) * (rng.uniform(size=cands.n_x) < 0.3)
    sel = np.flatnonzero(x)
    C = cands.C_tilde[sel].toarray()
    # scaling row i by sqrt(x_i) is the same as dividing its variance by x_i
    R = cands.Sigma_meas_diag[sel] / x[sel]
    ref = posterior_covariance_joseph(prior.Sigma_prior, C, R)
    assert rel_fro(model.posterior(x).Sigma_post, ref) < 1e-9


def test_module_level_wrappers(model10):
    _, prior, cands, model = model10
    x = np.zeros(cands.n_x)
    x[[1, 4]] = 1
    cov = posterior_cov(x, prior, cands)
    np.testing.assert_allclose(cov.Sigma_post, model.posterior(x).Sigma_post)
    cov2 = rank_one_add(cov, 0, prior, cands)
    assert cov2.x[0] == 1
    g = metric_gradient(cov, "A", prior, cands)
    assert g.shape == (cands.n_x,) and np.all(g <= 0)


def test_rank_one_matches_recompute(model10):
    _, _, cands, model = model10
    x = np.zeros(cands.n_x)
    x[[0, 7]] = 1
    cov = model.posterior(x)
    for i in (3, 11, 20):
        cov = model.rank_one_add(cov, i)
        x[i] = 1
        full = model.posterior(x)
        assert rel_fro(cov.Sigma_post, full.Sigma_post) < 1e-8
        assert abs(cov.logdet - full.logdet) < 1e-8 * abs(full.logdet)


def test_rank_one_rejects_selected(model10):
    _, _, cands, model = model10
    cov = model.posterior(np.eye(cands.n_x)[2])
    with pytest.raises(AlreadySelected):
        model.rank_one_add(cov, 2)


def test_zero_weight_candidate_changes_nothing():
    model = toy_model([[2.0, 0.5], [0.5, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [np.inf, 1.0])
    cov0 = model.posterior(np.zeros(2))
    cov1 = model.rank_one_add(cov0, 0)
    np.testing.assert_array_equal(cov1.Sigma_post, cov0.Sigma_post)


def test_diagonal_metrics():
    sigma = np.diag([2.0, 1.0]).astype(complex)
    assert metric_value(sigma, "A") == pytest.approx(3.0)
    assert metric_value(sigma, "D") == pytest.approx(np.log(2.0))
    assert metric_value(sigma, "E") == pytest.approx(2.0)
    assert metric_value(sigma, "M") == pytest.approx(2.0)


def test_identity_metrics():
    sigma = np.eye(7, dtype=complex)
    assert [metric_value(sigma, m) for m in "ADEM"] == pytest.approx([7.0, 0.0, 1.0, 1.0])


def test_logdet_is_sum_of_log_eigenvalues():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    sigma = A @ A.conj().T + 0.1 * np.eye(8)
    expected = np.sum(np.log(np.linalg.eigvalsh(sigma)))
    assert abs(metric_value(sigma, "D") - expected) < 1e-9


def test_metric_errors():
    with pytest.raises(ValueError):
        Metric.parse("B")
    with pytest.raises(NonFiniteMetric):
        metric_value(-np.eye(2), "D")
    with pytest.raises(ShapeMismatch):
        metric_value(np.ones(3), "A")


def test_top_eigenpair_phase_and_large_path():
    rng = np.random.default_rng(0)
    for n in (50, 700):
        A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        sigma = A @ A.conj().T / n
        lam, u = top_eigenpair(sigma)
        assert lam == pytest.approx(np.linalg.eigvalsh(sigma)[-1], rel=1e-10)
        k = np.flatnonzero(np.abs(u) > 1e-14)[0]
        assert u[k].imag == pytest.approx(0.0, abs=1e-15) and u[k].real > 0


def test_scalar_gradients():
    model = toy_model([[1.0]], [[1.0]], 1.0)
    cov = model.posterior(np.zeros(1))
    assert model.gradient(cov, "A") == pytest.approx([-1.0])
    assert model.gradient(cov, "D") == pytest.approx([-1.0])


def _fd_gradient(model, x, metric, h=1e-5):
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (metric_value(model.posterior(x + e), metric) - metric_value(model.posterior(x - e), metric)) / (2 * h)
    return g


@pytest.mark.parametrize("metric", ["A", "D"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(metric, seed):
    _, _, _, model = random_model(10, seed)
    x = np.random.default_rng(seed).uniform(0, 1, model.n_x)
    g = model.gradient(model.posterior(x), metric)
    fd = _fd_gradient(model, x, metric)
    # components far below the largest one are swamped by rounding in the difference quotient
    err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
    assert err.max() < 1e-4


@pytest.mark.parametrize("metric", ["E", "M"])
@pytest.mark.parametrize("seed", range(3))
def test_subgradient_inequality(metric, seed):
    _, _, _, model = random_model(10, seed, n_cand=25)
    rng = np.random.default_rng(100 + seed)
    for _ in range(30):
        x, x2 = rng.uniform(0, 1, (2, model.n_x))
        cov = model.posterior(x)
        f, g = metric_value(cov, metric), model.gradient(cov, metric)
        f2 = metric_value(model.posterior(x2), metric)
        assert f2 - (f + g @ (x2 - x)) >= -1e-8 * max(1.0, abs(f))


def test_certificate_never_exceeds_metric(model10):
    _, _, cands, model = model10
    cov = model.posterior(np.full(cands.n_x, 0.1))
    for m in METRICS:
        assert model.certificate_value(cov, m) <= metric_value(cov, m) + 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(METRICS))
def test_metrics_decrease_with_more_weight(seed, metric):
    _, _, cands, model = _shared_model()
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, cands.n_x) * (rng.uniform(size=cands.n_x) < 0.2)
    x2 = np.minimum(1.0, x + rng.uniform(0, 0.5, cands.n_x) * (rng.uniform(size=cands.n_x) < 0.2))
    f, f2 = metric_value(model.posterior(x), metric), metric_value(model.posterior(x2), metric)
    assert f2 <= f + 1e-9 * min(1.0, abs(f))


_cache = {}


def _shared_model():
    if "m" not in _cache:
        _cache["m"] = random_model(8, seed=21)
    return _cache["m"]


def test_gradient_is_nonpositive(model10):
    _, _, cands, model = model10
    cov = model.posterior(np.full(cands.n_x, 0.05))
    for m in METRICS:
        assert np.all(model.gradient(cov, m) <= 0)


def test_raw_matrix_accepted():
    sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    cov = PosteriorCovariance(sigma.astype(complex), np.zeros(0), float(np.log(np.linalg.det(sigma))))
    assert metric_value(cov, "D") == pytest.approx(metric_value(sigma, "D"))
