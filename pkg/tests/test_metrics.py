import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfidlab import metrics as mt
from rfidlab.models import MiniEmbedder


def _spd(rng, d, cond=1e3):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    vals = np.exp(rng.uniform(0, np.log(cond), size=d))
    return (q * vals) @ q.T


def _closed_form_diag(mu_a, va, mu_b, vb):
    # commuting (diagonal) covariances: sum of 1-D W2^2 terms
    return float(((mu_a - mu_b) ** 2).sum() + ((np.sqrt(va) - np.sqrt(vb)) ** 2).sum())


def test_identical_stats_give_zero(rng):
    s = mt.GaussianStats(rng.normal(size=5), _spd(rng, 5), 100)
    assert abs(mt.frechet_distance(s, s)) <= 1e-9


def test_one_dimensional_case():
    a = mt.GaussianStats([0.0], [[1.0]], 10)
    b = mt.GaussianStats([1.0], [[4.0]], 10)
    assert mt.frechet_distance(a, b) == pytest.approx(2.0, abs=1e-9)


def test_commuting_covariances_match_closed_form(rng):
    for d in (1, 3, 16, 64):
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        va, vb = rng.uniform(0.1, 5, size=d), rng.uniform(0.1, 5, size=d)
        got = mt.frechet_distance(mt.GaussianStats(mu_a, np.diag(va), 10),
                                  mt.GaussianStats(mu_b, np.diag(vb), 10))
        assert got == pytest.approx(_closed_form_diag(mu_a, va, mu_b, vb), abs=1e-9)


def test_frechet_matches_scipy_sqrtm(rng):
    scipy_linalg = pytest.importorskip("scipy.linalg")
    a = mt.GaussianStats(rng.normal(size=8), _spd(rng, 8), 10)
    b = mt.GaussianStats(rng.normal(size=8), _spd(rng, 8), 10)
    cross = scipy_linalg.sqrtm(a.sigma @ b.sigma).real
    ref = ((a.mu - b.mu) ** 2).sum() + np.trace(a.sigma + b.sigma - 2 * cross)
    assert mt.frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)


def test_dimension_mismatch():
    with pytest.raises(mt.MetricError):
        mt.frechet_distance(mt.GaussianStats([0.0], [[1.0]], 2),
                            mt.GaussianStats([0.0, 0.0], np.eye(2), 2))


def test_sqrtm_examples():
    assert np.allclose(mt.sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    # rank-deficient PSD input
    v = np.array([[1.0], [2.0]])
    s = mt.sqrtm_psd(v @ v.T)
    assert np.allclose(s @ s, v @ v.T, atol=1e-12)


def test_sqrtm_rejects_indefinite_and_asymmetric():
    with pytest.raises(mt.NumericError):
        mt.sqrtm_psd(np.diag([1.0, -0.5]))
    with pytest.raises(mt.MetricError):
        mt.sqrtm_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_sqrtm_clamps_tiny_negative_eigenvalues():
    s = mt.sqrtm_psd(np.diag([1.0, -1e-13]))
    assert np.all(np.isfinite(s))
    assert s[1, 1] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31))
def test_sqrtm_squares_back(d, seed):
    a = _spd(np.random.default_rng(seed), d)
    s = mt.sqrtm_psd(a)
    assert np.linalg.norm(s @ s - a) <= 1e-8 * max(1.0, np.linalg.norm(a))
    assert np.allclose(s, s.T)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_frechet_is_symmetric_and_nonnegative(d, seed):
    rng = np.random.default_rng(seed)
    a = mt.GaussianStats(rng.normal(size=d), _spd(rng, d, 50), 10)
    b = mt.GaussianStats(rng.normal(size=d), _spd(rng, d, 50), 10)
    ab, ba = mt.frechet_distance(a, b), mt.frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-7, abs=1e-9)


def test_estimate_stats_is_unbiased_float64(rng):
    x = rng.normal(size=(50, 4)).astype(np.float32)
    s = mt.estimate_stats(x)
    assert s.sigma.dtype == np.float64
    assert np.allclose(s.sigma, np.cov(x.astype(np.float64).T, ddof=1))
    with pytest.raises(mt.MetricError):
        mt.estimate_stats(x[:1])


def test_negative_distance_clamps_with_flag():
    a = mt.GaussianStats(np.zeros(2), np.eye(2), 3)
    value, clamped = mt.frechet_distance(a, a, return_flag=True)
    assert value >= 0 and isinstance(clamped, bool)


# -- inception score -------------------------------------------------------------------

def test_is_uniform_posterior_is_one():
    p = np.full((100, 10), 0.1)
    assert mt.inception_score_from_probs(p, 10)[0] == pytest.approx(1.0, abs=1e-6)


def test_is_one_hot_uniform_marginal_is_c():
    p = np.eye(10)[np.arange(200) % 10]
    assert mt.inception_score_from_probs(p, 10)[0] == pytest.approx(10.0, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31), st.floats(0.1, 20))
def test_is_bounds(c, splits, seed, temp):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(splits * 8, c)) * temp
    logp = z - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)) \
        - z.max(1, keepdims=True)
    score, std = mt.inception_score_from_logp(logp, splits)
    assert 1 - 1e-9 <= score <= c + 1e-9
    assert std >= 0


def test_is_split_validation():
    with pytest.raises(mt.MetricError):
        mt.inception_score_from_probs(np.full((3, 2), 0.5), 4)
    with pytest.raises(mt.MetricError):
        mt.inception_score_from_probs(np.full((3, 2), 0.5), 0)


def test_is_matches_direct_formula(rng):
    p = rng.dirichlet(np.ones(5), size=40)
    marg = p.mean(0)
    ref = np.exp((p * (np.log(p) - np.log(marg))).sum(1).mean())
    assert mt.inception_score_from_probs(p, 1)[0] == pytest.approx(ref, rel=1e-10)


def test_entropy():
    assert mt.entropy([0.5, 0.5]) == pytest.approx(np.log(2))
    assert mt.entropy([1.0, 0.0]) == 0.0
    with pytest.raises(mt.MetricError):
        mt.entropy([0.7, 0.7])


# -- reports -------------------------------------------------------------------------

def test_reports_validate_against_schema(rng):
    model = MiniEmbedder(seed=0)
    x = rng.random((24, 3, 32, 32)).astype(np.float32)
    for rep in (mt.fid(model, x, x[::-1].copy(), "abc", 3),
                mt.inception_score(model, x, n_splits=2)):
        doc = json.loads(rep.to_json())
        jsonschema.validate(doc, mt.REPORT_SCHEMA)
        assert rep.to_json() == json.dumps(doc, sort_keys=True, separators=(",", ":"))
    assert mt.fid(model, x, x).value <= 1e-6


def test_robust_embedder_reports_r_metrics(rng):
    model = MiniEmbedder(seed=0)
    model.provenance = {"training": "adversarial", "kappa": 9.0}
    x = rng.random((12, 3, 32, 32)).astype(np.float32)
    assert mt.fid(model, x, x).metric == "R-FID"
    assert mt.inception_score(model, x, 2).metric == "R-IS"


def test_uniform_posterior_model_scores_one(rng):
    model = MiniEmbedder(seed=0)
    model["head.w"].data[:] = 0
    model["head.b"].data[:] = 0
    x = rng.random((20, 3, 32, 32)).astype(np.float32)
    assert mt.inception_score(model, x, 1).value == pytest.approx(1.0, abs=1e-6)


def test_report_rejects_non_finite():
    with pytest.raises(mt.NumericError):
        mt.MetricReport("FID", float("nan"), 1)
