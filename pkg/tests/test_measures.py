import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from zrplab.errors import ConfigurationError, DomainError
from zrplab.measures import (
    LawId,
    cdf,
    couple_monotone,
    dominates,
    geometric_cdf,
    geometric_pmf,
    mu_hat_cdf,
    mu_hat_pmf,
    negbin_cdf,
    negbin_pmf,
    pmf,
    quantile_array,
    sample_mu_hat_sum,
    sample_via_quantile,
)

densities = st.floats(min_value=0.01, max_value=20.0, allow_nan=False)
uniforms = st.floats(min_value=0.0, max_value=1.0, exclude_max=True, allow_nan=False)


# --- worked examples -------------------------------------------------------

@pytest.mark.parametrize("rho,k,expected", [(1, 0, 0.5), (0, 0, 1.0), (1, 2, 0.125)])
def test_geometric_pmf_examples(rho, k, expected):
    assert geometric_pmf(rho, k) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("rho,z,expected", [(1, 0, 0.5), (1, 2, 0.875), (0.5, 1, 8 / 9)])
def test_geometric_cdf_examples(rho, z, expected):
    assert geometric_cdf(rho, z) == pytest.approx(expected, abs=1e-15)


def test_geometric_cdf_at_half_beats_one():
    assert geometric_cdf(0.5, 1) > geometric_cdf(1, 1)


@pytest.mark.parametrize("rho,k,expected", [(1, 0, 0.25), (0, 0, 1.0), (1, 1, 0.25)])
def test_mu_hat_pmf_examples(rho, k, expected):
    assert mu_hat_pmf(rho, k) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("n,lam,z,expected", [(1, 1, 2, 0.125), (2, 1, 1, 0.25), (3, 0, 0, 1.0)])
def test_negbin_pmf_examples(n, lam, z, expected):
    assert negbin_pmf(n, lam, z) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("law,u,expected", [
    (LawId.geometric(1), 0.0, 0),
    (LawId.geometric(1), 0.6, 1),
    (LawId.muhat(1), 0.2, 0),
])
def test_quantile_examples(law, u, expected):
    assert sample_via_quantile(law, u) == expected
    assert quantile_array(law, np.array([u]))[0] == expected


@pytest.mark.parametrize("lo,hi,u,expected", [
    (LawId.geometric(0.5), LawId.geometric(1), 0.9, (2, 3)),
    (LawId.geometric(1), LawId.muhat(1), 0.3, (0, 1)),
])
def test_couple_monotone_examples(lo, hi, u, expected):
    assert couple_monotone(lo, hi, u) == expected


def test_couple_identical_laws_gives_equal_pair():
    a, b = couple_monotone(LawId.geometric(1), LawId.geometric(1), 0.37)
    assert a == b


# --- errors ----------------------------------------------------------------

@pytest.mark.parametrize("call", [
    lambda: geometric_pmf(-1, 0),
    lambda: geometric_pmf(1, -1),
    lambda: geometric_cdf(1, -2),
    lambda: mu_hat_pmf(-0.5, 1),
    lambda: negbin_pmf(0, 1, 0),
    lambda: negbin_pmf(1.5, 1, 0),
    lambda: geometric_pmf(1, 1.5),
    lambda: geometric_pmf(True, 1),
    lambda: geometric_pmf(float("nan"), 1),
    lambda: sample_via_quantile(LawId.geometric(1), 1.0),
    lambda: sample_via_quantile(LawId.geometric(1), -0.1),
    lambda: quantile_array(LawId.geometric(1), np.array([0.2, 1.0])),
    lambda: LawId("poisson", 1.0),
    lambda: LawId.negbin(0, 1.0),
])
def test_domain_errors(call):
    with pytest.raises(DomainError):
        call()


def test_coupling_rejects_reversed_laws():
    with pytest.raises(ConfigurationError):
        couple_monotone(LawId.geometric(1), LawId.geometric(0.5), 0.5)
    with pytest.raises(ConfigurationError):
        couple_monotone(LawId.muhat(1), LawId.geometric(1), 0.5)


# --- independent oracles ---------------------------------------------------

@pytest.mark.parametrize("rho", [0.1, 0.5, 1.0, 3.0, 10.0])
def test_pmfs_sum_to_one(rho):
    p = rho / (1 + rho)
    # tail of every law below 1e-13 by K_max
    kmax = int(math.ceil(math.log(1e-16) / math.log(p))) + 200
    for law in (LawId.geometric(rho), LawId.muhat(rho), LawId.negbin(4, rho)):
        total = math.fsum(pmf(law, k) for k in range(kmax))
        assert abs(total - 1.0) < 1e-12, law


@pytest.mark.parametrize("rho", [0.2, 1.0, 2.5])
def test_mu_hat_is_geometric_convolution(rho):
    g = np.array([geometric_pmf(rho, k) for k in range(60)])
    conv = np.convolve(g, g)[:60]
    mh = np.array([mu_hat_pmf(rho, k) for k in range(60)])
    assert np.allclose(conv, mh, atol=1e-15)


@pytest.mark.parametrize("rho", [0.3, 1.0, 4.0])
def test_negbin_two_equals_mu_hat(rho):
    for z in range(51):
        assert abs(negbin_pmf(2, rho, z) - mu_hat_pmf(rho, z)) < 1e-12


@pytest.mark.parametrize("n,lam", [(1, 0.5), (3, 1.0), (7, 0.8), (25, 2.0)])
def test_negbin_matches_scipy(n, lam):
    # scipy parametrises by the success probability 1/(1+lam)
    ref = stats.nbinom(n, 1.0 / (1.0 + lam))
    for z in range(80):
        assert negbin_pmf(n, lam, z) == pytest.approx(ref.pmf(z), rel=1e-10, abs=1e-300)
        assert negbin_cdf(n, lam, z) == pytest.approx(ref.cdf(z), rel=1e-10)


def test_cdf_consistent_with_pmf():
    for law in (LawId.geometric(0.7), LawId.muhat(0.7), LawId.negbin(5, 0.7)):
        run = 0.0
        for z in range(40):
            run += pmf(law, z)
            assert cdf(law, z) == pytest.approx(run, abs=1e-13)


def test_mu_hat_cdf_closed_form():
    for z in range(30):
        assert mu_hat_cdf(1.3, z) == pytest.approx(sum(mu_hat_pmf(1.3, k) for k in range(z + 1)), abs=1e-14)


@pytest.mark.parametrize("law", [LawId.geometric(1.0), LawId.muhat(1.0), LawId.geometric(0.25),
                                 LawId.negbin(3, 0.6)])
def test_quantile_chi_square(law):
    rng = np.random.default_rng(20240601)
    n = 10**6 if law.kind != "negbin" else 10**5
    x = quantile_array(law, rng.random(n))
    kmax = 1
    while n * (1 - cdf(law, kmax)) > 5:
        kmax += 1
    expect = np.array([pmf(law, k) for k in range(kmax)] + [1 - cdf(law, kmax - 1)]) * n
    obs = np.bincount(np.minimum(x, kmax), minlength=kmax + 1)
    assert stats.chisquare(obs, expect).pvalue > 1e-3


def test_sum_sampler_marginal():
    rng = np.random.default_rng(3)
    x = sample_mu_hat_sum(1.0, rng, size=400_000)
    kmax = 12
    expect = np.array([mu_hat_pmf(1.0, k) for k in range(kmax)] + [1 - mu_hat_cdf(1.0, kmax - 1)]) * x.size
    obs = np.bincount(np.minimum(x, kmax), minlength=kmax + 1)
    assert stats.chisquare(obs, expect).pvalue > 1e-3
    assert sample_mu_hat_sum(0.0, rng) == 0


def test_degenerate_density_samples_zero():
    assert sample_via_quantile(LawId.geometric(0.0), 0.999) == 0
    assert (quantile_array(LawId.muhat(0.0), np.linspace(0, 0.99, 50)) == 0).all()


def test_tiny_density_uses_exact_scan():
    law = LawId.geometric(1e-14)
    assert sample_via_quantile(law, 0.5) == 0
    assert sample_via_quantile(law, 1 - 1e-16) in (0, 1)


# --- properties ------------------------------------------------------------

@given(densities, uniforms)
def test_quantile_is_the_generalised_inverse(rho, u):
    for law in (LawId.geometric(rho), LawId.muhat(rho)):
        z = sample_via_quantile(law, u)
        assert cdf(law, z) > u
        assert z == 0 or cdf(law, z - 1) <= u


@given(densities, st.lists(uniforms, min_size=1, max_size=30))
def test_scalar_and_vector_quantiles_agree(rho, us):
    law = LawId.geometric(rho)
    arr = quantile_array(law, np.array(us))
    assert list(arr) == [sample_via_quantile(law, u) for u in us]


@given(densities, densities, st.integers(min_value=0, max_value=200))
def test_geometric_cdf_decreasing_in_density(a, b, z):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert geometric_cdf(lo, z) >= geometric_cdf(hi, z)
    if geometric_cdf(hi, z) < 1.0:
        assert geometric_cdf(lo, z) > geometric_cdf(hi, z)


@given(densities, densities, uniforms, st.sampled_from(["gg", "mm", "gm"]))
def test_coupling_is_ordered(a, b, u, pair):
    lam, rho = min(a, b), max(a, b)
    lo, hi = {"gg": (LawId.geometric(lam), LawId.geometric(rho)),
              "mm": (LawId.muhat(lam), LawId.muhat(rho)),
              "gm": (LawId.geometric(rho), LawId.muhat(rho))}[pair]
    assert dominates(lo, hi)
    k_lo, k_hi = couple_monotone(lo, hi, u)
    assert k_lo <= k_hi


def test_coupling_ordered_on_dense_grid_and_random_draws():
    u = np.concatenate([np.linspace(0, 1, 100_001, endpoint=False),
                        np.random.default_rng(5).random(10**6)])
    for lam, rho in [(0.5, 1.0), (0.8, 1.0), (0.99, 1.0), (0.1, 5.0)]:
        for lo, hi in [(LawId.geometric(lam), LawId.geometric(rho)),
                       (LawId.muhat(lam), LawId.muhat(rho)),
                       (LawId.geometric(rho), LawId.muhat(rho))]:
            assert (quantile_array(lo, u) <= quantile_array(hi, u)).all()


def test_law_labels():
    assert str(LawId.negbin(3, 0.5)) == "NegBin(3, 0.5)"
    assert str(LawId.muhat(1)) == "MuHat(1)"
    assert LawId.muhat(1.5).mean == 3.0
    assert LawId.geometric(2).n == 1
