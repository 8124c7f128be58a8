import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sepmodel.errors import (
    DataFormatError,
    InsufficientDataError,
    NotOverdispersedError,
    ParameterDomainError,
)
from sepmodel.initiation import (
    NegBinomParams,
    chi2_gof,
    fit_negbinom,
    merge_bins,
    negbinom_pmf,
    pearson_test,
    read_daily_counts,
    sample_initiations,
)

from conftest import INITIATION


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(0.05, 0.95), st.integers(0, 60))
def test_pmf_matches_scipy(r, p, k):
    assert negbinom_pmf(NegBinomParams(r, p), k) == pytest.approx(stats.nbinom.pmf(k, r, p), rel=1e-10)


def test_reference_values():
    assert negbinom_pmf(INITIATION, 0) == pytest.approx(0.59725 ** 3, rel=1e-12)
    assert negbinom_pmf(INITIATION, 0) == pytest.approx(0.21304, abs=5e-6)
    assert INITIATION.mean == pytest.approx(2.0230, abs=1e-4)


def test_parameter_domain():
    with pytest.raises(ParameterDomainError):
        NegBinomParams(0, 0.5)
    with pytest.raises(ParameterDomainError):
        NegBinomParams(2.5, 0.5)
    with pytest.raises(ParameterDomainError):
        NegBinomParams(2, 1.0)


def test_sampler_moments():
    k = sample_initiations(INITIATION, np.random.default_rng(0), 200_000)
    assert k.mean() == pytest.approx(INITIATION.mean, rel=0.01)
    assert k.var() == pytest.approx(INITIATION.var, rel=0.03)
    assert isinstance(sample_initiations(INITIATION, np.random.default_rng(0)), int)


def test_profile_is_maximal():
    # within each r, no p on a fine grid beats r / (r + mean)
    k = sample_initiations(INITIATION, np.random.default_rng(1), 3000)
    fit = fit_negbinom(k)
    grid = np.linspace(0.05, 0.95, 901)
    best = max(((r, p) for r in range(1, 21) for p in grid),
               key=lambda rp: stats.nbinom.logpmf(k, *rp).sum())
    assert fit.r == best[0]
    assert fit.p == pytest.approx(best[1], abs=1e-3)
    assert stats.nbinom.logpmf(k, fit.r, fit.p).sum() >= stats.nbinom.logpmf(k, *best).sum() - 1e-9


def test_rejects_poisson_like_data():
    k = np.random.default_rng(2).poisson(3.0, 2000)
    if k.var(ddof=1) > k.mean():
        k = np.full(2000, 3)
    with pytest.raises(NotOverdispersedError):
        fit_negbinom(k)


def test_too_few_days():
    with pytest.raises(InsufficientDataError):
        fit_negbinom([1, 0, 5])


def test_merge_bins():
    groups, O, E = merge_bins([1, 2, 3, 4, 5], [2.0, 4.0, 6.0, 1.0, 1.0], 5.0)
    assert groups == [[0, 1], [2, 3, 4]]
    np.testing.assert_array_equal(O, [3, 12])
    np.testing.assert_array_equal(E, [6.0, 8.0])


def test_pearson_against_scipy():
    O = np.array([18.0, 25.0, 30.0, 27.0])
    E = np.array([20.0, 25.0, 25.0, 30.0])
    stat, dof, p = pearson_test(O, E, n_estimated=1)
    ref = stats.chisquare(O, E, ddof=1)
    assert stat == pytest.approx(ref.statistic)
    assert p == pytest.approx(ref.pvalue)
    assert dof == 2


def test_gof_bins_cover_sample():
    k = sample_initiations(INITIATION, np.random.default_rng(3), 2310)
    rep = chi2_gof(k, fit_negbinom(k))
    assert sum(o for _, o, _ in rep.bins) == 2310
    assert sum(e for _, _, e in rep.bins) == pytest.approx(2310)
    assert all(e >= 5 for _, _, e in rep.bins)
    assert rep.bins[-1][0][1] == "inf"
    assert rep.dof == len(rep.bins) - 3


def test_gof_detects_wrong_model():
    k = sample_initiations(NegBinomParams(1, 0.2), np.random.default_rng(4), 2000)
    assert chi2_gof(k, NegBinomParams(3, 0.59725)).p_value < 1e-6


def test_read_counts(tmp_path):
    f = tmp_path / "counts.csv"
    f.write_text("date,count\n2005-07-01,3\n2005-07-02,0\n")
    assert read_daily_counts(f) == [3, 0]
    f.write_text("date,count\n2005-07-01,x\n")
    with pytest.raises(DataFormatError, match="line 2"):
        read_daily_counts(f)
