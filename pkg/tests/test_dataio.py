import datetime as dt

import numpy as np
import pytest
from scipy import integrate, stats

from sepmodel.dataio import (
    BINARY,
    CONTINUOUS,
    FAMILIES,
    MOMENTS,
    NONZERO_SHARE,
    RANGES,
    StudyWindow,
    SurveyRecord,
    TransactionRecord,
    build_observations,
    continuous_law,
    feature_names,
    fit_truncated_lognormal,
    generate_synthetic_population,
    generate_synthetic_visits,
    load_and_merge,
    read_surveys,
    read_transactions,
    standardize_features,
    write_surveys,
)
from sepmodel.errors import DataFormatError, DomainError
from sepmodel.likelihood import RegressionCoefficients

from conftest import FEATURELESS, INITIATION


@pytest.fixture(scope="module")
def population():
    return generate_synthetic_population(400, seed=4)


def survey(cid, **over):
    vals = {p: 0 for p in BINARY}
    vals.update({"gender_male": 1, "gender_female": 0, "gender_transgender": 0})
    vals.update({c: 0 for c in FAMILIES["ethnicity"]})
    vals["eth_white"] = 1
    vals.update({"age": 30.0, "age_first_injection": 20.0, "injection_span": 10.0,
                 "injections_per_day": 2.0, "reuse_own_30d": 0.0, "use_behind_others_30d": 0.0,
                 "days_in_area_30d": 25.0})
    vals.update(over)
    return SurveyRecord(cid, vals, "60601")


class TestWindow:
    def test_parse(self):
        w = StudyWindow.parse("2005-07-01:2005-07-11")
        assert w.open_days == 10
        assert w.end == dt.date(2005, 7, 11)
        assert w.day(dt.date(2005, 7, 3)) == 2
        assert w.date(2) == dt.date(2005, 7, 3)

    def test_bad_window(self):
        with pytest.raises(DomainError):
            StudyWindow.parse("2005-07-11:2005-07-01")
        with pytest.raises(DomainError):
            StudyWindow.parse("yesterday")


class TestSurveys:
    def test_validation(self):
        with pytest.raises(DomainError):
            survey("a", snort=2)
        with pytest.raises(DomainError):
            survey("a", gender_female=1)
        with pytest.raises(DomainError):
            survey("a", age=12.0)

    def test_at_risk(self):
        assert not survey("a").at_risk
        assert survey("a", reuse_own_30d=2.0).at_risk
        assert survey("a", use_behind_others_30d=1.0).at_risk

    def test_round_trip(self, tmp_path, population):
        write_surveys(tmp_path / "s.csv", population[:20])
        back = read_surveys(tmp_path / "s.csv")
        assert list(back) == [r.client_id for r in population[:20]]
        assert back[population[3].client_id].values == population[3].values

    def test_bad_row_reports_line(self, tmp_path, population):
        write_surveys(tmp_path / "s.csv", population[:3])
        lines = (tmp_path / "s.csv").read_text().splitlines()
        lines[2] = lines[2].replace(",", ",9", 1)
        (tmp_path / "s.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="line 3"):
            read_surveys(tmp_path / "s.csv")


class TestStandardize:
    def test_columns(self, population):
        feats, meta = standardize_features(population)
        names = feature_names(meta)
        # one reference level dropped per family
        assert len(names) == len(BINARY) + 2 + 5 + len(CONTINUOUS)
        assert "gender_male" not in names and "eth_white" not in names
        X = np.vstack([f.x for f in feats])
        for name in CONTINUOUS:
            j = names.index(name)
            assert X[:, j].mean() == pytest.approx(0.0, abs=1e-10)
            assert X[:, j].std() == pytest.approx(1.0, rel=1e-10)

    def test_metadata_reuse(self, population):
        _, meta = standardize_features(population)
        a, _ = standardize_features(population[:5], meta)
        b, _ = standardize_features(population)
        np.testing.assert_array_equal(a[2].x, b[2].x)

    def test_constant_column_excluded(self):
        recs = [survey("a"), survey("b", age=40.0)]
        with pytest.warns(RuntimeWarning):
            _, meta = standardize_features(recs)
        assert "injection_span" in meta["excluded"]


class TestSyntheticPopulation:
    def test_marginals(self):
        pop = generate_synthetic_population(20_000, seed=1)
        for name in CONTINUOUS:
            v = np.array([r.values[name] for r in pop])
            mean, sd = MOMENTS[name]
            lo, hi = RANGES[name]
            assert v.min() >= lo and v.max() <= hi
            assert v.mean() == pytest.approx(mean, rel=0.05, abs=0.02)
            assert v.std() == pytest.approx(sd, rel=0.06)
        for name, share in NONZERO_SHARE.items():
            v = np.array([r.values[name] for r in pop])
            assert (v > 0).mean() == pytest.approx(share, abs=0.01)

    def test_reproducible(self):
        a = generate_synthetic_population(50, seed=9)
        b = generate_synthetic_population(50, seed=9)
        assert [r.values for r in a] == [r.values for r in b]

    def test_lognormal_moments_by_quadrature(self):
        mean, sd = MOMENTS["age"]
        lo, hi = RANGES["age"]
        mu, sigma, err = fit_truncated_lognormal(mean, sd, lo, hi)
        assert err < 1e-6
        dist = stats.lognorm(sigma, scale=np.exp(mu))
        mass = dist.cdf(hi) - dist.cdf(lo)
        m1 = integrate.quad(lambda x: x * dist.pdf(x), lo, hi)[0] / mass
        m2 = integrate.quad(lambda x: x * x * dist.pdf(x), lo, hi)[0] / mass
        assert m1 == pytest.approx(mean, rel=1e-6)
        assert np.sqrt(m2 - m1 ** 2) == pytest.approx(sd, rel=1e-6)

    def test_beta_fallback_moments(self):
        law = continuous_law("days_in_area_30d")
        assert law[0] == "beta"
        _, a, b, lo, hi = law
        d = stats.beta(a, b, loc=lo, scale=hi - lo)
        assert d.mean() == pytest.approx(MOMENTS["days_in_area_30d"][0])
        assert d.std() == pytest.approx(MOMENTS["days_in_area_30d"][1])


class TestMerge:
    def test_build_observations(self):
        w = StudyWindow(dt.date(2005, 7, 1), 100)
        obs = build_observations({"b": [5, 5, 20], "a": [90]}, w)
        assert obs.client_ids == ["a", "b"]
        np.testing.assert_array_equal(obs.uncensored_t, [15.0])
        np.testing.assert_array_equal(obs.uncensored_client, [1])
        np.testing.assert_array_equal(obs.censored_t, [10.0, 80.0])

    @pytest.mark.filterwarnings("ignore:continuous column")
    def test_drop_reasons(self):
        w = StudyWindow(dt.date(2005, 7, 1), 30)
        surveys = {"a": survey("a"), "b": survey("b", age=50.0)}
        day = lambda k: w.date(k)
        tx = [TransactionRecord("a", day(1), "L1", 10, 1),
              TransactionRecord("a", day(1), "L2", 5, 1),
              TransactionRecord("a", day(40), "L1", 5, 1),
              TransactionRecord("b", day(3), "L1", 5, 1),
              TransactionRecord("b", day(9), "L1", 5, 1),
              TransactionRecord("z", day(2), "L1", 5, 1)]
        feats, obs, rep = load_and_merge(tx, surveys, w, return_report=True)
        assert dict(rep.dropped) == {"same_day_duplicate": 1, "outside_window": 1, "no_survey": 1}
        assert rep.rows_used == 3 and rep.clients == 2
        np.testing.assert_array_equal(obs.uncensored_t, [6.0])
        np.testing.assert_array_equal(obs.censored_t, [29.0, 21.0])
        assert [f.client_id for f in feats] == ["a", "b"]

    def test_bad_transaction_file(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("client_id,date,location_id,syringes,group_size\nC1,2005-13-01,L1,3,1\n")
        with pytest.raises(DataFormatError, match="line 2"):
            read_transactions(f)

    def test_generated_files_reproduce_gaps(self, tmp_path, population):
        _, meta = standardize_features(population)
        coeffs = RegressionCoefficients.featureless(FEATURELESS, tuple(feature_names(meta)))
        w = StudyWindow(dt.date(2005, 7, 1), 400)
        gen = generate_synthetic_visits(population, coeffs, INITIATION, w, seed=2, warmup_days=600)
        (tmp_path / "t.csv").write_text(gen.transactions_csv)
        (tmp_path / "s.csv").write_text(gen.surveys_csv)
        feats, obs = load_and_merge(tmp_path / "t.csv", tmp_path / "s.csv", w)
        assert obs.same_as(gen.observations)
        assert len(feats) == obs.n_clients == gen.ground_truth["n_clients"]
