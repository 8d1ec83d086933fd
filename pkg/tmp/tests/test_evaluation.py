"""evaluation モジュールのテスト"""

import json
import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from conftest import (
    REFERENCE_CONSISTENT,
    REFERENCE_EXCESS_CRPS,
    REFERENCE_EXCESS_LOGLIK,
    REFERENCE_IFS,
)
from densitybench.schemes.rndmodels import lognormal_rnd
from densitybench.utils.density import ForecastDensity, make_grid
from densitybench.utils.error_handler import DataValidationError, EvaluationError
from densitybench.utils.evaluation import (
    ForecastOutcome,
    PitSequence,
    berkowitz_lr3,
    build_scoreboard,
    crps_from_cdf,
    crps_rb,
    descending_ranks,
    ifs,
    jarque_bera,
    jb_statistic,
    ks_normal,
    log_density,
    log_score,
    normalize_consistency,
    normalize_gaussian,
    pit,
    pit_histogram,
    score_table,
    tpit_descriptives,
)


class TestPit:
    """PIT の計算"""

    def test_median_gives_half(self, grid):
        sigma, tau, F = 0.2, 28 / 252, 10000.0
        density = lognormal_rnd(F, sigma, 0.0, tau, grid)
        median = F * math.exp(-0.5 * sigma ** 2 * tau)
        assert pit(density, median) == pytest.approx(0.5, abs=1e-6)

    def test_below_grid_is_clamped(self, grid):
        density = lognormal_rnd(10000.0, 0.2, 0.0, 28 / 252, grid)
        assert pit(density, 10000.0 * math.exp(-3.0)) == 1e-6
        assert pit(density, 10000.0 * math.exp(3.0)) == 1.0 - 1e-6

    def test_closed_form_lognormal(self, grid):
        sigma, tau, F = 0.2, 28 / 252, 10000.0
        density = lognormal_rnd(F, sigma, 0.0, tau, grid)
        expected = norm.cdf((0.03 + 0.5 * sigma ** 2 * tau) / (sigma * math.sqrt(tau)))
        assert pit(density, F * math.exp(0.03)) == pytest.approx(expected, abs=5e-5)

    def test_non_positive_realization_rejected(self, grid):
        density = lognormal_rnd(100.0, 0.2, 0.0, 0.1, grid)
        with pytest.raises(EvaluationError):
            pit(density, 0.0)

    def test_sequence_tpits_are_finite(self):
        seq = PitSequence.from_pits([0.0, 0.5, 1.0])
        assert np.all(np.isfinite(seq.tpits))
        assert seq.tpits[1] == pytest.approx(0.0)
        assert len(seq) == 3


class TestBerkowitz:
    """Berkowitz LR3"""

    def test_shifted_mean_rejected(self):
        y = np.random.default_rng(3).normal(2.0, 1.0, 254)
        result = berkowitz_lr3(y)
        assert result.statistic > 100.0
        assert result.p_value < 1e-10
        assert result.components["mu"] == pytest.approx(np.mean(y), abs=0.1)

    def test_alternating_sequence_rejected(self):
        y = np.tile([1.0, -1.0], 50)
        result = berkowitz_lr3(y)
        assert result.p_value < 1e-6
        assert result.components["rho"] < -0.9

    def test_standard_normal_usually_passes(self):
        y = np.random.default_rng(5).standard_normal(254)
        result = berkowitz_lr3(y)
        assert 0.0 <= result.p_value <= 1.0
        assert abs(result.components["rho"]) < 0.25
        assert "lr3_conditional" in result.components

    def test_constant_sequence_rejected(self):
        with pytest.raises(EvaluationError):
            berkowitz_lr3(np.full(50, 0.3))

    def test_short_sequence_rejected(self):
        with pytest.raises(EvaluationError):
            berkowitz_lr3(np.zeros(10))

    @pytest.mark.slow
    def test_empirical_size(self):
        rng = np.random.default_rng(2024)
        reps = 2000
        rejections = sum(berkowitz_lr3(rng.standard_normal(254)).p_value < 0.05 for _ in range(reps))
        assert 0.035 <= rejections / reps <= 0.065


class TestJarqueBera:
    """Jarque-Bera"""

    def test_statistic_matches_formula(self):
        y = np.random.default_rng(8).standard_normal(254)
        jb, s, k = jb_statistic(y)
        assert jb == pytest.approx(254 / 6 * (s ** 2 + (k - 3.0) ** 2 / 4.0))

    def test_symmetric_normal_sample_capped(self):
        n = 254
        y = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
        result = jarque_bera(y)
        assert result.components["skewness"] == pytest.approx(0.0, abs=1e-12)
        assert result.p_value == 0.5

    def test_heavy_tails_rejected(self):
        rejections = 0
        for seed in range(50):
            y = np.random.default_rng(seed).standard_t(3, 254)
            rejections += jarque_bera(y).p_value < 0.05
        assert rejections >= 45


class TestKolmogorovSmirnov:
    """KS 検定"""

    def test_single_observation(self):
        assert ks_normal([0.0]).statistic == pytest.approx(0.5)

    def test_stratified_sample(self):
        n = 200
        y = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
        assert ks_normal(y).statistic == pytest.approx(0.5 / n, rel=1e-6)

    def test_location_shift_rejected(self):
        y = np.random.default_rng(1).normal(2.0, 1.0, 254)
        assert ks_normal(y).p_value < 1e-6


class TestScores:
    """対数スコアと CRPS"""

    def test_unit_pdf_contributes_zero(self):
        g = make_grid(0.5, 101)
        density = ForecastDensity.from_cdf(g, np.clip(g + 0.5, 0.0, 1.0), 100.0, pdf=np.ones_like(g))
        assert log_density(density, 100.0) == pytest.approx(0.0)

    def test_zero_pdf_is_floored(self):
        g = make_grid(0.5, 101)
        density = ForecastDensity.from_cdf(g, np.clip(g + 0.5, 0.0, 1.0), 100.0, pdf=np.zeros_like(g))
        assert log_density(density, 100.0) == pytest.approx(math.log(1e-12))

    def test_log_score_sums(self, grid):
        densities = [lognormal_rnd(100.0, 0.2, 0.0, 0.1, grid) for _ in range(3)]
        total = log_score(densities, [100.0, 101.0, 99.0])
        assert total == pytest.approx(sum(log_density(d, x) for d, x in zip(densities, [100.0, 101.0, 99.0])))
        with pytest.raises(EvaluationError):
            log_score(densities, [100.0])

    def test_gaussian_crps_oracle(self):
        x = np.linspace(-12.0, 12.0, 48001)
        inner = crps_from_cdf(x, norm.cdf(x), 0.0)
        expected = 2.0 * norm.pdf(0.0) - 1.0 / math.sqrt(math.pi)
        assert inner == pytest.approx(expected, abs=1e-6)
        assert math.sqrt(inner) == pytest.approx(0.48342, abs=1e-4)

    def test_crps_increases_with_width(self):
        x = np.linspace(-30.0, 30.0, 60001)
        values = [crps_from_cdf(x, norm.cdf(x / s), 0.0) for s in (0.5, 1.0, 2.0, 4.0)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_point_mass_crps(self, grid):
        density = ForecastDensity.from_cdf(grid, (grid >= 0.0).astype(float), 10000.0)
        assert crps_rb(density, 10000.0) ** 2 < 1e-3
        assert crps_rb(density, 10500.0) > crps_rb(density, 10000.0)

    def test_realization_outside_mesh(self):
        x = np.linspace(-1.0, 1.0, 201)
        cdf = np.clip(x + 0.5, 0.0, 1.0)
        assert crps_from_cdf(x, cdf, 3.0) == pytest.approx(crps_from_cdf(x, cdf, 1.0) + 2.0, abs=1e-9)

    def test_crps_non_negative(self, grid):
        density = lognormal_rnd(100.0, 0.3, 0.0, 0.1, grid)
        for x in (50.0, 90.0, 100.0, 130.0):
            assert crps_rb(density, x) >= 0.0


class TestNormalization:
    """正規化スコアと IFS"""

    def test_reproduces_reference_scores(self, reference_p_fractions):
        table = score_table(reference_p_fractions, REFERENCE_EXCESS_LOGLIK, REFERENCE_EXCESS_CRPS)
        rows = table.set_index("model")
        for model, (total, cons, cons_rank, acc, acc_rank, err, err_rank) in REFERENCE_IFS.items():
            row = rows.loc[model]
            assert row["consistency"] == pytest.approx(cons, abs=0.002), model
            assert row["accuracy"] == pytest.approx(acc, abs=0.002), model
            assert row["errors"] == pytest.approx(err, abs=0.002), model
            assert row["ifs"] == pytest.approx(total, abs=0.002), model
            assert row["consistency_rank"] == cons_rank, model
            assert row["accuracy_rank"] == acc_rank, model
            assert row["errors_rank"] == err_rank, model
        reference_order = sorted(REFERENCE_IFS, key=lambda m: -REFERENCE_IFS[m][0])
        assert list(table["model"]) == reference_order
        assert set(table.loc[table["consistent"], "model"]) == REFERENCE_CONSISTENT

    def test_spot_anchors(self, reference_p_fractions):
        consistency = normalize_consistency(reference_p_fractions)
        assert consistency["VG"] == pytest.approx(0.867, abs=0.001)
        assert consistency["GJR-FHS(5y)"] == pytest.approx(0.929, abs=0.001)
        assert consistency["HESTON"] == pytest.approx(0.260, abs=0.001)
        accuracy = normalize_gaussian(REFERENCE_EXCESS_LOGLIK, higher_better=True)
        errors = normalize_gaussian(REFERENCE_EXCESS_CRPS, higher_better=False)
        assert accuracy["VG"] == pytest.approx(0.914, abs=0.002)
        assert errors["VG"] == pytest.approx(0.859, abs=0.002)

    def test_permutation_invariance(self, reference_p_fractions):
        base = score_table(reference_p_fractions, REFERENCE_EXCESS_LOGLIK, REFERENCE_EXCESS_CRPS)
        models = list(reference_p_fractions)[::-1]
        shuffled = score_table({m: reference_p_fractions[m] for m in models},
                               {m: REFERENCE_EXCESS_LOGLIK[m] for m in models},
                               {m: REFERENCE_EXCESS_CRPS[m] for m in models})
        assert base.equals(shuffled)

    def test_single_model(self):
        table = score_table({"VG": (0.2, 0.5, 0.1)}, {"VG": 31.0}, {"VG": -0.3})
        row = table.iloc[0]
        assert row["accuracy"] == 0.5 and row["errors"] == 0.5
        assert row["consistency"] == pytest.approx(0.75 + 0.25)

    def test_mismatched_models(self):
        with pytest.raises(EvaluationError):
            score_table({"A": (0.1, 0.1, 0.1)}, {"B": 1.0}, {"A": 1.0})

    def test_degenerate_consistency_scale(self):
        scores = normalize_consistency({"A": (0.2, 0.01, 0.3), "B": (0.2, 0.01, 0.3)})
        assert scores["A"] == pytest.approx(0.5 + 0.25)

    def test_mean_value_is_half(self):
        scores = normalize_gaussian({"A": 1.0, "B": 2.0, "C": 3.0})
        assert scores["B"] == pytest.approx(0.5)

    def test_ifs_examples(self):
        assert ifs(0.867, 0.914, 0.859) == pytest.approx(0.880, abs=5e-4)
        assert round(ifs(0.929, 0.868, 0.793), 3) == 0.863
        assert ifs(1.0, 1.0, 1.0) == 1.0

    def test_ranks_use_minimum_on_ties(self):
        assert descending_ranks({"a": 0.5, "b": 0.9, "c": 0.5}) == {"b": 1, "a": 2, "c": 2}

    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=15, unique=True))
    def test_gaussian_scores_preserve_order(self, values):
        data = {f"m{i}": v for i, v in enumerate(values)}
        scores = normalize_gaussian(data)
        assert all(0.0 <= s <= 1.0 for s in scores.values())
        by_value = sorted(data, key=data.get)
        by_score = [scores[m] for m in by_value]
        assert all(b >= a for a, b in zip(by_score, by_score[1:]))

    @given(st.lists(st.tuples(*[st.floats(0.0, 1.0)] * 3), min_size=1, max_size=15))
    def test_consistency_in_unit_interval(self, rows):
        scores = normalize_consistency({f"m{i}": r for i, r in enumerate(rows)})
        assert all(0.0 <= s <= 1.0 + 1e-12 for s in scores.values())

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5))
    def test_ifs_symmetric_and_monotone(self, a, b, c, bump):
        assert ifs(a, b, c) == pytest.approx(ifs(c, a, b))
        assert ifs(min(a + bump, 1.0), b, c) >= ifs(a, b, c)


class TestDescriptives:
    """T-PIT 記述統計と PIT ヒストグラム"""

    def test_histogram_counts(self):
        pits = np.random.default_rng(0).uniform(size=254)
        hist = pit_histogram(pits)
        assert len(hist) == 20
        assert hist["count"].sum() == 254
        assert hist["expected"].iloc[0] == pytest.approx(254 / 20)

    def test_descriptive_fields(self):
        y = np.random.default_rng(0).standard_normal(500)
        stats = tpit_descriptives(y)
        assert set(stats) == {"mean", "p05", "median", "p95", "std", "skewness", "kurtosis", "ar1"}
        assert stats["p05"] < stats["median"] < stats["p95"]
        assert stats["std"] == pytest.approx(np.std(y, ddof=1))


def _outcomes(model, n, rng, scale=1.0, start=date(2005, 1, 21)):
    out = []
    for i in range(n):
        p = float(norm.cdf(rng.standard_normal() * scale))
        out.append(ForecastOutcome(model=model, obs_date=start + timedelta(days=28 * i), pit=p,
                                   log_density=float(rng.normal(-7.0, 1.0)),
                                   crps=float(abs(rng.normal(0.04, 0.01)))))
    return out


class TestScoreBoard:
    """ScoreBoard の構築"""

    @pytest.fixture
    def outcomes(self):
        rng = np.random.default_rng(42)
        return {
            "LN-HIS(6m)": _outcomes("LN-HIS(6m)", 60, rng),
            "LN-ATM": _outcomes("LN-ATM", 60, rng),
            "VG": _outcomes("VG", 55, rng, scale=2.0),
        }

    def test_benchmark_excess_is_zero(self, outcomes):
        board = build_scoreboard(outcomes, ["LN-HIS(6m)", "LN-ATM", "VG"], split_date=date(2007, 1, 1),
                                 exclusions={"VG": 5})
        bench = board.get("LN-HIS(6m)")
        assert bench.loglik_excess == 0.0 and bench.crps_excess == 0.0
        assert not board.benchmark_fallback
        assert board.get("VG").n_excluded == 5
        assert board.get("VG").n_cycles == 55
        table4 = board.table4().set_index("model")
        assert table4.loc["LN-HIS(6m)", "entire_sample"] == pytest.approx(bench.loglik)
        assert table4.loc["LN-ATM", "entire_sample"] == pytest.approx(board.get("LN-ATM").loglik - bench.loglik)

    def test_fallback_benchmark(self, outcomes):
        board = build_scoreboard(outcomes, ["LN-ATM", "VG"])
        assert board.benchmark == "LN-ATM"
        assert board.benchmark_fallback
        assert board.get("LN-ATM").loglik_excess == 0.0
        assert bool(board.table5()["benchmark_fallback"].all())

    def test_benchmark_without_cycles(self, outcomes):
        outcomes = {**outcomes, "LN-HIS(6m)": []}
        with pytest.raises(DataValidationError, match="no scored cycles"):
            build_scoreboard(outcomes, ["LN-HIS(6m)", "LN-ATM", "VG"], exclusions={"LN-HIS(6m)": 60})

    def test_subperiods_partition_cycles(self, outcomes):
        split = date(2007, 1, 1)
        board = build_scoreboard(outcomes, ["LN-HIS(6m)"], split_date=split)
        score = board.get("LN-HIS(6m)")
        parts = list(score.subperiods.values())
        assert sum(p["n"] for p in parts) == 60
        assert sum(p["loglik"] for p in parts) == pytest.approx(score.loglik)

    def test_overdispersed_model_fails(self, outcomes):
        board = build_scoreboard(outcomes, ["LN-HIS(6m)", "LN-ATM", "VG"])
        vg = board.get("VG")
        assert vg.berkowitz.p_value < 0.05
        assert not vg.consistent
        assert vg.ifs == pytest.approx((vg.consistency + vg.accuracy + vg.errors) / 3.0)

    def test_json_is_deterministic(self, outcomes):
        roster = ["LN-HIS(6m)", "LN-ATM", "VG"]
        first = build_scoreboard(outcomes, roster).to_json()
        shuffled = {m: list(reversed(v)) for m, v in outcomes.items()}
        second = build_scoreboard(shuffled, roster).to_json()
        assert first == second
        document = json.loads(first)
        assert [m["model"] for m in document["models"]] == roster

    def test_tables_have_one_row_per_model(self, outcomes):
        board = build_scoreboard(outcomes, ["LN-HIS(6m)", "LN-ATM", "VG"])
        for frame in (board.table2(), board.table3(), board.table4(), board.table5(), board.table6()):
            assert len(frame) == 3
        assert board.table6()["group"].iloc[-1] in ("consistent", "non-consistent")
