"""スキームレジストリと run_scheme のテスト"""

import numpy as np
import pytest

from densitybench.schemes import (
    ALL_SCHEMES,
    BENCHMARK,
    SCHEMES,
    SchemeInputs,
    parse_roster,
    run_scheme,
)
from densitybench.schemes.rndmodels import atm_vol, lognormal_rnd, rnd_from_cf
from densitybench.utils.density import make_grid
from densitybench.utils.error_handler import ConfigError, DataValidationError, InsufficientQuotesError
from densitybench.utils.evaluation import PitSequence, berkowitz_lr3, jarque_bera, ks_normal, log_density, pit
from densitybench.utils.pricing import HestonParams
from densitybench.utils.synth import WorldParams, synth_generate


def _inputs(history, index=400, **kwargs):
    day = history.dates[index].astype(object)
    return SchemeInputs(obs_date=day, expiry=history.dates[index + 20].astype(object),
                        f_t=float(history.settles[index]), tau_business=20, history=history,
                        n_paths=20_000, **kwargs)


class TestRegistry:
    def test_fifteen_schemes(self):
        assert len(ALL_SCHEMES) == 15
        assert BENCHMARK in SCHEMES
        assert sum(s.needs_options for s in SCHEMES.values()) == 5
        assert SCHEMES["GJR-FHS(5y)"].window_label == "5y"

    def test_parse_roster(self):
        assert parse_roster("all") == list(ALL_SCHEMES)
        assert parse_roster("VG, LN-ATM,VG") == ["VG", "LN-ATM"]
        assert parse_roster(["LN-HIS(6m)"]) == ["LN-HIS(6m)"]

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError) as excinfo:
            parse_roster("VG,SABR")
        assert excinfo.value.problems == ["unknown scheme SABR"]


class TestRunScheme:
    """1 サイクル分の予測"""

    def test_lognormal_historical(self, random_walk_history, coarse_grid):
        inputs = _inputs(random_walk_history, grid=coarse_grid)
        density, audit = run_scheme(SCHEMES["LN-HIS(6m)"], inputs, np.random.SeedSequence(1))
        assert density.model == "LN-HIS(6m)"
        assert density.obs_date == inputs.obs_date
        assert audit["params"]["sigma"] == pytest.approx(0.012, rel=0.2)
        assert audit["window_end"] == str(inputs.obs_date)
        assert density.check_invariants(mass_tol=5e-3) == []

    def test_same_seed_same_density(self, random_walk_history, coarse_grid):
        inputs = _inputs(random_walk_history, grid=coarse_grid)
        a, _ = run_scheme(SCHEMES["BTS(6m)"], inputs, np.random.SeedSequence(5))
        b, _ = run_scheme(SCHEMES["BTS(6m)"], inputs, np.random.SeedSequence(5))
        np.testing.assert_array_equal(a.cdf, b.cdf)

    def test_window_must_fit(self, random_walk_history, coarse_grid):
        inputs = _inputs(random_walk_history, index=300, grid=coarse_grid)
        with pytest.raises(DataValidationError):
            run_scheme(SCHEMES["LN-HIS(5y)"], inputs, np.random.SeedSequence(1))

    def test_lognormal_atm(self, random_walk_history, flat_cross_section, coarse_grid):
        inputs = _inputs(random_walk_history, grid=coarse_grid, cross_section=flat_cross_section)
        density, audit = run_scheme(SCHEMES["LN-ATM"], inputs, np.random.SeedSequence(1))
        assert audit["params"]["sigma"] == pytest.approx(0.2, abs=1e-10)
        assert audit["n_options"] == len(flat_cross_section)
        assert density.model == "LN-ATM"

    def test_risk_neutral_needs_cross_section(self, random_walk_history, coarse_grid):
        inputs = _inputs(random_walk_history, grid=coarse_grid)
        with pytest.raises(InsufficientQuotesError):
            run_scheme(SCHEMES["BL-MALZ"], inputs, np.random.SeedSequence(1))


def _world_inputs(dataset, section, grid):
    cycle = next(c for c in dataset.truth if c["obs_date"] == section.obs_date.isoformat())
    inputs = SchemeInputs(obs_date=section.obs_date, expiry=section.expiry, f_t=section.futures,
                          tau_business=cycle["tau_business"], history=dataset.history,
                          cross_section=section, n_paths=10_000, grid=grid)
    return inputs, cycle


class TestSyntheticWorlds:
    """真の分布が既知の合成世界での予測の質"""

    @pytest.mark.slow
    def test_matched_model_passes_pit_tests(self, coarse_grid):
        dataset = synth_generate(WorldParams(world="lognormal", sigma=0.2), 200, 3)
        assert len(dataset.cross_sections) == 200
        pits = []
        for section in dataset.cross_sections:
            inputs, _ = _world_inputs(dataset, section, coarse_grid)
            density, _ = run_scheme(SCHEMES["LN-ATM"], inputs, np.random.SeedSequence(0))
            pits.append(pit(density, dataset.realizations[section.expiry]))
        tpits = PitSequence.from_pits(pits).tpits
        for test in (berkowitz_lr3, jarque_bera, ks_normal):
            assert test(tpits).passed(0.05), test.__name__

    @pytest.mark.slow
    def test_true_density_has_best_log_score(self):
        grid = make_grid(0.75, 301)
        dataset = synth_generate(WorldParams(world="heston"), 500, 5)
        sections = dataset.cross_sections
        assert len(sections) >= 490

        scores = {"HESTON": 0.0, "LN-ATM": 0.0, "LN-HIS(6m)": 0.0}
        narrow_pits = []
        for i, section in enumerate(sections):
            inputs, cycle = _world_inputs(dataset, section, grid)
            realization = dataset.realizations[section.expiry]
            truth = rnd_from_cf("HESTON", HestonParams(**cycle["params"]), section.futures, section.tau, grid)
            scores["HESTON"] += log_density(truth, realization)
            for name in ("LN-ATM", "LN-HIS(6m)"):
                density, _ = run_scheme(SCHEMES[name], inputs, np.random.SeedSequence(i))
                scores[name] += log_density(density, realization)
            narrow = lognormal_rnd(section.futures, 0.5 * atm_vol(section), section.r_eff, section.tau, grid)
            narrow_pits.append(pit(narrow, realization))

        assert scores["HESTON"] > scores["LN-ATM"]
        assert scores["HESTON"] > scores["LN-HIS(6m)"]

        tpits = PitSequence.from_pits(narrow_pits).tpits
        assert not (berkowitz_lr3(tpits).passed(0.05) and jarque_bera(tpits).passed(0.05))
