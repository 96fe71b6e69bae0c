import csv
import math

import numpy as np
import pytest

from cardecon import INDEX_NAMES
from cardecon.ingest import aggregate_file, load_region_table
from cardecon.indicators import compute_indicators
from cardecon.normalize import LOGNORMAL, fit_distribution
from cardecon.synthgen import (
    FILE_NAMES,
    SynthConfig,
    SynthConfigError,
    generate,
    load_ground_truth,
    solve_link,
    theoretical_r2,
)


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def test_byte_identical_for_same_seed(tmp_path):
    cfg = SynthConfig(transactions_total=20_000, region_count=8, mean_merchants_per_region=80, seed=4)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    for name in FILE_NAMES.values():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    other = SynthConfig(transactions_total=20_000, region_count=8, mean_merchants_per_region=80, seed=5)
    generate(other, tmp_path / "c")
    assert (tmp_path / "a" / "indices.csv").read_bytes() != (tmp_path / "c" / "indices.csv").read_bytes()


@pytest.mark.parametrize("kwargs", [
    {"region_count": 1},
    {"transactions_total": -1},
    {"mean_merchants_per_region": 10},
    {"noise_sd": -0.1},
    {"noise_sd": (0.1, 0.2)},
    {"target_r2": 1.5},
    {"night_propensity": 0.0},
    {"business_share_range": (0.9, 0.4)},
    {"index_loadings": ((1.0,),)},
])
def test_config_validation(kwargs):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kwargs)


def test_empty_corpus(tmp_path):
    res = generate(SynthConfig(transactions_total=0, region_count=6, seed=1), tmp_path)
    assert res.indicators.values.shape == (6, 35)
    assert np.all(res.indicators.values == 0)
    assert res.ground_truth["planted_on"] == "factors"
    rows = _read_rows(res.transactions_path)
    assert rows == []


def test_file_ingest_matches_in_memory_tally(small_corpus):
    regions, ext = load_region_table(small_corpus.region_table_path)
    res = aggregate_file(small_corpus.transactions_path, regions, ext)
    assert res.report.rows_rejected == 0
    assert res.report.rows_accepted == 200_000
    m = compute_indicators(res.aggregates, res.merchants, res.regions)
    assert np.array_equal(m.values, small_corpus.indicators.values)


def test_night_and_weekend_rates_within_three_sigma(small_corpus):
    truth = small_corpus.ground_truth
    rows = _read_rows(small_corpus.transactions_path)
    ids = truth["region_ids"]
    pos = {r: i for i, r in enumerate(ids)}
    n = np.zeros(len(ids))
    night = np.zeros(len(ids))
    weekend = np.zeros(len(ids))
    from datetime import datetime
    for row in rows:
        if row["customer_kind"] != "D":
            continue
        i = pos[row["home_region_or_country"]]
        t = datetime.strptime(row["timestamp"], "%Y-%m-%dT%H:%M")
        n[i] += 1
        night[i] += t.hour >= 22 or t.hour < 6
        weekend[i] += t.weekday() >= 5
    for obs, p in ((night, np.array(truth["night_propensity"])), (weekend, np.array(truth["weekend_propensity"]))):
        expect = np.sum(n * p)
        sd = math.sqrt(np.sum(n * p * (1 - p)))
        assert abs(obs.sum() - expect) <= 3 * sd
    assert np.array_equal(n, truth["domestic_txns_by_home"])


def test_density_indicator_tracks_activity_driver(small_corpus):
    truth = small_corpus.ground_truth
    # the first latent factor is the activity-density factor
    d = np.array(truth["factors"])[:, 0]
    x = np.log(small_corpus.indicators.column(1))
    assert np.corrcoef(d, x)[0, 1] > 0.5


def test_noiseless_indices_refit_to_planted_parameters(small_corpus):
    truth = load_ground_truth(small_corpus.ground_truth_path)
    assert truth["planted_on"] == "pc_scores"
    rows = _read_rows(small_corpus.indices_path)
    for e in truth["indices"]:
        y = np.array([float(r[e["name"]]) for r in rows])
        fit = fit_distribution(y)
        assert fit.family == e["family"]
        assert fit.mu == pytest.approx(e["mu"], abs=1e-9)
        assert fit.sigma == pytest.approx(e["sigma"], rel=1e-9)
        assert e["theoretical_r2"] == 1.0


def test_solve_link_standardizes():
    u = np.random.default_rng(3).normal(size=52) ** 3
    a, b = solve_link(u)
    from scipy import special
    z = special.ndtri(special.expit(a + b * u))
    assert abs(z.mean()) < 1e-10 and abs(z.std() - 1) < 1e-9
    with pytest.raises(SynthConfigError):
        solve_link(np.ones(5))


def _truth(family, mu, sigma, noise, seed=0):
    z = np.random.default_rng(seed).standard_normal(52)
    z = (z - z.mean()) / z.std()
    return {"seed": seed, "indices": [{"family": family, "mu": mu, "sigma": sigma, "z": z.tolist(),
                                       "noise_sd": noise}]}


def test_theoretical_r2_limits():
    assert theoretical_r2(_truth("normal", 5.0, 2.0, 0.0))[0] == 1.0
    assert theoretical_r2(_truth("normal", 5.0, 2.0, 1.0))[0] == pytest.approx(0.5, abs=0.01)
    assert theoretical_r2(_truth("normal", 5.0, 2.0, 1e3))[0] < 1e-3
    assert theoretical_r2(_truth(LOGNORMAL, 1.0, 0.3, 1e2))[0] < 1e-3


def test_target_r2_sets_noise(tmp_path):
    cfg = SynthConfig(transactions_total=30_000, region_count=20, mean_merchants_per_region=80,
                      target_r2=0.7, seed=2)
    res = generate(cfg, tmp_path)
    for e in res.ground_truth["indices"]:
        assert e["noise_sd"] > 0
        assert e["theoretical_r2"] == pytest.approx(0.7, abs=1e-6)
    assert [e["name"] for e in res.ground_truth["indices"]] == list(INDEX_NAMES)
