"""Synthetic regions, card transactions and official indices with a planted signal.

Every region gets a latent factor vector. The factors drive population
density, spending rate, prices, income, night/weekend habits, mobility,
attractiveness to visitors and the category mix, so the 35 indicators
computed downstream carry a low-rank structure. Official indices are then
planted through the model's own chain: the corpus is tallied in memory,
indicators are normalized and decomposed exactly as the pipeline does, and
each index is ``F^-1(sigmoid(a + b * loadings . scores))`` with ``(a, b)``
chosen so that refitting ``F`` on the generated values reproduces it. A
noise term on the standard normal scale then sets the achievable R^2.

Random streams are Philox-4x64 generators keyed by ``(seed, stream)``:
stream 0 for region-level draws, ``1 + 2r`` for region ``r``'s merchants,
``2 + 2r`` for the transactions generated in region block ``r`` and
``2**32`` for index noise.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv
from scipy import optimize, special

from . import INDEX_NAMES, _io
from .ingest import (
    N_CATEGORIES,
    N_GROUPS,
    TRANSACTION_COLUMNS,
    RegionMeta,
    RegionTable,
    TransactionBatch,
    TransactionTally,
    compute_business_share,
    write_region_table,
)
from .indicators import INDICATOR_NAMES, IndicatorMatrix, compute_indicators
from .normalize import LOGNORMAL, NORMAL, NormalizationError, fit_columns, fit_distribution, normalize_columns
from .decompose import DecompositionError, fit_pca, project

TRUTH_FORMAT = "cardecon-synth-truth/1"
NOISE_STREAM = 2 ** 32
MC_DRAWS = 1_000_000

DRIVERS = (
    "population_density",  # log scale
    "spend_rate",  # log transactions per customer
    "price_level",  # log amount offset at merchants of the region
    "income",  # logit of choosing a premium merchant
    "night",  # logit offset of night propensity
    "weekend",  # logit offset of weekend propensity
    "mobility",  # logit offset of leaving the home region
    "attractiveness",  # log weight as a domestic destination
    "foreign_appeal",  # log weight for foreign visitors
    "concentration",  # log sharpness of the category mix
)

COUNTRY_CODES = ("FR", "DE", "GB", "IT", "PT", "NL", "BE", "US", "CH", "SE")

# (family, mu, sigma) on the scale of each index; lognormal mu/sigma are in log units
DEFAULT_INDEX_PARAMS = (
    (LOGNORMAL, math.log(22000.0), 0.25),  # gdp per capita, EUR
    (LOGNORMAL, math.log(1500.0), 0.35),  # housing price, EUR per m2
    (NORMAL, 20.0, 5.0),  # unemployment rate, %
    (NORMAL, 30.0, 6.0),  # higher education, %
    (LOGNORMAL, math.log(45.0), 0.30),  # crimes per 1000 inhabitants
    (NORMAL, 82.0, 1.2),  # life expectancy, years
)


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    region_count: int = 52
    transactions_total: int = 1_000_000
    mean_customers_per_region: int = 2000
    mean_merchants_per_region: int = 200
    latent_factors: int = 3
    foreign_fraction: float = 0.08
    # factor -> category-mix loadings, shape (latent_factors, 76); drawn from the seed when None
    category_loadings: tuple | None = None
    category_loading_scale: float = 0.6
    foreign_category_mix: tuple | None = None
    # factor -> index loadings on the standardized leading components, shape (6, latent_factors)
    index_loadings: tuple | None = None
    index_params: tuple = DEFAULT_INDEX_PARAMS
    # noise standard deviation per index on the standard normal scale; a scalar applies to all
    noise_sd: float | tuple = 0.0
    # when set, overrides noise_sd so that theoretical_r2 hits this value for every index
    target_r2: float | None = None
    nonlinearity: float = 0.0
    night_propensity: float = 0.10
    weekend_propensity: float = 0.30
    foreign_night_propensity: float = 0.12
    foreign_weekend_propensity: float = 0.40
    customer_share_range: tuple = (0.05, 0.35)
    business_share_range: tuple = (0.40, 0.90)
    area_range_km2: tuple = (1500.0, 20000.0)
    idiosyncratic_sd: float = 0.15
    year: int = 2011
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def noise_vector(self) -> np.ndarray:
        v = np.broadcast_to(np.asarray(self.noise_sd, dtype=float), (len(INDEX_NAMES),))
        return v.copy()

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise SynthConfigError(msg)

        need(self.region_count >= 2, "region_count must be at least 2")
        need(self.transactions_total >= 0, "transactions_total must be nonnegative")
        need(self.mean_customers_per_region >= 1, "mean_customers_per_region must be positive")
        need(self.latent_factors >= 1, "latent_factors must be positive")
        need(0 <= self.foreign_fraction < 1, "foreign_fraction must be in [0, 1)")
        if self.transactions_total > 0:
            need(self.mean_merchants_per_region >= N_CATEGORIES,
                 f"mean_merchants_per_region must be at least {N_CATEGORIES} so every category "
                 "has a merchant in every region")
        try:
            noise = self.noise_vector()
        except ValueError:
            raise SynthConfigError("noise_sd must be a scalar or one value per index") from None
        need(np.all(np.isfinite(noise)) and np.all(noise >= 0), "noise_sd must be >= 0")
        if self.target_r2 is not None:
            need(0 < self.target_r2 <= 1, "target_r2 must be in (0, 1]")
        for name in ("night_propensity", "weekend_propensity",
                     "foreign_night_propensity", "foreign_weekend_propensity"):
            need(0 < getattr(self, name) < 1, f"{name} must be in (0, 1)")
        for name in ("customer_share_range", "business_share_range"):
            lo, hi = getattr(self, name)
            need(0 < lo <= hi <= 1, f"{name} must satisfy 0 < low <= high <= 1")
        lo, hi = self.area_range_km2
        need(0 < lo <= hi, "area_range_km2 must be positive and ordered")
        need(self.idiosyncratic_sd >= 0, "idiosyncratic_sd must be >= 0")
        if self.category_loadings is not None:
            need(np.shape(self.category_loadings) == (self.latent_factors, N_CATEGORIES),
                 f"category_loadings must have shape ({self.latent_factors}, {N_CATEGORIES})")
        if self.index_loadings is not None:
            need(np.shape(self.index_loadings) == (len(INDEX_NAMES), self.latent_factors),
                 f"index_loadings must have shape ({len(INDEX_NAMES)}, {self.latent_factors})")
        if self.foreign_category_mix is not None:
            mix = np.asarray(self.foreign_category_mix, dtype=float)
            need(mix.shape == (N_CATEGORIES,) and np.all(mix >= 0)
                 and abs(mix.sum() - 1.0) <= 1e-12,
                 "foreign_category_mix must be a probability vector over the 76 categories")
        need(len(self.index_params) == len(INDEX_NAMES), "index_params needs one entry per index")
        for fam, _mu, sig in self.index_params:
            need(fam in (NORMAL, LOGNORMAL) and sig > 0, "index_params entries are (family, mu, sigma>0)")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def substream(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed % 2 ** 64, stream % 2 ** 64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sample(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from a cumulative weight vector."""
    return np.minimum(np.searchsorted(cum, u * cum[-1], side="right"), cum.size - 1)


def category_group(category: np.ndarray) -> np.ndarray:
    """Fixed category -> group map: 76 categories split into 12 consecutive groups."""
    return (np.asarray(category) - 1) * N_GROUPS // N_CATEGORIES + 1


# ---------------------------------------------------------------------------
# World: region-level quantities
# ---------------------------------------------------------------------------

@dataclass
class _World:
    region_ids: list[str]
    factors: np.ndarray  # (R, L)
    driver_loadings: np.ndarray  # (D, L)
    drivers: np.ndarray  # (R, D)
    area: np.ndarray
    customer_share: np.ndarray
    business_share: np.ndarray
    customers: np.ndarray  # bank customers per region
    domestic_txns: np.ndarray  # generated per home region
    foreign_txns: np.ndarray  # generated per merchant region
    home_mix: np.ndarray  # (R, 76)
    foreign_mix: np.ndarray  # (76,)
    category_loadings: np.ndarray  # (L, 76)
    category_price: np.ndarray  # (76,) log cents
    night_p: np.ndarray
    weekend_p: np.ndarray
    stay_p: np.ndarray
    premium_p: np.ndarray

    def driver(self, name: str) -> np.ndarray:
        return self.drivers[:, DRIVERS.index(name)]


def _build_world(cfg: SynthConfig) -> _World:
    rng = substream(cfg.seed, 0)
    R, L = cfg.region_count, cfg.latent_factors
    width = max(2, len(str(R)))
    ids = [f"R{i + 1:0{width}d}" for i in range(R)]
    F = rng.standard_normal((R, L))
    W = rng.normal(0.0, 0.5, size=(len(DRIVERS), L))
    # the first factor is the activity-density factor: it alone drives density and spend
    # rate, and travel patterns do not depend on it
    W[0], W[1] = 0.0, 0.0
    W[0, 0], W[1, 0] = 1.0, 0.5
    W[DRIVERS.index("mobility"), 0] = W[DRIVERS.index("attractiveness"), 0] = 0.0
    drivers = F @ W.T + cfg.idiosyncratic_sd * rng.standard_normal((R, len(DRIVERS)))

    lo, hi = cfg.area_range_km2
    area = np.exp(rng.uniform(math.log(lo), math.log(hi), R))
    customer_share = rng.uniform(*cfg.customer_share_range, R)
    business_share = rng.uniform(*cfg.business_share_range, R)

    dens = np.exp(drivers[:, 0])
    population = area * dens
    raw = population * customer_share
    customers = np.maximum(1, np.rint(cfg.mean_customers_per_region * R * raw / raw.sum())).astype(np.int64)

    n_foreign = int(round(cfg.transactions_total * cfg.foreign_fraction))
    n_domestic = cfg.transactions_total - n_foreign
    w_dom = customers * np.exp(drivers[:, 1])
    domestic = rng.multinomial(n_domestic, w_dom / w_dom.sum())
    w_for = np.exp(drivers[:, DRIVERS.index("foreign_appeal")]) * np.sqrt(population)
    foreign = rng.multinomial(n_foreign, w_for / w_for.sum())

    if cfg.category_loadings is not None:
        G = np.asarray(cfg.category_loadings, dtype=float)
    else:
        G = rng.normal(0.0, cfg.category_loading_scale, size=(L, N_CATEGORIES))
    base = rng.normal(0.0, 1.0, N_CATEGORIES)
    conc = np.exp(0.3 * drivers[:, DRIVERS.index("concentration")])
    logits = (base + F @ G) * conc[:, None]
    logits += cfg.idiosyncratic_sd * rng.standard_normal((R, N_CATEGORIES))
    home_mix = _softmax(logits)
    if cfg.foreign_category_mix is not None:
        foreign_mix = np.asarray(cfg.foreign_category_mix, dtype=float)
    else:
        foreign_mix = _softmax(rng.normal(0.0, 1.2, N_CATEGORIES))
    category_price = rng.normal(math.log(2500.0), 0.6, N_CATEGORIES)

    night_p = special.expit(special.logit(cfg.night_propensity) + 0.5 * drivers[:, DRIVERS.index("night")])
    weekend_p = special.expit(special.logit(cfg.weekend_propensity) + 0.5 * drivers[:, DRIVERS.index("weekend")])
    stay_p = special.expit(1.5 - 0.6 * drivers[:, DRIVERS.index("mobility")])
    premium_p = special.expit(-0.5 + drivers[:, DRIVERS.index("income")])
    return _World(ids, F, W, drivers, area, customer_share, business_share, customers,
                  domestic, foreign, home_mix, foreign_mix, G, category_price,
                  night_p, weekend_p, stay_p, premium_p)


# ---------------------------------------------------------------------------
# Merchants
# ---------------------------------------------------------------------------

@dataclass
class _Merchants:
    ids: pa.Array  # global merchant id strings
    region: np.ndarray
    category: np.ndarray
    premium: np.ndarray  # bool
    # per region: (76, 2) start and count of each (category, tier) run, plus (76,) category starts/counts
    tier_start: np.ndarray  # (R, 76, 2)
    tier_count: np.ndarray
    cat_start: np.ndarray  # (R, 76)
    cat_count: np.ndarray


def _build_merchants(cfg: SynthConfig, world: _World) -> _Merchants:
    R = cfg.region_count
    expected = world.domestic_txns + world.foreign_txns + 1.0
    extra_total = max(0, (cfg.mean_merchants_per_region - N_CATEGORIES) * R)
    extra = np.floor(extra_total * expected / expected.sum()).astype(np.int64)
    regions, cats, prem = [], [], []
    tier_start = np.zeros((R, N_CATEGORIES, 2), dtype=np.int64)
    tier_count = np.zeros((R, N_CATEGORIES, 2), dtype=np.int64)
    offset = 0
    for r in range(R):
        rng = substream(cfg.seed, 1 + 2 * r)
        mix = 0.8 * world.home_mix[r] + 0.2 * world.foreign_mix
        c = np.concatenate([np.arange(1, N_CATEGORIES + 1),
                            1 + _sample(np.cumsum(mix), rng.random(extra[r]))])
        p = rng.random(c.size) < 0.35
        order = np.lexsort((p, c))  # by category, then tier (regular before premium)
        c, p = c[order], p[order]
        key = (c - 1) * 2 + p
        counts = np.bincount(key, minlength=2 * N_CATEGORIES).reshape(N_CATEGORIES, 2)
        starts = offset + np.concatenate([[0], np.cumsum(counts.ravel())[:-1]]).reshape(N_CATEGORIES, 2)
        tier_start[r], tier_count[r] = starts, counts
        regions.append(np.full(c.size, r))
        cats.append(c)
        prem.append(p)
        offset += c.size
    region = np.concatenate(regions)
    category = np.concatenate(cats)
    premium = np.concatenate(prem)
    local = np.arange(region.size) - np.concatenate([[0], np.cumsum([a.size for a in regions])[:-1]])[region]
    prefix = pc.take(pa.array(world.region_ids, pa.string()), pa.array(region))
    ids = pc.binary_join_element_wise(prefix, pc.cast(pa.array(local), pa.string()), "M")
    return _Merchants(ids, region, category, premium, tier_start, tier_count,
                      tier_start[:, :, 0], tier_count.sum(axis=2))


# ---------------------------------------------------------------------------
# Transactions
# ---------------------------------------------------------------------------

_NIGHT_HOURS = np.array([22, 23, 0, 1, 2, 3, 4, 5])
_DAY_HOURS = np.arange(6, 22)


def _calendar(year: int) -> tuple[np.ndarray, np.ndarray]:
    days = np.arange(np.datetime64(f"{year}-01-01"), np.datetime64(f"{year + 1}-01-01"))
    # 1970-01-01 was a Thursday; Monday = 0
    weekday = (days.astype(np.int64) + 3) % 7
    return days[weekday >= 5], days[weekday < 5]


@dataclass
class _Block:
    merchant_region: np.ndarray
    origin: np.ndarray
    category: np.ndarray
    amount: np.ndarray
    night: np.ndarray
    weekend: np.ndarray
    minutes: np.ndarray  # datetime64[m]
    customer_id: pa.Array
    merchant_id: pa.Array
    home: pa.Array  # home region or country code strings
    kind: np.ndarray  # bool, True = domestic


def _draw_times(rng, n, night_p, weekend_p, cal):
    weekend_days, week_days = cal
    night = rng.random(n) < night_p
    weekend = rng.random(n) < weekend_p
    day = np.where(weekend, weekend_days[rng.integers(0, weekend_days.size, n)],
                   week_days[rng.integers(0, week_days.size, n)])
    hour = np.where(night, _NIGHT_HOURS[rng.integers(0, _NIGHT_HOURS.size, n)],
                    _DAY_HOURS[rng.integers(0, _DAY_HOURS.size, n)])
    minutes = day.astype("datetime64[m]") + (hour * 60 + rng.integers(0, 60, n)).astype("timedelta64[m]")
    return night, weekend, minutes


def _pick_merchants(rng, mer: _Merchants, dest, cat, premium_p):
    n = dest.size
    tier = (rng.random(n) < premium_p).astype(np.int64)
    start = mer.tier_start[dest, cat - 1, tier]
    count = mer.tier_count[dest, cat - 1, tier]
    empty = count == 0
    start = np.where(empty, mer.cat_start[dest, cat - 1], start)
    count = np.where(empty, mer.cat_count[dest, cat - 1], count)
    return start + np.floor(rng.random(n) * count).astype(np.int64)


def _amounts(rng, world: _World, mer: _Merchants, midx, home_income):
    n = midx.size
    log_amt = (world.category_price[mer.category[midx] - 1]
               + 0.4 * world.driver("price_level")[mer.region[midx]]
               + 0.2 * home_income
               + np.where(mer.premium[midx], math.log(1.8), 0.0)
               + 0.6 * rng.standard_normal(n))
    return np.maximum(1, np.rint(np.exp(log_amt))).astype(np.int64)


def _region_block(cfg: SynthConfig, world: _World, mer: _Merchants, r: int, cal) -> _Block:
    rng = substream(cfg.seed, 2 + 2 * r)
    R = cfg.region_count
    rid = world.region_ids[r]

    # residents of r, anywhere in the country
    n = int(world.domestic_txns[r])
    cat = 1 + _sample(np.cumsum(world.home_mix[r]), rng.random(n))
    attract = np.exp(world.driver("attractiveness"))
    attract[r] = 0.0
    leave = rng.random(n) >= world.stay_p[r]
    dest = np.where(leave, _sample(np.cumsum(attract), rng.random(n)), r)
    midx = _pick_merchants(rng, mer, dest, cat, world.premium_p[r])
    amount = _amounts(rng, world, mer, midx, world.driver("income")[r])
    night, weekend, minutes = _draw_times(rng, n, world.night_p[r], world.weekend_p[r], cal)
    cust = rng.integers(0, world.customers[r], n)

    # foreign visitors at merchants of r
    nf = int(world.foreign_txns[r])
    fcat = 1 + _sample(np.cumsum(world.foreign_mix), rng.random(nf))
    fdest = np.full(nf, r)
    fmidx = _pick_merchants(rng, mer, fdest, fcat, 0.5)
    famount = _amounts(rng, world, mer, fmidx, 0.0)
    fnight, fweekend, fminutes = _draw_times(rng, nf, cfg.foreign_night_propensity,
                                             cfg.foreign_weekend_propensity, cal)
    pool = max(1, nf // 4)
    fcust = rng.integers(0, pool, nf)
    country_of = rng.integers(0, len(COUNTRY_CODES), pool)

    cust_ids = pa.concat_arrays([_prefixed(f"{rid}C", cust), _prefixed(f"{rid}F", fcust)])
    home = pa.concat_arrays([_repeat(rid, n),
                             pc.take(pa.array(COUNTRY_CODES, pa.string()), pa.array(country_of[fcust]))])
    all_m = np.r_[midx, fmidx].astype(np.int64)
    return _Block(
        merchant_region=np.r_[dest, fdest].astype(np.int64),
        origin=np.r_[np.full(n, r), np.full(nf, R)].astype(np.int64),
        category=np.r_[cat, fcat].astype(np.int64),
        amount=np.r_[amount, famount],
        night=np.r_[night, fnight],
        weekend=np.r_[weekend, fweekend],
        minutes=np.r_[minutes, fminutes],
        customer_id=cust_ids,
        merchant_id=pc.take(mer.ids, pa.array(all_m)),
        home=home,
        kind=np.r_[np.ones(n, bool), np.zeros(nf, bool)],
    )


def _repeat(text: str, n: int) -> pa.Array:
    return pa.repeat(pa.scalar(text, pa.string()), n)


def _prefixed(prefix: str, numbers: np.ndarray) -> pa.Array:
    digits = pc.cast(pa.array(np.asarray(numbers, dtype=np.int64)), pa.string())
    return pc.binary_join_element_wise(_repeat(prefix, len(digits)), digits, "")


def _block_table(world: _World, r: int, block: _Block) -> pa.Table:
    n = block.amount.size
    rid = world.region_ids[r]
    ts = pc.strftime(pa.array(block.minutes.astype("datetime64[s]")), format="%Y-%m-%dT%H:%M")
    region_names = pa.array(world.region_ids, pa.string())
    cols = {
        "txn_id": _prefixed(f"{rid}-", np.arange(n)),
        "timestamp": ts,
        "amount_cents": pc.cast(pa.array(block.amount), pa.string()),
        "customer_id": block.customer_id,
        "customer_kind": pc.if_else(pa.array(block.kind), "D", "F"),
        "home_region_or_country": block.home,
        "merchant_id": block.merchant_id,
        "merchant_region": pc.take(region_names, pa.array(block.merchant_region)),
        "category_id": pc.cast(pa.array(block.category), pa.string()),
        "group_id": pc.cast(pa.array(category_group(block.category)), pa.string()),
    }
    return pa.table({k: cols[k] for k in TRANSACTION_COLUMNS})


def _block_batch(block: _Block) -> TransactionBatch:
    return TransactionBatch(
        merchant_region=block.merchant_region, origin=block.origin, category=block.category,
        amount=block.amount, night=block.night, weekend=block.weekend,
        customer_id=block.customer_id, merchant_id=block.merchant_id)


# ---------------------------------------------------------------------------
# Planted indices
# ---------------------------------------------------------------------------

def _standardized_basis(indicators: IndicatorMatrix, world: _World, L: int) -> tuple[np.ndarray, str]:
    """Leading standardized component scores of the full-sample pipeline front end.

    Falls back to standardized factors when the indicators cannot be
    normalized (for instance an empty corpus).
    """
    try:
        fits = fit_columns(indicators.values, INDICATOR_NAMES)
        Z = normalize_columns(indicators.values, fits)
        model = fit_pca(Z)
        if model.eigenvalues[L - 1] <= 1e-12 * model.eigenvalues[0]:
            raise DecompositionError("fewer informative components than factors")
        S = project(model, Z, L) / np.sqrt(model.eigenvalues[:L])
        return S, "pc_scores"
    except (NormalizationError, DecompositionError):
        F = world.factors
        return (F - F.mean(axis=0)) / F.std(axis=0, ddof=1), "factors"


def _z_of(a: float, b: float, u: np.ndarray) -> np.ndarray:
    return special.ndtri(special.expit(a + b * u))


def solve_link(u: np.ndarray) -> tuple[float, float]:
    """Intercept and scale making ``ndtri(expit(a + b u))`` have mean 0 and population std 1."""
    u = np.asarray(u, dtype=float)
    if np.ptp(u) == 0:
        raise SynthConfigError("planted predictor is constant")

    def intercept(b):
        return optimize.brentq(lambda a: _z_of(a, b, u).mean(), -60.0, 60.0, xtol=1e-15)

    def spread(b):
        return _z_of(intercept(b), b, u).std() - 1.0

    hi = 1.0
    while spread(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise SynthConfigError("cannot scale the planted predictor to unit spread")
    b = optimize.brentq(spread, 1e-9, hi, xtol=1e-15)
    return intercept(b), b


def _signal(z: np.ndarray, family: str, mu: float, sigma: float) -> np.ndarray:
    x = mu + sigma * z
    return np.exp(x) if family == LOGNORMAL else x


def _mc_sample(z: np.ndarray, draws: int, seed: int):
    rng = substream(seed, NOISE_STREAM + 1)
    return z[rng.integers(0, z.size, draws)], rng.standard_normal(draws)


def _r2_mc(zs, eps, family, mu, sigma, noise):
    if noise == 0:
        return 1.0
    y = _signal(zs + noise * eps, family, mu, sigma)
    pred = _signal(zs, family, mu, sigma)
    var = y.var()
    if not np.isfinite(var) or var == 0:
        return 0.0
    return float(max(0.0, 1.0 - np.mean((y - pred) ** 2) / var))


def theoretical_r2(ground_truth: dict, noise_sd=None, draws: int = MC_DRAWS) -> np.ndarray:
    """Expected R^2 of the planted model against noisy indices, by Monte-Carlo.

    Draws resample the planted standard-normal signal ``z`` of the regions and
    add ``noise_sd * N(0, 1)``; the predictor is the noiseless planted value.
    ``noise_sd`` defaults to the noise stored in the ground truth.
    """
    entries = ground_truth["indices"]
    if noise_sd is None:
        noise = np.array([e["noise_sd"] for e in entries], dtype=float)
    else:
        noise = np.broadcast_to(np.asarray(noise_sd, dtype=float), (len(entries),))
    out = np.empty(len(entries))
    for j, e in enumerate(entries):
        zs, eps = _mc_sample(np.asarray(e["z"], dtype=float), draws, int(ground_truth["seed"]))
        out[j] = _r2_mc(zs, eps, e["family"], e["mu"], e["sigma"], float(noise[j]))
    return out


def noise_for_r2(z: np.ndarray, family: str, mu: float, sigma: float, target: float,
                 seed: int = 0, draws: int = MC_DRAWS) -> float:
    """Noise level whose Monte-Carlo theoretical R^2 equals ``target``."""
    if target >= 1.0:
        return 0.0
    zs, eps = _mc_sample(np.asarray(z, dtype=float), draws, seed)
    f = lambda s: _r2_mc(zs, eps, family, mu, sigma, s) - target  # noqa: E731
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e4:
            raise SynthConfigError(f"cannot reach R^2 {target}")
    return float(optimize.brentq(f, 1e-12, hi, xtol=1e-10))


def _plant_indices(cfg: SynthConfig, indicators: IndicatorMatrix, world: _World):
    L = cfg.latent_factors
    rng = substream(cfg.seed, NOISE_STREAM + 2)
    if cfg.index_loadings is not None:
        A = np.asarray(cfg.index_loadings, dtype=float)
    else:
        A = rng.standard_normal((len(INDEX_NAMES), L))
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    A = A / np.where(norms > 0, norms, 1.0)
    S, basis = _standardized_basis(indicators, world, L)
    noise = cfg.noise_vector()
    eps = substream(cfg.seed, NOISE_STREAM).standard_normal((len(world.region_ids), len(INDEX_NAMES)))
    values = np.empty((len(world.region_ids), len(INDEX_NAMES)))
    entries = []
    for j, name in enumerate(INDEX_NAMES):
        u = S @ A[j]
        if cfg.nonlinearity:
            u = u + cfg.nonlinearity * (u * u - 1.0) / math.sqrt(2.0)
        a, b = solve_link(u)
        z = _z_of(a, b, u)
        family, mu, sigma = cfg.index_params[j]
        family = _settle_family(z, family, mu, sigma, name)
        if family != cfg.index_params[j][0]:
            mu, sigma = _matched_params(family, mu, sigma)
        if cfg.target_r2 is not None:
            noise[j] = noise_for_r2(z, family, mu, sigma, cfg.target_r2, cfg.seed)
        values[:, j] = _signal(z + noise[j] * eps[:, j], family, mu, sigma)
        entries.append({
            "name": name, "family": family, "mu": mu, "sigma": sigma,
            "loadings": A[j].tolist(), "intercept": a, "scale": b,
            "z": z.tolist(), "noise_sd": float(noise[j]),
        })
    return values, entries, S, basis


def _matched_params(family: str, mu: float, sigma: float) -> tuple[float, float]:
    """Parameters of the other family with roughly the same location and spread."""
    if family == LOGNORMAL:  # was normal
        m = max(mu, 4 * sigma)
        return math.log(m), sigma / m
    return math.exp(mu), math.exp(mu) * sigma  # was lognormal


def _settle_family(z, family, mu, sigma, name) -> str:
    """Keep the requested family if the maximum-likelihood choice agrees, else switch."""
    if fit_distribution(_signal(z, family, mu, sigma)).family == family:
        return family
    other = LOGNORMAL if family == NORMAL else NORMAL
    m2, s2 = _matched_params(other, mu, sigma)
    if fit_distribution(_signal(z, other, m2, s2)).family == other:
        return other
    raise SynthConfigError(f"index {name}: neither family survives refitting")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

@dataclass
class SynthResult:
    region_table_path: Path
    transactions_path: Path
    indices_path: Path
    ground_truth_path: Path
    ground_truth: dict
    indicators: IndicatorMatrix = field(repr=False)


FILE_NAMES = {
    "regions": "regions.csv",
    "transactions": "transactions.csv",
    "indices": "indices.csv",
    "ground_truth": "ground_truth.json",
}


def generate(config: SynthConfig, outdir) -> SynthResult:
    """Write region table, transactions, official indices and ground truth into ``outdir``."""
    from .pipeline import OfficialIndices

    cfg = config
    cfg.validate()
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in FILE_NAMES.items()}
    world = _build_world(cfg)
    R = cfg.region_count
    mer = _build_merchants(cfg, world)
    cal = _calendar(cfg.year)
    tally = TransactionTally(R)
    prov = _io.provenance_lines(cfg.seed, extra={"generator": TRUTH_FORMAT})

    with open(paths["transactions"], "wb") as fh:
        fh.write("".join(f"# {line}\n" for line in prov).encode())
        fh.write((",".join(TRANSACTION_COLUMNS) + "\n").encode())
        opts = pacsv.WriteOptions(include_header=False, quoting_style="none")
        for r in range(R):
            block = _region_block(cfg, world, mer, r, cal)
            if block.amount.size == 0:
                continue
            tally.add_batch(_block_batch(block))
            pacsv.write_csv(_block_table(world, r, block), fh, write_options=opts)

    dom_in = tally.domestic_in_area_counts()
    b = world.business_share
    external = {rid: int(round(dom_in[i] * (1 - b[i]) / b[i])) for i, rid in enumerate(world.region_ids)}
    regions = RegionTable(
        RegionMeta(rid, f"Region {rid[1:]}", float(world.area[i]), float(world.customer_share[i]))
        for i, rid in enumerate(world.region_ids))
    write_region_table(paths["regions"], regions, external, prov)

    shared = compute_business_share(tally, regions, external, skip_undefined=True)
    aggs, merchants = tally.finalize(shared)
    indicators = compute_indicators(aggs, merchants, shared)

    values, entries, S, basis = _plant_indices(cfg, indicators, world)
    OfficialIndices(list(world.region_ids), values).to_csv(paths["indices"], prov)

    truth = {
        "format": TRUTH_FORMAT,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "region_ids": list(world.region_ids),
        "factors": world.factors.tolist(),
        "driver_names": list(DRIVERS),
        "driver_loadings": world.driver_loadings.tolist(),
        "drivers": world.drivers.tolist(),
        "category_loadings": world.category_loadings.tolist(),
        "night_propensity": world.night_p.tolist(),
        "weekend_propensity": world.weekend_p.tolist(),
        "foreign_night_propensity": cfg.foreign_night_propensity,
        "foreign_weekend_propensity": cfg.foreign_weekend_propensity,
        "domestic_txns_by_home": world.domestic_txns.tolist(),
        "foreign_txns_by_region": world.foreign_txns.tolist(),
        "planted_on": basis,
        "basis_scores": S.tolist(),
        "indices": entries,
    }
    r2 = theoretical_r2(truth)
    for e, v in zip(entries, r2):
        e["theoretical_r2"] = float(v)
    with open(paths["ground_truth"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(truth, indent=1) + "\n")
    return SynthResult(paths["regions"], paths["transactions"], paths["indices"],
                       paths["ground_truth"], truth, indicators)


def load_ground_truth(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != TRUTH_FORMAT:
        raise ValueError(f"unsupported ground truth format {doc.get('format')!r}")
    return doc
