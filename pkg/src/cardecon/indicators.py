"""The 35 region-level indicators and the rules they rely on.

Amount-based indicators are reported in EUR; percentages are in [0, 100].
A zero denominator yields 0 for that entry and a logged warning, so the
matrix stays rectangular.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from typing import TYPE_CHECKING, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import _io

if TYPE_CHECKING:
    from .ingest import MerchantAggregate, RegionAggregate, RegionTable

log = logging.getLogger(__name__)

BUNDLES = (
    "gas_parking_toll",
    "taxi",
    "public_transport",
    "cafes_restaurants",
    "fast_food",
    "food",
    "recreation",
    "fashion_beauty_jewelry",
    "medical",
    "cultural",
    "travel",
)

INDICATOR_NAMES = (
    "txn_density",                    # 1
    "earnings_density",               # 2
    "avg_txn_amount",                 # 3
    "txns_per_resident",              # 4
    "resident_avg_amount",            # 5
    "pct_domestic_visitor_txns",      # 6
    "pct_foreign_visitor_txns",       # 7
    "resident_diversity",             # 8
    "area_diversity",                 # 9
    "business_density",               # 10
    "avg_business_earnings",          # 11
    *(f"pct_resident_{b}" for b in BUNDLES),  # 12-22
    "pct_resident_night_txns",        # 23
    "pct_resident_weekend_txns",      # 24
    "pct_resident_night_amount",      # 25
    "pct_resident_weekend_amount",    # 26
    "pct_area_night_amount",          # 27
    "pct_area_weekend_amount",        # 28
    "pct_area_night_txns",            # 29
    "pct_area_weekend_txns",          # 30
    "pct_resident_txns_outside",      # 31
    "pct_nonresident_txns_inside",    # 32
    "pct_resident_amount_outside",    # 33
    "pct_nonresident_amount_inside",  # 34
    "pct_resident_expensive_txns",    # 35
)
N_INDICATORS = len(INDICATOR_NAMES)
assert N_INDICATORS == 35

PERCENT_INDICATORS = (6, 7, *range(12, 36))
NONNEGATIVE_INDICATORS = (1, 2, 3, 4, 5, 10, 11)
DIVERSITY_INDICATORS = (8, 9)


class TemporalClass(NamedTuple):
    nighttime: bool
    weekend: bool


def classify_temporal(timestamp: datetime) -> TemporalClass:
    """Night is the half-open civil window [22:00, 06:00); weekend is Sat/Sun."""
    hour = timestamp.hour
    return TemporalClass(nighttime=hour >= 22 or hour < 6, weekend=timestamp.weekday() >= 5)


def diversity_count(category_totals: Sequence[float], threshold: float = 0.8) -> int:
    """Smallest number of top categories whose share of the total reaches ``threshold``.

    Equal totals are ordered by ascending category id.
    """
    totals = np.asarray(category_totals, dtype=float)
    if np.any(totals < 0):
        raise ValueError("category totals must be nonnegative")
    grand = totals.sum()
    if grand <= 0:
        raise ValueError("diversity is undefined for all-zero totals")
    # stable sort on -totals keeps ascending id among ties
    order = np.argsort(-totals, kind="stable")
    cum = np.cumsum(totals[order])
    # compare against the threshold in absolute terms so that 50+30 of 100 hits 0.8 exactly
    hit = np.flatnonzero(cum >= threshold * grand * (1 - 1e-12))
    return int(hit[0]) + 1


def expensive_business_set(merchant_aggregates: Iterable["MerchantAggregate"]) -> set[str]:
    """Merchants whose average ticket strictly exceeds their category's average."""
    merchants = list(merchant_aggregates)
    cat_count: dict[int, int] = {}
    cat_amount: dict[int, int] = {}
    for m in merchants:
        cat_count[m.category_id] = cat_count.get(m.category_id, 0) + m.txn_count
        cat_amount[m.category_id] = cat_amount.get(m.category_id, 0) + m.amount_sum
    # integer cross-multiplication: amount/count > A/N  <=>  amount*N > A*count
    return {
        m.merchant_id for m in merchants
        if m.amount_sum * cat_count[m.category_id] > cat_amount[m.category_id] * m.txn_count
    }


def load_bundle_mapping(path=None) -> dict[int, str]:
    """Read a ``category_id,bundle_name`` table; defaults to the shipped mapping."""
    if path is None:
        with resources.files("cardecon").joinpath("data/category_bundles.csv").open("r") as fh:
            header, rows, _ = _io.read_table(fh)
    else:
        header, rows, _ = _io.read_table(path)
    if header[:2] != ["category_id", "bundle_name"]:
        raise ValueError("bundle mapping needs columns category_id,bundle_name")
    mapping = {int(r[0]): r[1].strip() for r in rows}
    unknown = set(mapping.values()) - set(BUNDLES) - {"other"}
    if unknown:
        raise ValueError(f"unknown bundle names {sorted(unknown)}")
    bad = [c for c in mapping if not 1 <= c <= 76]
    if bad:
        raise ValueError(f"category ids out of range: {bad}")
    return mapping


@dataclass
class IndicatorMatrix:
    region_ids: list[str]
    values: np.ndarray  # (m, 35)
    indicator_names: tuple[str, ...] = INDICATOR_NAMES
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.region_ids), N_INDICATORS):
            raise ValueError(f"expected shape ({len(self.region_ids)}, 35), got {self.values.shape}")

    def column(self, indicator_id: int) -> np.ndarray:
        return self.values[:, indicator_id - 1]

    def row(self, region_id: str) -> np.ndarray:
        return self.values[self.region_ids.index(region_id)]

    def subset(self, region_ids: Sequence[str]) -> "IndicatorMatrix":
        pos = {r: i for i, r in enumerate(self.region_ids)}
        missing = [r for r in region_ids if r not in pos]
        if missing:
            raise KeyError(f"regions not in indicator matrix: {missing}")
        return IndicatorMatrix(list(region_ids), self.values[[pos[r] for r in region_ids]])

    def to_csv(self, path_or_fh, comments: Sequence[str] = ()) -> None:
        rows = ([rid, *map(float, row)] for rid, row in zip(self.region_ids, self.values))
        _io.write_table(path_or_fh, ("region_id", *self.indicator_names), rows, comments)

    @classmethod
    def from_csv(cls, path_or_fh) -> "IndicatorMatrix":
        header, rows, _ = _io.read_table(path_or_fh)
        if tuple(header) != ("region_id", *INDICATOR_NAMES):
            raise ValueError("indicator matrix header does not match the 35 indicator columns")
        return cls([r[0] for r in rows], np.array([[float(v) for v in r[1:]] for r in rows]).reshape(-1, 35))


def _ratio(num: float, den: float, scale: float, region: str, ind: int, notes: list[str]) -> float:
    if den == 0:
        notes.append(f"region {region}: indicator {ind} has a zero denominator; set to 0")
        return 0.0
    return scale * num / den


def compute_indicators(aggregates: Mapping[str, "RegionAggregate"],
                       merchant_aggregates: Mapping[str, "MerchantAggregate"] | None,
                       regions: "RegionTable",
                       bundle_mapping: Mapping[int, str] | None = None) -> IndicatorMatrix:
    """Compute all 35 indicators for every region of ``regions``.

    ``merchant_aggregates`` is accepted for interface symmetry; the expensive
    business counts it implies are already folded into each aggregate.
    """
    from .ingest import RegionAggregate

    mapping = load_bundle_mapping() if bundle_mapping is None else dict(bundle_mapping)
    bundle_of = np.array([mapping.get(c, "other") for c in range(1, 77)])
    notes: list[str] = []
    out = np.zeros((len(regions), N_INDICATORS))
    for i, meta in enumerate(regions):
        rid = meta.region_id
        a = aggregates.get(rid) or RegionAggregate.zero(rid)
        area = meta.area_km2
        weight = 1.0 / meta.customer_market_share
        v = out[i]

        def q(num, den, ind, scale=1.0):
            v[ind - 1] = _ratio(num, den, scale, rid, ind, notes)

        q(a.in_area.count, area, 1)
        q(a.in_area.amount / 100.0, area, 2)
        q(a.in_area.amount / 100.0, a.in_area.count, 3)
        # distinct residents weighted like their transactions, so the ratio is per customer
        q(a.resident.count, a.active_residents * weight, 4)
        q(a.resident.amount / 100.0, a.resident.count, 5)
        q(a.in_area_domestic_out.count, a.in_area.count, 6, 100.0)
        q(a.in_area_foreign.count, a.in_area.count, 7, 100.0)
        for ind, cat in ((8, a.resident_by_category), (9, a.in_area_by_category)):
            if cat.amounts.sum() > 0:
                v[ind - 1] = diversity_count(cat.amounts)
            else:
                notes.append(f"region {rid}: indicator {ind} has no activity; set to 0")
        q(a.active_businesses, area, 10)
        q(a.in_area.amount / 100.0, a.active_businesses, 11)
        res_amounts = a.resident_by_category.amounts
        for j, bundle in enumerate(BUNDLES):
            q(float(res_amounts[bundle_of == bundle].sum()), a.resident.amount, 12 + j, 100.0)
        q(a.resident_night.count, a.resident.count, 23, 100.0)
        q(a.resident_weekend.count, a.resident.count, 24, 100.0)
        q(a.resident_night.amount, a.resident.amount, 25, 100.0)
        q(a.resident_weekend.amount, a.resident.amount, 26, 100.0)
        q(a.in_area_night.amount, a.in_area.amount, 27, 100.0)
        q(a.in_area_weekend.amount, a.in_area.amount, 28, 100.0)
        q(a.in_area_night.count, a.in_area.count, 29, 100.0)
        q(a.in_area_weekend.count, a.in_area.count, 30, 100.0)
        q(a.resident_outside.count, a.resident.count, 31, 100.0)
        nonres = a.in_area_domestic_out.count + a.in_area_foreign.count
        q(nonres, a.in_area.count, 32, 100.0)
        q(a.resident_outside.amount, a.resident.amount, 33, 100.0)
        nonres_amt = a.in_area_domestic_out.amount + a.in_area_foreign.amount
        q(nonres_amt, a.in_area.amount, 34, 100.0)
        q(a.resident_expensive.count, a.resident.count, 35, 100.0)

    for note in notes:
        log.warning(note)
    return IndicatorMatrix(list(regions.ids), out, warnings=notes)
