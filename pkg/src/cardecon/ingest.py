"""Parsing, validation, market-share de-biasing and aggregation of card transactions.

Aggregation runs in one streaming pass over columnar batches. Every
accumulator is first kept as an exact integer tally keyed by
``(merchant region, customer origin)``, where the origin is either the
customer's home region or a single "foreign" slot. De-biasing weights are
constant within such a cell (``1 / customer share`` of the home region, or
``1 / business share`` of the merchant region for foreigners), so they are
applied only when the tallies are finalized. Integer tallies merge exactly,
which makes the aggregates independent of input order, batch size and thread
count, and lets the business share be derived from the same pass.
"""
from __future__ import annotations

import io
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import IO, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from . import _io
from .indicators import expensive_business_set

log = logging.getLogger(__name__)

N_CATEGORIES = 76
N_GROUPS = 12

TRANSACTION_COLUMNS = (
    "txn_id",
    "timestamp",
    "amount_cents",
    "customer_id",
    "customer_kind",
    "home_region_or_country",
    "merchant_id",
    "merchant_region",
    "category_id",
    "group_id",
)
REGION_COLUMNS = (
    "region_id",
    "name",
    "area_km2",
    "customer_market_share",
    "external_domestic_txn_count",
)
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"

# Reject reasons, in the order they are checked; a row gets the first that applies.
REJECT_REASONS = (
    "malformed_row",
    "missing_field",
    "malformed_amount",
    "nonpositive_amount",
    "bad_timestamp",
    "bad_customer_kind",
    "out_of_range_category",
    "out_of_range_group",
    "unknown_merchant_region",
    "unknown_home_region",
)


class IngestError(Exception):
    """Fatal ingestion failure (unreadable stream, bad header, inconsistent data)."""


class MissingShareError(IngestError):
    """A foreign record needs the merchant region's business share, which is unset."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransactionRecord:
    txn_id: str
    timestamp: datetime
    amount: int  # EUR cents
    customer_id: str
    customer_kind: str  # "D" domestic, "F" foreign
    origin: str  # home region id (domestic) or country code (foreign)
    merchant_id: str
    merchant_region_id: str
    category_id: int
    group_id: int

    @property
    def is_domestic(self) -> bool:
        return self.customer_kind == "D"

    @property
    def home_region_id(self) -> str | None:
        return self.origin if self.customer_kind == "D" else None


@dataclass(frozen=True)
class RegionMeta:
    region_id: str
    name: str
    area_km2: float
    customer_market_share: float
    business_market_share: float | None = None

    def __post_init__(self):
        if not self.area_km2 > 0:
            raise ValueError(f"region {self.region_id}: area_km2 must be positive")
        if not 0 < self.customer_market_share <= 1:
            raise ValueError(f"region {self.region_id}: customer_market_share must be in (0, 1]")
        if self.business_market_share is not None and not 0 < self.business_market_share <= 1:
            raise ValueError(f"region {self.region_id}: business_market_share must be in (0, 1]")


class RegionTable:
    """Ordered, immutable collection of :class:`RegionMeta`."""

    def __init__(self, regions: Iterable[RegionMeta]):
        self.regions: tuple[RegionMeta, ...] = tuple(regions)
        self.ids: tuple[str, ...] = tuple(r.region_id for r in self.regions)
        self.index: dict[str, int] = {rid: i for i, rid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate region_id in region table")

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self) -> Iterator[RegionMeta]:
        return iter(self.regions)

    def __getitem__(self, region_id: str) -> RegionMeta:
        return self.regions[self.index[region_id]]

    def __contains__(self, region_id: object) -> bool:
        return region_id in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RegionTable) and self.regions == other.regions

    def with_business_shares(self, shares: Mapping[str, float]) -> "RegionTable":
        return RegionTable(
            replace(r, business_market_share=float(shares[r.region_id]))
            if r.region_id in shares else r
            for r in self.regions
        )

    def customer_weights(self) -> np.ndarray:
        return np.array([1.0 / r.customer_market_share for r in self.regions])

    def business_weights(self) -> np.ndarray:
        """1/business share per region; NaN where the share is unset."""
        return np.array([np.nan if r.business_market_share is None
                         else 1.0 / r.business_market_share for r in self.regions])


class Totals(NamedTuple):
    """A de-biased (count, amount) pair; amount in EUR cents."""
    count: float
    amount: float


@dataclass(frozen=True)
class CategoryTotals:
    counts: np.ndarray  # (76,), index = category_id - 1
    amounts: np.ndarray  # (76,)

    def total(self) -> Totals:
        return Totals(float(self.counts.sum()), float(self.amounts.sum()))


@dataclass(frozen=True)
class MerchantAggregate:
    merchant_id: str
    region_id: str
    category_id: int
    txn_count: int
    amount_sum: int  # EUR cents, raw (not de-biased)

    @property
    def average_amount(self) -> float:
        return self.amount_sum / self.txn_count


@dataclass(frozen=True)
class RegionAggregate:
    """De-biased accumulators of one region.

    ``in_area_*`` fields describe transactions made at merchants located in the
    region; ``resident_*`` fields describe spending of the region's domestic
    residents anywhere in the country.
    """
    region_id: str
    in_area: Totals
    in_area_same: Totals
    in_area_domestic_out: Totals
    in_area_foreign: Totals
    in_area_by_category: CategoryTotals
    in_area_night: Totals
    in_area_weekend: Totals
    resident: Totals
    resident_by_category: CategoryTotals
    resident_outside: Totals
    resident_night: Totals
    resident_weekend: Totals
    resident_expensive: Totals
    active_residents: int
    active_businesses: int

    @classmethod
    def zero(cls, region_id: str) -> "RegionAggregate":
        z = Totals(0.0, 0.0)
        zc = CategoryTotals(np.zeros(N_CATEGORIES), np.zeros(N_CATEGORIES))
        return cls(region_id, z, z, z, z, zc, z, z, z, zc, z, z, z, z, 0, 0)


@dataclass
class RejectReport:
    rows_read: int = 0
    rejected: Counter = field(default_factory=Counter)

    @property
    def rows_rejected(self) -> int:
        return sum(self.rejected.values())

    @property
    def rows_accepted(self) -> int:
        return self.rows_read - self.rows_rejected

    def merge(self, other: "RejectReport") -> None:
        self.rows_read += other.rows_read
        self.rejected.update(other.rejected)

    def as_dict(self) -> dict[str, int]:
        return {k: v for k, v in sorted(self.rejected.items()) if v}


# ---------------------------------------------------------------------------
# Region table I/O
# ---------------------------------------------------------------------------

def load_region_table(path_or_fh) -> tuple[RegionTable, dict[str, int]]:
    """Read the region table file; returns the table and external domestic counts."""
    header, rows, _ = _io.read_table(path_or_fh)
    missing = [c for c in REGION_COLUMNS if c not in header]
    if missing:
        raise IngestError(f"region table is missing columns {missing}")
    col = {name: header.index(name) for name in header}
    regions, external = [], {}
    for lineno, row in enumerate(rows, start=2):
        try:
            rid = row[col["region_id"]].strip()
            share_b = None
            if "business_market_share" in col and row[col["business_market_share"]].strip():
                share_b = float(row[col["business_market_share"]])
            regions.append(RegionMeta(
                region_id=rid,
                name=row[col["name"]],
                area_km2=float(row[col["area_km2"]]),
                customer_market_share=float(row[col["customer_market_share"]]),
                business_market_share=share_b,
            ))
            ext = int(row[col["external_domestic_txn_count"]])
        except (ValueError, IndexError) as exc:
            raise IngestError(f"region table row {lineno}: {exc}") from exc
        if ext < 0:
            raise IngestError(f"region table row {lineno}: negative external count")
        external[rid] = ext
    return RegionTable(regions), external


def write_region_table(path_or_fh, regions: RegionTable, external: Mapping[str, int],
                       comments: Sequence[str] = ()) -> None:
    rows = [(r.region_id, r.name, float(r.area_km2), float(r.customer_market_share),
             int(external.get(r.region_id, 0))) for r in regions]
    _io.write_table(path_or_fh, REGION_COLUMNS, rows, comments)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@dataclass
class TransactionBatch:
    """Validated transactions in columnar form.

    ``origin`` holds the home region index for domestic records and
    ``n_regions`` for foreign ones.
    """
    merchant_region: np.ndarray  # int64 region index
    origin: np.ndarray  # int64
    category: np.ndarray  # int64, 1..76
    amount: np.ndarray  # int64 cents
    night: np.ndarray  # bool
    weekend: np.ndarray  # bool
    customer_id: pa.Array
    merchant_id: pa.Array
    raw: pa.Table | None = None  # the validated string columns, kept only on request

    def __len__(self) -> int:
        return len(self.amount)


def _is_blank(arr: pa.Array) -> np.ndarray:
    return np.asarray(pc.fill_null(pc.equal(pc.utf8_trim_whitespace(arr), ""), True))


def _trimmed(table: pa.Table, name: str, mask: pa.Array) -> pa.Array:
    return pc.utf8_trim_whitespace(table.column(name).filter(mask)).combine_chunks()


def _int_column(arr: pa.Array) -> tuple[np.ndarray, np.ndarray]:
    """Parse a string column of integers; returns (values, ok mask)."""
    arr = pc.utf8_trim_whitespace(arr)
    ok = np.asarray(pc.fill_null(pc.match_substring_regex(arr, r"^[+-]?[0-9]{1,18}$"), False))
    cleaned = pc.if_else(pa.array(ok), arr, "0")
    return np.asarray(pc.cast(cleaned, pa.int64())), ok


def validate_table(table: pa.Table, regions: RegionTable,
                   keep_raw: bool = False) -> tuple[TransactionBatch, RejectReport]:
    """Validate a table of raw string columns and convert the good rows."""
    n = table.num_rows
    report = RejectReport(rows_read=n)
    reason = np.zeros(n, dtype=np.int8)  # 0 = accepted, else 1 + index in REJECT_REASONS

    def flag(bad: np.ndarray, name: str) -> None:
        code = REJECT_REASONS.index(name) + 1
        reason[(reason == 0) & bad] = code

    blank = np.zeros(n, dtype=bool)
    for name in ("txn_id", "timestamp", "amount_cents", "customer_id", "customer_kind",
                 "home_region_or_country", "merchant_id", "merchant_region",
                 "category_id", "group_id"):
        blank |= _is_blank(table.column(name))
    flag(blank, "missing_field")

    amount, ok = _int_column(table.column("amount_cents"))
    flag(~ok, "malformed_amount")
    flag(amount <= 0, "nonpositive_amount")

    ts = pc.strptime(pc.utf8_trim_whitespace(table.column("timestamp")),
                     format=TIMESTAMP_FORMAT, unit="s", error_is_null=True)
    flag(np.asarray(pc.is_null(ts)), "bad_timestamp")

    kind = pc.utf8_trim_whitespace(table.column("customer_kind"))
    domestic = np.asarray(pc.fill_null(pc.equal(kind, "D"), False))
    foreign = np.asarray(pc.fill_null(pc.equal(kind, "F"), False))
    flag(~(domestic | foreign), "bad_customer_kind")

    category, ok = _int_column(table.column("category_id"))
    flag(~ok | (category < 1) | (category > N_CATEGORIES), "out_of_range_category")
    group, ok = _int_column(table.column("group_id"))
    flag(~ok | (group < 1) | (group > N_GROUPS), "out_of_range_group")

    value_set = pa.array(regions.ids, type=pa.string())
    mreg = pc.index_in(pc.utf8_trim_whitespace(table.column("merchant_region")), value_set=value_set)
    flag(np.asarray(pc.is_null(mreg)), "unknown_merchant_region")
    home = pc.index_in(pc.utf8_trim_whitespace(table.column("home_region_or_country")),
                       value_set=value_set)
    flag(domestic & np.asarray(pc.is_null(home)), "unknown_home_region")

    counts = np.bincount(reason, minlength=len(REJECT_REASONS) + 1)
    for i, name in enumerate(REJECT_REASONS):
        if counts[i + 1]:
            report.rejected[name] += int(counts[i + 1])

    good = reason == 0
    mask = pa.array(good)
    ts = pc.filter(ts, mask)
    hour = np.asarray(pc.hour(ts))
    # day_of_week: Monday = 0 ... Sunday = 6
    weekend = np.asarray(pc.day_of_week(ts)) >= 5
    night = (hour >= 22) | (hour < 6)
    origin = np.where(domestic[good], np.asarray(pc.fill_null(home, 0).filter(mask)), len(regions))
    batch = TransactionBatch(
        merchant_region=np.asarray(pc.filter(mreg, mask)).astype(np.int64),
        origin=origin.astype(np.int64),
        category=category[good],
        amount=amount[good],
        night=night,
        weekend=weekend,
        customer_id=_trimmed(table, "customer_id", mask),
        merchant_id=_trimmed(table, "merchant_id", mask),
        raw=table.filter(mask).add_column(0, "_ts", ts) if keep_raw else None,
    )
    return batch, report


class _BadRowCounter:
    def __init__(self):
        self.count = 0

    def __call__(self, row) -> str:
        self.count += 1
        return "skip"


def _open_source(source) -> tuple[IO[bytes], bool]:
    if isinstance(source, (str, os.PathLike)):
        try:
            return open(source, "rb"), True
        except OSError as exc:
            raise IngestError(f"cannot open transactions file {os.fspath(source)!r}: {exc}") from exc
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(source), True
    return source, False


def iter_transaction_batches(source, regions: RegionTable, block_size: int = 8 << 20,
                             keep_raw: bool = False
                             ) -> Iterator[tuple[TransactionBatch, RejectReport]]:
    """Stream validated batches from a transactions file, path or byte stream."""
    fh, owned = _open_source(source)
    try:
        try:
            skip = _io.count_comment_lines(fh) if fh.seekable() else 0
        except (OSError, AttributeError):
            skip = 0
        bad = _BadRowCounter()
        try:
            reader = pacsv.open_csv(
                fh,
                read_options=pacsv.ReadOptions(block_size=block_size, skip_rows=skip),
                parse_options=pacsv.ParseOptions(invalid_row_handler=bad),
                convert_options=pacsv.ConvertOptions(
                    column_types={c: pa.string() for c in TRANSACTION_COLUMNS},
                    strings_can_be_null=False,
                    include_columns=list(TRANSACTION_COLUMNS),
                ),
            )
        except (pa.ArrowInvalid, pa.ArrowKeyError, OSError) as exc:
            raise IngestError(f"unreadable transactions stream: {exc}") from exc
        reported = 0
        while True:
            try:
                rb = reader.read_next_batch()
            except StopIteration:
                break
            except (pa.ArrowInvalid, OSError) as exc:
                raise IngestError(f"unreadable transactions stream: {exc}") from exc
            batch, report = validate_table(pa.Table.from_batches([rb]), regions, keep_raw)
            malformed, reported = bad.count - reported, bad.count
            if malformed:
                report.rows_read += malformed
                report.rejected["malformed_row"] += malformed
            yield batch, report
        if bad.count > reported:
            report = RejectReport(rows_read=bad.count - reported)
            report.rejected["malformed_row"] += bad.count - reported
            yield _empty_batch(), report
    finally:
        if owned:
            fh.close()


def _empty_batch() -> TransactionBatch:
    e = np.zeros(0, dtype=np.int64)
    return TransactionBatch(e, e, e, e, e.astype(bool), e.astype(bool),
                            pa.array([], pa.string()), pa.array([], pa.string()))


def parse_transactions(source, regions: RegionTable) -> tuple[list[TransactionRecord], RejectReport]:
    """Parse a transactions stream into records plus a per-reason reject report.

    Meant for small inputs; bulk processing should stream batches through
    :func:`aggregate_file` instead of materializing records.
    """
    records: list[TransactionRecord] = []
    report = RejectReport()
    for batch, rep in iter_transaction_batches(source, regions, keep_raw=True):
        report.merge(rep)
        if batch.raw is None or batch.raw.num_rows == 0:
            continue
        cols = {name: batch.raw.column(name).to_pylist() for name in TRANSACTION_COLUMNS}
        stamps = batch.raw.column("_ts").to_pylist()
        for i in range(batch.raw.num_rows):
            records.append(TransactionRecord(
                txn_id=cols["txn_id"][i].strip(),
                timestamp=stamps[i],
                amount=int(batch.amount[i]),
                customer_id=cols["customer_id"][i].strip(),
                customer_kind=cols["customer_kind"][i].strip(),
                origin=cols["home_region_or_country"][i].strip(),
                merchant_id=cols["merchant_id"][i].strip(),
                merchant_region_id=cols["merchant_region"][i].strip(),
                category_id=int(batch.category[i]),
                group_id=int(cols["group_id"][i]),
            ))
    return records, report


def records_to_batch(records: Sequence[TransactionRecord], regions: RegionTable) -> TransactionBatch:
    """Columnar view of already-valid records (raises on referential errors)."""
    from .indicators import classify_temporal

    n = len(records)
    mreg = np.empty(n, dtype=np.int64)
    origin = np.empty(n, dtype=np.int64)
    night = np.empty(n, dtype=bool)
    weekend = np.empty(n, dtype=bool)
    for i, rec in enumerate(records):
        if rec.amount <= 0 or not 1 <= rec.category_id <= N_CATEGORIES:
            raise ValueError(f"invalid record {rec.txn_id}")
        mreg[i] = regions.index[rec.merchant_region_id]
        origin[i] = regions.index[rec.origin] if rec.is_domestic else len(regions)
        cls = classify_temporal(rec.timestamp)
        night[i], weekend[i] = cls.nighttime, cls.weekend
    return TransactionBatch(
        merchant_region=mreg,
        origin=origin,
        category=np.array([r.category_id for r in records], dtype=np.int64),
        amount=np.array([r.amount for r in records], dtype=np.int64),
        night=night,
        weekend=weekend,
        customer_id=pa.array([r.customer_id for r in records], pa.string()),
        merchant_id=pa.array([r.merchant_id for r in records], pa.string()),
    )


# ---------------------------------------------------------------------------
# De-biasing
# ---------------------------------------------------------------------------

def debias_weight(record: TransactionRecord, regions: RegionTable) -> float:
    """Market-share de-biasing weight of one record."""
    if record.is_domestic:
        return 1.0 / regions[record.origin].customer_market_share
    share = regions[record.merchant_region_id].business_market_share
    if share is None:
        raise MissingShareError(
            f"business_market_share unset for region {record.merchant_region_id}; "
            "run compute_business_share first")
    return 1.0 / share


def compute_business_share(records, regions: RegionTable,
                           external_totals: Mapping[str, int],
                           skip_undefined: bool = False) -> RegionTable:
    """Set each region's business share from in-dataset vs external domestic counts.

    ``records`` may be an iterable of :class:`TransactionRecord` or a
    :class:`TransactionTally` that has already seen the data. Regions with no
    domestic activity at all raise, unless ``skip_undefined`` leaves them unset.
    """
    if isinstance(records, TransactionTally):
        in_dataset = records.domestic_in_area_counts()
    else:
        in_dataset = np.zeros(len(regions), dtype=np.int64)
        for rec in records:
            if rec.is_domestic:
                in_dataset[regions.index[rec.merchant_region_id]] += 1
    shares, empty = {}, []
    for i, rid in enumerate(regions.ids):
        inside = int(in_dataset[i])
        outside = int(external_totals.get(rid, 0))
        if inside + outside == 0:
            empty.append(rid)
            continue
        shares[rid] = min(1.0, max(inside / (inside + outside), np.finfo(float).tiny))
    if empty and not skip_undefined:
        raise IngestError(f"business share undefined (no domestic transactions) for regions {empty}")
    return regions.with_business_shares(shares)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

_COMPACT_ROWS = 1_000_000


class TransactionTally:
    """Exact integer accumulators over validated transaction batches.

    Cells are indexed ``[merchant_region, origin]`` with ``origin`` in
    ``0..R-1`` for domestic residents of that region and ``R`` for foreigners.
    Tallies from disjoint inputs combine with :meth:`merge`.
    """

    def __init__(self, n_regions: int):
        self.n_regions = R = n_regions
        O = R + 1
        self.count = np.zeros((R, O), dtype=np.int64)
        self.amount = np.zeros((R, O), dtype=np.int64)
        self.cat_count = np.zeros((R, O, N_CATEGORIES), dtype=np.int64)
        self.cat_amount = np.zeros((R, O, N_CATEGORIES), dtype=np.int64)
        self.night_count = np.zeros((R, O), dtype=np.int64)
        self.night_amount = np.zeros((R, O), dtype=np.int64)
        self.weekend_count = np.zeros((R, O), dtype=np.int64)
        self.weekend_amount = np.zeros((R, O), dtype=np.int64)
        self._customers: list[pa.Table] = []
        self._merchants: list[pa.Table] = []
        self._merchant_home: list[pa.Table] = []
        self.n_records = 0

    # -- accumulation -----------------------------------------------------
    def add_batch(self, batch: TransactionBatch) -> "TransactionTally":
        if len(batch) == 0:
            return self
        R, O = self.n_regions, self.n_regions + 1
        cell = batch.merchant_region * O + batch.origin
        amt = batch.amount
        self.count += _bincount(cell, None, R * O).reshape(R, O)
        self.amount += _bincount(cell, amt, R * O).reshape(R, O)
        ccell = cell * N_CATEGORIES + (batch.category - 1)
        self.cat_count += _bincount(ccell, None, R * O * N_CATEGORIES).reshape(R, O, N_CATEGORIES)
        self.cat_amount += _bincount(ccell, amt, R * O * N_CATEGORIES).reshape(R, O, N_CATEGORIES)
        n, w = batch.night, batch.weekend
        self.night_count += _bincount(cell[n], None, R * O).reshape(R, O)
        self.night_amount += _bincount(cell[n], amt[n], R * O).reshape(R, O)
        self.weekend_count += _bincount(cell[w], None, R * O).reshape(R, O)
        self.weekend_amount += _bincount(cell[w], amt[w], R * O).reshape(R, O)

        domestic = batch.origin < R
        dmask = pa.array(domestic)
        home = pa.array(batch.origin[domestic].astype(np.int32))
        self._customers.append(
            pa.table({"home": home, "customer_id": batch.customer_id.filter(dmask)})
            .group_by(["home", "customer_id"], use_threads=False).aggregate([]))
        self._merchants.append(
            pa.table({
                "merchant_id": batch.merchant_id,
                "region": pa.array(batch.merchant_region.astype(np.int32)),
                "category": pa.array(batch.category.astype(np.int32)),
                "amount": pa.array(amt),
                "n": pa.array(np.ones(len(batch), dtype=np.int64)),
            }).group_by(["merchant_id", "region", "category"], use_threads=False)
            .aggregate([("n", "sum"), ("amount", "sum")])
            .rename_columns(["merchant_id", "region", "category", "n", "amount"]))
        self._merchant_home.append(
            pa.table({
                "merchant_id": batch.merchant_id.filter(dmask),
                "home": home,
                "n": pa.array(np.ones(int(domestic.sum()), dtype=np.int64)),
                "amount": pa.array(amt[domestic]),
            }).group_by(["merchant_id", "home"], use_threads=False)
            .aggregate([("n", "sum"), ("amount", "sum")])
            .rename_columns(["merchant_id", "home", "n", "amount"]))
        self.n_records += len(batch)
        self._maybe_compact()
        return self

    def add_records(self, records: Sequence[TransactionRecord], regions: RegionTable) -> "TransactionTally":
        return self.add_batch(records_to_batch(records, regions))

    def merge(self, other: "TransactionTally") -> "TransactionTally":
        if other.n_regions != self.n_regions:
            raise ValueError("cannot merge tallies over different region tables")
        for name in ("count", "amount", "cat_count", "cat_amount", "night_count",
                     "night_amount", "weekend_count", "weekend_amount"):
            getattr(self, name).__iadd__(getattr(other, name))
        self._customers += other._customers
        self._merchants += other._merchants
        self._merchant_home += other._merchant_home
        self.n_records += other.n_records
        self._maybe_compact()
        return self

    def _maybe_compact(self, force: bool = False) -> None:
        if force or sum(t.num_rows for t in self._customers) > _COMPACT_ROWS:
            self._customers = [_regroup(self._customers, ["home", "customer_id"], [])]
        if force or sum(t.num_rows for t in self._merchants) > _COMPACT_ROWS:
            self._merchants = [_regroup(self._merchants, ["merchant_id", "region", "category"],
                                        ["n", "amount"])]
        if force or sum(t.num_rows for t in self._merchant_home) > _COMPACT_ROWS:
            self._merchant_home = [_regroup(self._merchant_home, ["merchant_id", "home"],
                                            ["n", "amount"])]

    # -- queries ----------------------------------------------------------
    def domestic_in_area_counts(self) -> np.ndarray:
        """Raw count of domestic-customer transactions per merchant region."""
        return self.count[:, : self.n_regions].sum(axis=1)

    def active_residents(self) -> np.ndarray:
        out = np.zeros(self.n_regions, dtype=np.int64)
        if self._customers:
            self._maybe_compact(force=True)
            homes = np.asarray(self._customers[0].column("home")).astype(np.int64)
            out += np.bincount(homes, minlength=self.n_regions)
        return out

    def merchant_table(self) -> pa.Table:
        if not self._merchants:
            return pa.table({"merchant_id": pa.array([], pa.string()),
                             "region": pa.array([], pa.int32()),
                             "category": pa.array([], pa.int32()),
                             "n": pa.array([], pa.int64()),
                             "amount": pa.array([], pa.int64())})
        self._maybe_compact(force=True)
        return self._merchants[0].sort_by("merchant_id")

    def merchant_home_table(self) -> pa.Table:
        if not self._merchant_home:
            return pa.table({"merchant_id": pa.array([], pa.string()),
                             "home": pa.array([], pa.int32()),
                             "n": pa.array([], pa.int64()),
                             "amount": pa.array([], pa.int64())})
        self._maybe_compact(force=True)
        return self._merchant_home[0]

    # -- finalization -----------------------------------------------------
    def merchant_aggregates(self, regions: RegionTable) -> dict[str, MerchantAggregate]:
        t = self.merchant_table()
        ids = t.column("merchant_id").to_pylist()
        reg = t.column("region").to_pylist()
        cat = t.column("category").to_pylist()
        cnt = t.column("n").to_pylist()
        amt = t.column("amount").to_pylist()
        out: dict[str, MerchantAggregate] = {}
        for i, mid in enumerate(ids):
            if mid in out:
                raise IngestError(
                    f"merchant {mid!r} appears with more than one region/category")
            out[mid] = MerchantAggregate(mid, regions.ids[reg[i]], int(cat[i]), int(cnt[i]), int(amt[i]))
        return out

    def finalize(self, regions: RegionTable
                 ) -> tuple[dict[str, RegionAggregate], dict[str, MerchantAggregate]]:
        """Apply de-biasing weights and build per-region and per-merchant aggregates."""
        R = self.n_regions
        if len(regions) != R:
            raise ValueError("region table does not match tally")
        merchants = self.merchant_aggregates(regions)
        cw = regions.customer_weights()
        bw = regions.business_weights()
        foreign_cells = self.count[:, R] > 0
        if np.any(foreign_cells & np.isnan(bw)):
            missing = [regions.ids[i] for i in np.flatnonzero(foreign_cells & np.isnan(bw))]
            raise MissingShareError(
                f"business_market_share unset for regions {missing}; run compute_business_share first")
        bw = np.where(np.isnan(bw), 0.0, bw)

        # expensive merchants and domestic counts there, keyed by home region
        expensive = expensive_business_set(merchants.values())
        mh = self.merchant_home_table()
        exp_count = np.zeros(R, dtype=np.int64)
        exp_amount = np.zeros(R, dtype=np.int64)
        if mh.num_rows and expensive:
            is_exp = np.asarray(pc.is_in(mh.column("merchant_id"),
                                         value_set=pa.array(sorted(expensive), pa.string())))
            homes = np.asarray(mh.column("home")).astype(np.int64)[is_exp]
            exp_count = _int_bincount(homes, np.asarray(mh.column("n"))[is_exp], R)
            exp_amount = _int_bincount(homes, np.asarray(mh.column("amount"))[is_exp], R)

        active_res = self.active_residents()
        active_biz = np.zeros(R, dtype=np.int64)
        for m in merchants.values():
            active_biz[regions.index[m.region_id]] += 1

        # weight per (merchant region, origin) cell
        W = np.empty((R, R + 1))
        W[:, :R] = cw[None, :]
        W[:, R] = bw

        def wt(c, a, r_slice, o_slice):
            return Totals(float((c[r_slice, o_slice] * W[r_slice, o_slice]).sum()),
                          float((a[r_slice, o_slice] * W[r_slice, o_slice]).sum()))

        out: dict[str, RegionAggregate] = {}
        for r, rid in enumerate(regions.ids):
            has_area = self.count[r].any()
            has_res = self.count[:, r].any()
            if not (has_area or has_res):
                continue
            same = Totals(float(self.count[r, r] * cw[r]), float(self.amount[r, r] * cw[r]))
            others = [o for o in range(R) if o != r]
            dom_out = Totals(float((self.count[r, others] * cw[others]).sum()),
                             float((self.amount[r, others] * cw[others]).sum()))
            foreign = Totals(float(self.count[r, R] * bw[r]), float(self.amount[r, R] * bw[r]))
            in_area = Totals(same.count + dom_out.count + foreign.count,
                             same.amount + dom_out.amount + foreign.amount)
            area_cat = CategoryTotals((self.cat_count[r] * W[r][:, None]).sum(axis=0),
                                      (self.cat_amount[r] * W[r][:, None]).sum(axis=0))
            w_r = cw[r]
            res = Totals(float(self.count[:, r].sum() * w_r), float(self.amount[:, r].sum() * w_r))
            res_cat = CategoryTotals(self.cat_count[:, r, :].sum(axis=0) * w_r,
                                     self.cat_amount[:, r, :].sum(axis=0) * w_r)
            res_out = Totals(float((self.count[:, r].sum() - self.count[r, r]) * w_r),
                             float((self.amount[:, r].sum() - self.amount[r, r]) * w_r))
            out[rid] = RegionAggregate(
                region_id=rid,
                in_area=in_area,
                in_area_same=same,
                in_area_domestic_out=dom_out,
                in_area_foreign=foreign,
                in_area_by_category=area_cat,
                in_area_night=wt(self.night_count, self.night_amount, r, slice(None)),
                in_area_weekend=wt(self.weekend_count, self.weekend_amount, r, slice(None)),
                resident=res,
                resident_by_category=res_cat,
                resident_outside=res_out,
                resident_night=Totals(float(self.night_count[:, r].sum() * w_r),
                                      float(self.night_amount[:, r].sum() * w_r)),
                resident_weekend=Totals(float(self.weekend_count[:, r].sum() * w_r),
                                        float(self.weekend_amount[:, r].sum() * w_r)),
                resident_expensive=Totals(float(exp_count[r] * w_r), float(exp_amount[r] * w_r)),
                active_residents=int(active_res[r]),
                active_businesses=int(active_biz[r]),
            )
        return out, merchants


def _int_bincount(idx: np.ndarray, weights: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.int64)
    np.add.at(out, idx, weights.astype(np.int64))
    return out


_EXACT_LIMIT = 2 ** 53


def _bincount(idx: np.ndarray, weights: np.ndarray | None, size: int) -> np.ndarray:
    """Integer bincount; float accumulation is exact while sums stay below 2**53."""
    if weights is None:
        return np.bincount(idx, minlength=size).astype(np.int64)
    if weights.size and int(weights.sum()) >= _EXACT_LIMIT:
        return _int_bincount(idx, weights, size)
    return np.rint(np.bincount(idx, weights=weights.astype(np.float64), minlength=size)).astype(np.int64)


def _regroup(tables: list[pa.Table], keys: list[str], sums: list[str]) -> pa.Table:
    t = pa.concat_tables(tables)
    g = t.group_by(keys, use_threads=False).aggregate([(s, "sum") for s in sums])
    return g.rename_columns(keys + sums) if sums else g.select(keys)


def aggregate(records: Sequence[TransactionRecord], regions: RegionTable
              ) -> tuple[dict[str, RegionAggregate], dict[str, MerchantAggregate]]:
    """Aggregate valid records into region and merchant accumulators."""
    tally = TransactionTally(len(regions))
    if records:
        tally.add_records(records, regions)
    return tally.finalize(regions)


@dataclass
class IngestResult:
    regions: RegionTable  # with business shares set
    aggregates: dict[str, RegionAggregate]
    merchants: dict[str, MerchantAggregate]
    report: RejectReport
    tally: TransactionTally


def tally_file(source, regions: RegionTable, threads: int = 1,
               block_size: int = 8 << 20) -> tuple[TransactionTally, RejectReport]:
    """One streaming pass over a transactions file into an integer tally.

    With ``threads > 1`` batches are tallied concurrently and merged in
    batch order; integer tallies make the result identical either way.
    """
    report = RejectReport()
    total = TransactionTally(len(regions))
    batches = iter_transaction_batches(source, regions, block_size=block_size)

    def work(item):
        batch, rep = item
        return TransactionTally(len(regions)).add_batch(batch), rep

    if threads <= 1:
        for item in batches:
            part, rep = work(item)
            total.merge(part)
            report.merge(rep)
        return total, report

    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = []
        for item in batches:
            pending.append(pool.submit(work, item))
            if len(pending) >= 2 * threads:
                part, rep = pending.pop(0).result()
                total.merge(part)
                report.merge(rep)
        for fut in pending:
            part, rep = fut.result()
            total.merge(part)
            report.merge(rep)
    return total, report


def aggregate_file(source, regions: RegionTable, external_totals: Mapping[str, int],
                   threads: int = 1, block_size: int = 8 << 20) -> IngestResult:
    """Parse, validate, derive business shares and aggregate a transactions file."""
    tally, report = tally_file(source, regions, threads=threads, block_size=block_size)
    if any(r.business_market_share is None for r in regions):
        regions = compute_business_share(tally, regions, external_totals, skip_undefined=True)
    aggs, merchants = tally.finalize(regions)
    log.info("ingested %d rows, %d rejected", report.rows_read, report.rows_rejected)
    return IngestResult(regions, aggs, merchants, report, tally)
