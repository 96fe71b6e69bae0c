import io
import random
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardecon.ingest import (
    IngestError,
    MissingShareError,
    RegionMeta,
    RegionTable,
    TransactionRecord,
    TransactionTally,
    aggregate,
    aggregate_file,
    compute_business_share,
    debias_weight,
    load_region_table,
    parse_transactions,
    records_to_batch,
    tally_file,
)

HEADER = ("txn_id,timestamp,amount_cents,customer_id,customer_kind,home_region_or_country,"
          "merchant_id,merchant_region,category_id,group_id\n")


def regions3(business=None):
    table = RegionTable([
        RegionMeta("A", "Alpha", 100.0, 0.25),
        RegionMeta("B", "Beta", 50.0, 0.5),
        RegionMeta("C", "Gamma", 200.0, 1.0),
    ])
    return table.with_business_shares(business) if business else table


def csv_bytes(*rows):
    return (HEADER + "".join(r + "\n" for r in rows)).encode()


GOOD = [
    "t1,2011-03-05T23:15,1250,c1,D,A,m1,A,7,1",
    "t2,2011-03-07T12:00,800,c1,D,A,m2,B,11,2",
    "t3,2011-03-08T06:00,4000,f1,F,FR,m3,C,33,5",
]


def test_three_good_rows():
    recs, rep = parse_transactions(csv_bytes(*GOOD), regions3())
    assert len(recs) == 3
    assert rep.as_dict() == {}
    assert recs[0].timestamp == datetime(2011, 3, 5, 23, 15)
    assert recs[0].amount == 1250 and recs[0].home_region_id == "A"
    assert recs[2].customer_kind == "F" and recs[2].home_region_id is None


def test_zero_amount_rejected():
    rows = GOOD[:2] + ["t3,2011-03-08T06:00,0,c2,D,A,m3,C,33,5"]
    recs, rep = parse_transactions(csv_bytes(*rows), regions3())
    assert len(recs) == 2
    assert rep.as_dict() == {"nonpositive_amount": 1}


def test_category_77_rejected():
    recs, rep = parse_transactions(csv_bytes(GOOD[0], "t9,2011-03-08T06:00,10,c2,D,A,m3,C,77,5"),
                                   regions3())
    assert len(recs) == 1
    assert rep.as_dict() == {"out_of_range_category": 1}


@pytest.mark.parametrize("row,reason", [
    ("t,2011-03-08T06:00,10,c,D,A,m,C,7", "malformed_row"),
    ("t,2011-03-08T06:00,,c,D,A,m,C,7,1", "missing_field"),
    ("t,2011-03-08T06:00,12.5,c,D,A,m,C,7,1", "malformed_amount"),
    ("t,2011-03-08T06:00,-3,c,D,A,m,C,7,1", "nonpositive_amount"),
    ("t,2011-13-08T06:00,10,c,D,A,m,C,7,1", "bad_timestamp"),
    ("t,2011-03-08 06:00:00,10,c,D,A,m,C,7,1", "bad_timestamp"),
    ("t,2011-03-08T06:00,10,c,X,A,m,C,7,1", "bad_customer_kind"),
    ("t,2011-03-08T06:00,10,c,D,A,m,C,0,1", "out_of_range_category"),
    ("t,2011-03-08T06:00,10,c,D,A,m,C,7,13", "out_of_range_group"),
    ("t,2011-03-08T06:00,10,c,D,A,m,Z,7,1", "unknown_merchant_region"),
    ("t,2011-03-08T06:00,10,c,D,Q,m,C,7,1", "unknown_home_region"),
])
def test_reject_reasons(row, reason):
    recs, rep = parse_transactions(csv_bytes(GOOD[0], row), regions3())
    assert len(recs) == 1
    assert rep.as_dict() == {reason: 1}
    assert rep.rows_read == 2


def test_foreign_country_not_checked_against_regions():
    recs, rep = parse_transactions(csv_bytes("t,2011-03-08T06:00,10,c,F,ZZ,m,C,7,1"), regions3())
    assert len(recs) == 1 and rep.rows_rejected == 0


def test_unreadable_stream_is_fatal():
    with pytest.raises(IngestError):
        parse_transactions(b"only,three,columns\n1,2,3\n", regions3())
    with pytest.raises(IngestError):
        parse_transactions("/nonexistent/transactions.csv", regions3())


def test_leading_comments_skipped():
    data = b"# provenance line\n# another\n" + csv_bytes(*GOOD)
    recs, rep = parse_transactions(data, regions3())
    assert len(recs) == 3 and rep.rows_rejected == 0


def test_debias_weights():
    t = regions3({"A": 0.2, "B": 1.0, "C": 1.0})
    dom = TransactionRecord("x", datetime(2011, 1, 1), 100, "c", "D", "A", "m", "B", 1, 1)
    full = TransactionRecord("x", datetime(2011, 1, 1), 100, "c", "D", "C", "m", "B", 1, 1)
    foreign = TransactionRecord("x", datetime(2011, 1, 1), 100, "c", "F", "FR", "m", "A", 1, 1)
    assert debias_weight(dom, t) == 4.0
    assert debias_weight(full, t) == 1.0
    assert debias_weight(foreign, t) == 5.0
    with pytest.raises(MissingShareError):
        debias_weight(foreign, regions3())


def test_business_share_examples():
    recs = [TransactionRecord(f"t{i}", datetime(2011, 1, 1), 100, "c", "D", "A", "m", "A", 1, 1)
            for i in range(80)]
    recs.append(TransactionRecord("b", datetime(2011, 1, 1), 100, "c", "D", "A", "m2", "B", 1, 1))
    t = compute_business_share(recs, regions3(), {"A": 20, "B": 0, "C": 5})
    assert t["A"].business_market_share == 0.8
    assert t["B"].business_market_share == 1.0
    # no in-dataset activity but external activity: clamped into (0, 1]
    assert 0 < t["C"].business_market_share < 1e-300
    with pytest.raises(IngestError, match="C"):
        compute_business_share(recs, regions3(), {"A": 20, "B": 0, "C": 0})


def test_business_share_tally_matches_per_row_ratio(small_corpus):
    regions, ext = load_region_table(small_corpus.region_table_path)
    recs_in = {}
    import csv
    with open(small_corpus.transactions_path) as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        for row in csv.DictReader(lines):
            if row["customer_kind"] == "D":
                recs_in[row["merchant_region"]] = recs_in.get(row["merchant_region"], 0) + 1
    res = aggregate_file(small_corpus.transactions_path, regions, ext)
    for meta in res.regions:
        n = recs_in.get(meta.region_id, 0)
        assert meta.business_market_share == n / (n + ext[meta.region_id])


def test_single_record_trace():
    rec = TransactionRecord("x", datetime(2011, 3, 7, 12), 1000, "c", "D", "A", "m", "A", 7, 1)
    aggs, merchants = aggregate([rec], regions3())
    a = aggs["A"]
    assert a.in_area == a.resident == a.in_area_same == (4.0, 4000.0)
    assert a.in_area_domestic_out == a.in_area_foreign == (0.0, 0.0)
    assert a.resident_outside == (0.0, 0.0)
    assert set(aggs) == {"A"}
    assert merchants["m"].txn_count == 1 and merchants["m"].amount_sum == 1000


def test_empty_input():
    aggs, merchants = aggregate([], regions3())
    assert aggs == {} and merchants == {}
    recs, rep = parse_transactions(HEADER.encode(), regions3())
    assert recs == [] and rep.rows_read == 0


def test_fixture_accumulators_match_hand_table(data_dir):
    """Manual accounting of the 12-record fixture (weights A=4, B=2, C=1; foreign A=2, C=2.5)."""
    regions, ext = load_region_table(data_dir / "fixture12_regions.csv")
    res = aggregate_file(data_dir / "fixture12_transactions.csv", regions, ext)
    shares = {m.region_id: m.business_market_share for m in res.regions}
    assert shares == {"A": 0.5, "B": 1.0, "C": 0.4}
    A, B, C = (res.aggregates[r] for r in "ABC")
    # A in-area: T01 T02 T04 (A residents, w4), T05 (B, w2), T10 (C, w1), T11 (foreign, w2)
    assert A.in_area_same == (12.0, 4 * (1250 + 800 + 1500))
    assert A.in_area_domestic_out == (3.0, 2 * 2000 + 2500)
    assert A.in_area_foreign == (2.0, 2 * 3500)
    assert A.in_area.count == 17.0
    # A residents: T01..T04
    assert A.resident == (16.0, 4 * (1250 + 800 + 4000 + 1500))
    assert A.resident_outside == (4.0, 16000.0)
    assert A.resident_night == (4.0, 5000.0)  # T01 only; T03 at 06:00 is day
    assert A.resident_weekend == (8.0, 4 * (1250 + 1500))
    assert A.active_residents == 2 and A.active_businesses == 3
    # C: T07 (B, w2), T08 (C, w1), T12 (foreign, w2.5)
    assert C.in_area_foreign.count == pytest.approx(2.5, rel=1e-15)
    assert C.in_area_night.count == pytest.approx(2.5, rel=1e-15)
    # T10 is the only visit to an expensive merchant (m7)
    assert C.resident_expensive == (1.0, 2500.0)
    assert A.resident_expensive == B.resident_expensive == (0.0, 0.0)
    # B residents: T05 T06 T07 (w2)
    assert B.resident == (6.0, 2 * (2000 + 600 + 9900))
    assert B.resident_night == (4.0, 2 * 2600)


def test_partition_invariants(small_corpus):
    regions, ext = load_region_table(small_corpus.region_table_path)
    res = aggregate_file(small_corpus.transactions_path, regions, ext)
    for a in res.aggregates.values():
        for f in ("count", "amount"):
            parts = getattr(a.in_area_same, f) + getattr(a.in_area_domestic_out, f) + getattr(a.in_area_foreign, f)
            assert getattr(a.in_area, f) == pytest.approx(parts, rel=1e-12)
            assert a.in_area_by_category.total()[0 if f == "count" else 1] == pytest.approx(getattr(a.in_area, f), rel=1e-12)
            assert a.resident_by_category.total()[0 if f == "count" else 1] == pytest.approx(getattr(a.resident, f), rel=1e-12)
        for t in (a.in_area, a.resident, a.in_area_night, a.resident_weekend):
            assert t.count >= 0 and t.amount >= 0 and (t.count > 0 or t.amount == 0)


def test_total_weighted_amount_matches_records(data_dir):
    regions, ext = load_region_table(data_dir / "fixture12_regions.csv")
    res = aggregate_file(data_dir / "fixture12_transactions.csv", regions, ext)
    recs, _ = parse_transactions(data_dir / "fixture12_transactions.csv", regions)
    expected = sum(debias_weight(r, res.regions) * r.amount for r in recs)
    got = sum(a.in_area.amount for a in res.aggregates.values())
    assert got == pytest.approx(expected, rel=1e-15)


def test_reject_counts_plus_records_equal_rows(data_dir):
    text = (data_dir / "fixture12_transactions.csv").read_text()
    bad = "X1,2011-03-08T06:00,0,c,D,A,m1,A,7,1\nX2,nonsense\nX3,2011-03-08T06:00,5,c,D,A,m1,A,99,1\n"
    recs, rep = parse_transactions((text + bad).encode(), load_region_table(data_dir / "fixture12_regions.csv")[0])
    assert len(recs) + rep.rows_rejected == rep.rows_read == 15


def test_merchant_in_two_regions_is_an_error():
    rows = ["t1,2011-03-05T23:15,1250,c1,D,A,m1,A,7,1", "t2,2011-03-05T23:15,1250,c1,D,A,m1,B,7,1"]
    with pytest.raises(IngestError, match="m1"):
        aggregate_file(csv_bytes(*rows), regions3(), {"A": 0, "B": 0, "C": 0})


def _records(seed: int, n: int):
    rng = random.Random(seed)
    merchants = {f"m{k}": (rng.choice("ABC"), rng.randrange(1, 77)) for k in range(15)}
    out = []
    for i in range(n):
        mid = f"m{rng.randrange(15)}"
        region, cat = merchants[mid]
        foreign = rng.random() < 0.2
        out.append(TransactionRecord(
            f"t{i}", datetime(2011, 1 + rng.randrange(12), 1 + rng.randrange(28), rng.randrange(24), rng.randrange(60)),
            rng.randrange(1, 10 ** 7), f"c{rng.randrange(30)}", "F" if foreign else "D",
            "FR" if foreign else rng.choice("ABC"), mid, region, cat, 1 + (cat - 1) * 12 // 76))
    return out


SHARES = {"A": 0.3, "B": 0.7, "C": 0.45}


def _agg_equal(x, y):
    assert x.keys() == y.keys()
    for k in x:
        for f in x[k].__dataclass_fields__:
            a, b = getattr(x[k], f), getattr(y[k], f)
            if hasattr(a, "counts"):
                assert np.array_equal(a.counts, b.counts) and np.array_equal(a.amounts, b.amounts)
            else:
                assert a == b, f


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 120))
def test_order_independence(seed, n):
    recs = _records(seed, n)
    shuffled = recs[:]
    random.Random(seed + 1).shuffle(shuffled)
    t = regions3(SHARES)
    _agg_equal(aggregate(recs, t)[0], aggregate(shuffled, t)[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 120), st.floats(0.0, 1.0))
def test_merge_homomorphism(seed, n, frac):
    recs = _records(seed, n)
    cut = int(frac * n)
    t = regions3(SHARES)
    left = TransactionTally(3).add_batch(records_to_batch(recs[:cut], t)) if cut else TransactionTally(3)
    right = TransactionTally(3).add_batch(records_to_batch(recs[cut:], t)) if cut < n else TransactionTally(3)
    merged = left.merge(right).finalize(t)
    whole = aggregate(recs, t)
    _agg_equal(merged[0], whole[0])
    assert merged[1] == whole[1]


def test_thread_and_block_size_independence(small_corpus):
    regions, ext = load_region_table(small_corpus.region_table_path)
    base = aggregate_file(small_corpus.transactions_path, regions, ext, threads=1)
    for threads, block in ((4, 1 << 16), (8, 1 << 18)):
        other = aggregate_file(small_corpus.transactions_path, regions, ext, threads=threads, block_size=block)
        _agg_equal(base.aggregates, other.aggregates)
        assert base.merchants == other.merchants
        assert base.regions == other.regions


def test_tally_record_path_matches_file_path(data_dir):
    regions, ext = load_region_table(data_dir / "fixture12_regions.csv")
    res = aggregate_file(data_dir / "fixture12_transactions.csv", regions, ext)
    recs, _ = parse_transactions(data_dir / "fixture12_transactions.csv", regions)
    _agg_equal(aggregate(recs, res.regions)[0], res.aggregates)


def test_region_table_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("region_id,name,area_km2,customer_market_share\nA,a,1,0.5\n")
    with pytest.raises(IngestError, match="missing columns"):
        load_region_table(p)
    p.write_text("region_id,name,area_km2,customer_market_share,external_domestic_txn_count\nA,a,-1,0.5,0\n")
    with pytest.raises(IngestError, match="area"):
        load_region_table(p)
    p.write_text("region_id,name,area_km2,customer_market_share,external_domestic_txn_count\nA,a,1,1.5,0\n")
    with pytest.raises(IngestError, match="share"):
        load_region_table(p)


def test_foreign_without_share_needs_business_share():
    rows = ["t1,2011-03-05T23:15,1250,f,F,FR,m1,B,7,1"]
    with pytest.raises(MissingShareError):
        tally, _ = tally_file(csv_bytes(*rows), regions3())
        tally.finalize(regions3())
