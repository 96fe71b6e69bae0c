import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardecon import INDEX_NAMES
from cardecon.decompose import cross_correlation
from cardecon.glm import predict_norm, r_squared, sigmoid
from cardecon.indicators import IndicatorMatrix
from cardecon.pipeline import (
    CrossValReport,
    KMode,
    PipelineError,
    SessionResult,
    TrainedPipeline,
    component_sweep,
    cross_validate,
    make_splits,
    pc_index_correlations,
    predict,
    train,
)

from oracles import all_splits_ok
from toy import toy_inputs


def _close(a, b):
    np.testing.assert_allclose(np.asarray(a, float), np.asarray(b, float), rtol=1e-9, atol=1e-12)


def test_golden_file_roundtrip(data_dir):
    text = (data_dir / "golden_pipeline.json").read_text()
    pipe = TrainedPipeline.loads(text)
    assert pipe.dumps() == text
    fresh = train(*toy_inputs(), k_mode=KMode.fixed(3), seed=5)
    assert fresh.training_regions == pipe.training_regions and fresh.k == pipe.k == 3
    _close(fresh.pca.components, pipe.pca.components)
    for a, b in zip(fresh.glms, pipe.glms):
        _close(a.beta, b.beta)
    for a, b in zip(fresh.indicator_fits + fresh.index_fits, pipe.indicator_fits + pipe.index_fits):
        assert a.family == b.family
        _close([a.mu, a.sigma], [b.mu, b.sigma])


def test_load_ignores_unknown_keys_and_rejects_wrong_format(data_dir):
    doc = json.loads((data_dir / "golden_pipeline.json").read_text())
    doc["provenance"] = {"note": "extra"}
    TrainedPipeline.from_dict(doc)
    doc["format"] = "something-else/9"
    with pytest.raises(PipelineError):
        TrainedPipeline.from_dict(doc)


def test_train_deterministic():
    X, Y = toy_inputs(1)
    assert train(X, Y, k_mode=KMode.fixed(4)).dumps() == train(X, Y, k_mode=KMode.fixed(4)).dumps()


def test_predict_at_training_mean_gives_intercept():
    X, Y = toy_inputs(2)
    pipe = train(X, Y, k_mode=KMode.fixed(3))
    zero = np.zeros(pipe.k)
    for g in pipe.glms:
        assert predict_norm(g, zero) == pytest.approx(sigmoid(g.beta[0]), abs=1e-15)


def test_predict_errors_and_subsets():
    X, Y = toy_inputs(2)
    pipe = train(X, Y, k_mode=KMode.fixed(3))
    vals = X.values.copy()
    vals[1, 4] = np.nan
    bad = IndicatorMatrix(X.region_ids, vals)
    pred = predict(pipe, bad, ["T00", "T01", "NOPE"])
    assert pred.region_ids == ["T00"]
    assert set(pred.errors) == {"T01", "NOPE"}
    assert pred.normalized.shape == (1, 6)
    assert np.all((pred.normalized > 0) & (pred.normalized < 1))


def test_train_rejects_too_few_regions():
    X, Y = toy_inputs(3, m=6)
    with pytest.raises(PipelineError):
        train(X, Y, k_mode=KMode.fixed(5))
    with pytest.raises(ValueError):
        KMode.fixed(0)


def test_cv_dimensions_and_train_r2_consistency():
    X, Y = toy_inputs(4, m=40)
    rep = cross_validate(X, Y, sessions=3, train_size=28, k_mode=KMode.fixed(3), keep_pipelines=True)
    assert len(rep.sessions) == 3 and not any(s.failed for s in rep.sessions)
    for s in rep.sessions:
        assert len(s.train_regions) == 28 and len(s.val_regions) == 12
        pred = predict(s.pipeline, X, s.train_regions)
        Ytr = Y.subset(s.train_regions).values
        for j in range(6):
            assert r_squared(Ytr[:, j], pred.original[:, j]) == pytest.approx(s.r2["r2_train_orig"][j], abs=1e-12)
    buf = io.StringIO()
    rep.to_csv(buf)
    body = [ln for ln in buf.getvalue().splitlines() if not ln.startswith("#")]
    assert len(body) == 1 + 3 * 6 + 6


def test_single_session_all_regions():
    X, Y = toy_inputs(5)
    rep = cross_validate(X, Y, sessions=1, train_size=30, k_mode=KMode.fixed(2))
    s = rep.sessions[0]
    assert s.val_regions == [] and np.all(np.isnan(s.r2["r2_val_orig"]))
    assert np.all(np.isfinite(s.r2["r2_train_orig"]))


def test_mean_excludes_failed_sessions():
    ok = [SessionResult(i, [], [], 1, {f: np.full(6, v) for f in
                                       ("r2_train_norm", "r2_val_norm", "r2_train_orig", "r2_val_orig")})
          for i, v in enumerate((0.1, 0.2, 0.6))]
    rep = CrossValReport(ok + [SessionResult(3, [], [], error="boom")], seed=0)
    assert np.all(np.abs(rep.mean("r2_val_orig") - 0.3) <= 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(0, 2 ** 63), st.sampled_from(["random", "partition"]),
       st.data())
def test_split_properties(m, sessions, seed, mode, data):
    train_size = data.draw(st.integers(1, m))
    regions = [f"R{i}" for i in range(m)]
    splits = make_splits(regions, sessions, train_size, seed, mode)
    assert all_splits_ok(splits, regions, train_size)
    assert splits == make_splits(regions, sessions, train_size, seed, mode)


def test_partition_mode_validation_blocks_disjoint():
    regions = [f"R{i}" for i in range(20)]
    splits = make_splits(regions, 4, 15, 7, "partition")
    vals = [set(v) for _, v in splits]
    assert set().union(*vals) == set(regions)
    assert sum(map(len, vals)) == 20


def test_no_leakage_from_validation_regions():
    X, Y = toy_inputs(6, m=36)
    rep = cross_validate(X, Y, sessions=2, train_size=24, k_mode=KMode.fixed(3), keep_pipelines=True)
    v0 = [X.region_ids.index(r) for r in rep.sessions[0].val_regions]
    X2 = X.values.copy(); X2[v0] *= 3.7
    Y2 = Y.values.copy(); Y2[v0] += 100.0
    rep2 = cross_validate(IndicatorMatrix(X.region_ids, X2), type(Y)(Y.region_ids, Y2),
                          sessions=2, train_size=24, k_mode=KMode.fixed(3), keep_pipelines=True)
    assert rep2.sessions[0].pipeline.dumps() == rep.sessions[0].pipeline.dumps()
    assert np.array_equal(rep2.sessions[0].r2["r2_train_orig"], rep.sessions[0].r2["r2_train_orig"])


def test_global_fit_shares_front_end():
    X, Y = toy_inputs(7, m=36)
    rep = cross_validate(X, Y, sessions=2, train_size=24, k_mode=KMode.fixed(3),
                         refit_per_session=False, keep_pipelines=True)
    a, b = (s.pipeline for s in rep.sessions)
    assert np.array_equal(a.pca.components, b.pca.components)


def test_sweep_on_rank_three_data(small_inputs):
    ind, idx = small_inputs
    res = component_sweep(ind, idx, range(1, 7), sessions=4, train_size=34, seed=0)
    curve = np.nanmean(res.curve("r2_val_orig"), axis=1)
    assert curve[2] > 0.9
    assert curve[0] < curve[2]
    assert np.all(np.abs(curve[3:] - curve[2]) < 0.1)
    buf = io.StringIO()
    res.to_csv(buf)
    assert len([ln for ln in buf.getvalue().splitlines() if not ln.startswith("#")]) == 7
    with pytest.raises(ValueError):
        component_sweep(ind, idx, [0, 1])


def test_pc_index_correlations(small_inputs):
    ind, idx = small_inputs
    pipe = train(ind, idx, k_mode=KMode.fixed(4))
    tab = pc_index_correlations(pipe, ind, idx)
    assert tab.values.shape == (4, 6)
    assert np.all(np.abs(tab.values) <= 1)
    assert np.array_equal(tab.flagged, np.abs(tab.values) > 0.40)
    # planted on the leading components, so the first PC is strongly tied to some index
    assert tab.flagged[0].any()


def test_correlation_identity_and_chance_level():
    rng = np.random.default_rng(0)
    small = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(52, 1)), r.normal(size=(52, 1))
        small += abs(cross_correlation(a, b)[0, 0]) < 0.5
    assert small >= 95
    a = rng.normal(size=(52, 1))
    assert cross_correlation(a, a)[0, 0] == pytest.approx(1.0, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(0.01, 2))
def test_prediction_monotone_along_score_rays(seed, t0, dt):
    X, Y = toy_inputs(seed % 5)
    pipe = train(X, Y, k_mode=KMode.fixed(3))
    direction = np.random.default_rng(seed).normal(size=3)
    for g in pipe.glms:
        sign = np.sign(direction @ g.beta[1:])
        p0 = predict_norm(g, t0 * direction)
        p1 = predict_norm(g, (t0 + dt) * direction)
        assert sign * (p1 - p0) >= -1e-15
