"""Training, prediction and repeated shuffle-and-split evaluation.

A trained pipeline chains: per-indicator CDF normalization -> PCA projection
onto the leading ``k`` components -> one logit GLM per official index ->
inverse CDF of that index's fitted distribution.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import INDEX_NAMES, _io
from .decompose import PCAModel, cross_correlation, fit_pca, project, select_components
from .glm import GLMModel, fit_glm, predict_norm, r_squared
from .indicators import INDICATOR_NAMES, IndicatorMatrix
from .normalize import (
    FittedDistribution,
    NormalizationError,
    fit_columns,
    fit_distribution,
    from_quantile,
    normalize_columns,
    to_quantile_lenient,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = "cardecon-pipeline/1"
CORRELATION_FLAG = 0.40


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

@dataclass
class OfficialIndices:
    region_ids: list[str]
    values: np.ndarray  # (m, 6), columns in INDEX_NAMES order
    names: tuple[str, ...] = INDEX_NAMES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.region_ids), len(self.names)):
            raise ValueError(f"expected shape ({len(self.region_ids)}, {len(self.names)})")

    def subset(self, region_ids: Sequence[str]) -> "OfficialIndices":
        pos = {r: i for i, r in enumerate(self.region_ids)}
        missing = [r for r in region_ids if r not in pos]
        if missing:
            raise KeyError(f"regions missing from official indices: {missing}")
        return OfficialIndices(list(region_ids), self.values[[pos[r] for r in region_ids]], self.names)

    def to_csv(self, path_or_fh, comments: Sequence[str] = ()) -> None:
        rows = ([rid, *map(float, row)] for rid, row in zip(self.region_ids, self.values))
        _io.write_table(path_or_fh, ("region_id", *self.names), rows, comments)

    @classmethod
    def from_csv(cls, path_or_fh) -> "OfficialIndices":
        header, rows, _ = _io.read_table(path_or_fh)
        missing = [n for n in INDEX_NAMES if n not in header]
        if header[0] != "region_id" or missing:
            raise ValueError(f"official indices file needs region_id and columns {list(INDEX_NAMES)}")
        cols = [header.index(n) for n in INDEX_NAMES]
        values = np.array([[float(r[c]) if r[c].strip() else np.nan for c in cols] for r in rows])
        return cls([r[0] for r in rows], values.reshape(-1, len(INDEX_NAMES)))


@dataclass(frozen=True)
class KMode:
    """Component selection: a fixed ``k`` or the smallest ``k`` reaching a variance share."""
    fixed_k: int | None = 6
    variance_threshold: float | None = None

    @classmethod
    def fixed(cls, k: int) -> "KMode":
        if k < 1:
            raise ValueError("k must be at least 1")
        return cls(fixed_k=k, variance_threshold=None)

    @classmethod
    def variance(cls, tau: float) -> "KMode":
        return cls(fixed_k=None, variance_threshold=tau)

    def select(self, model: PCAModel) -> int:
        return select_components(model, variance_threshold=self.variance_threshold,
                                 fixed_k=self.fixed_k)

    def to_dict(self) -> dict:
        return {"fixed_k": self.fixed_k, "variance_threshold": self.variance_threshold}


# ---------------------------------------------------------------------------
# Trained pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainedPipeline:
    indicator_fits: tuple[FittedDistribution, ...]
    pca: PCAModel
    k: int
    index_fits: tuple[FittedDistribution, ...]
    glms: tuple[GLMModel, ...]
    training_regions: tuple[str, ...]
    seed: int
    k_mode: KMode = KMode()
    index_names: tuple[str, ...] = INDEX_NAMES

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        def dist(d: FittedDistribution) -> dict:
            return {"family": d.family, "mu": d.mu, "sigma": d.sigma,
                    "log_likelihood": d.log_likelihood, "n": d.n}

        return {
            "format": FORMAT_VERSION,
            "seed": self.seed,
            "k_mode": self.k_mode.to_dict(),
            "k": self.k,
            "training_regions": list(self.training_regions),
            "indicators": [dict(name=name, **dist(d))
                           for name, d in zip(INDICATOR_NAMES, self.indicator_fits)],
            "pca": {
                "mean": self.pca.mean.tolist(),
                "eigenvalues": self.pca.eigenvalues.tolist(),
                "explained_fraction": self.pca.explained_fraction.tolist(),
                "components": self.pca.components.tolist(),
            },
            "indices": [
                {
                    "name": name,
                    "distribution": dist(d),
                    "glm": {
                        "beta": g.beta.tolist(),
                        "converged": g.converged,
                        "iterations": g.iterations,
                        "final_deviance": g.final_deviance,
                    },
                }
                for name, d, g in zip(self.index_names, self.index_fits, self.glms)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainedPipeline":
        if doc.get("format") != FORMAT_VERSION:
            raise PipelineError(f"unsupported pipeline format {doc.get('format')!r}")

        def dist(d: dict) -> FittedDistribution:
            return FittedDistribution(d["family"], float(d["mu"]), float(d["sigma"]),
                                      float(d["log_likelihood"]), int(d["n"]))

        names = [d["name"] for d in doc["indicators"]]
        if tuple(names) != INDICATOR_NAMES:
            raise PipelineError("indicator list does not match the 35 indicators")
        pca = doc["pca"]
        return cls(
            indicator_fits=tuple(dist(d) for d in doc["indicators"]),
            pca=PCAModel(np.array(pca["mean"], dtype=float),
                         np.array(pca["components"], dtype=float),
                         np.array(pca["eigenvalues"], dtype=float),
                         np.array(pca["explained_fraction"], dtype=float)),
            k=int(doc["k"]),
            index_fits=tuple(dist(e["distribution"]) for e in doc["indices"]),
            glms=tuple(GLMModel(np.array(e["glm"]["beta"], dtype=float), bool(e["glm"]["converged"]),
                                int(e["glm"]["iterations"]), float(e["glm"]["final_deviance"]))
                       for e in doc["indices"]),
            training_regions=tuple(doc["training_regions"]),
            seed=int(doc["seed"]),
            k_mode=KMode(**doc["k_mode"]),
            index_names=tuple(e["name"] for e in doc["indices"]),
        )

    @classmethod
    def loads(cls, text: str) -> "TrainedPipeline":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainedPipeline":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())


# ---------------------------------------------------------------------------
# Training / prediction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Front:
    """Fitted normalization + PCA, shared by every k evaluated on one split."""
    fits: tuple[FittedDistribution, ...]
    pca: PCAModel


def _fit_front(X: np.ndarray) -> _Front:
    fits = tuple(fit_columns(X, INDICATOR_NAMES))
    return _Front(fits, fit_pca(normalize_columns(X, fits)))


def _front_scores(front: _Front, X: np.ndarray, k: int) -> np.ndarray:
    return project(front.pca, normalize_columns(X, front.fits), k)


def _fit_heads(scores: np.ndarray, Y: np.ndarray, names: Sequence[str]
               ) -> tuple[tuple[FittedDistribution, ...], tuple[GLMModel, ...]]:
    fits, glms = [], []
    for j, name in enumerate(names):
        try:
            d = fit_distribution(Y[:, j])
        except NormalizationError as exc:
            raise type(exc)(f"index {name}: {exc}") from exc
        fits.append(d)
        glms.append(fit_glm(scores, to_quantile_lenient(Y[:, j], d)))
    return tuple(fits), tuple(glms)


def _check_inputs(indicators: IndicatorMatrix, indices: OfficialIndices,
                  regions: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    X = indicators.subset(regions).values
    Y = indices.subset(regions).values
    if not np.all(np.isfinite(X)):
        raise PipelineError("indicator matrix has non-finite values for training regions")
    if not np.all(np.isfinite(Y)):
        raise PipelineError("official indices have missing values for training regions")
    return X, Y


def train(indicators: IndicatorMatrix, indices: OfficialIndices,
          region_subset: Sequence[str] | None = None, k_mode: KMode = KMode(),
          seed: int = 0) -> TrainedPipeline:
    """Fit the whole chain on ``region_subset`` (all shared regions by default)."""
    regions = list(region_subset) if region_subset is not None else _shared_regions(indicators, indices)
    X, Y = _check_inputs(indicators, indices, regions)
    front = _fit_front(X)
    k = k_mode.select(front.pca)
    if len(regions) <= k + 1:
        raise PipelineError(f"need more than {k + 1} training regions for k={k}")
    scores = project(front.pca, normalize_columns(X, front.fits), k)
    index_fits, glms = _fit_heads(scores, Y, indices.names)
    return TrainedPipeline(front.fits, front.pca, k, index_fits, glms,
                           tuple(regions), int(seed), k_mode, tuple(indices.names))


@dataclass
class Predictions:
    region_ids: list[str]
    normalized: np.ndarray  # (m, 6)
    original: np.ndarray  # (m, 6)
    errors: dict[str, str] = field(default_factory=dict)
    index_names: tuple[str, ...] = INDEX_NAMES

    def to_csv(self, path_or_fh, comments: Sequence[str] = ()) -> None:
        header = ("region_id", *(f"{n}_norm" for n in self.index_names), *self.index_names)
        rows = [[rid, *map(float, self.normalized[i]), *map(float, self.original[i])]
                for i, rid in enumerate(self.region_ids)]
        _io.write_table(path_or_fh, header, rows,
                        [*comments, *(f"error {r}: {e}" for r, e in sorted(self.errors.items()))])


def _head_predict(pipeline_glms, index_fits, scores):
    norm = np.column_stack([predict_norm(g, scores) for g in pipeline_glms])
    orig = np.column_stack([from_quantile(norm[:, j], d) for j, d in enumerate(index_fits)])
    return norm, orig


def predict(pipeline: TrainedPipeline, indicators: IndicatorMatrix,
            region_subset: Sequence[str] | None = None) -> Predictions:
    """Predict all indices for the requested regions, normalized and original scale."""
    wanted = list(region_subset) if region_subset is not None else list(indicators.region_ids)
    known = set(indicators.region_ids)
    errors = {r: "region not in indicator matrix" for r in wanted if r not in known}
    ok = []
    for r in wanted:
        if r in errors:
            continue
        if not np.all(np.isfinite(indicators.row(r))):
            errors[r] = "non-finite indicator values"
        else:
            ok.append(r)
    if not ok:
        empty = np.zeros((0, len(pipeline.index_names)))
        return Predictions([], empty, empty.copy(), errors, pipeline.index_names)
    X = indicators.subset(ok).values
    front = _Front(pipeline.indicator_fits, pipeline.pca)
    scores = _front_scores(front, X, pipeline.k)
    norm, orig = _head_predict(pipeline.glms, pipeline.index_fits, scores)
    return Predictions(ok, norm, orig, errors, pipeline.index_names)


def _shared_regions(indicators: IndicatorMatrix, indices: OfficialIndices) -> list[str]:
    have = set(indices.region_ids)
    return [r for r in indicators.region_ids if r in have]


# ---------------------------------------------------------------------------
# Repeated shuffle-and-split evaluation
# ---------------------------------------------------------------------------

def split_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator (Philox-4x64) keyed by ``(seed, stream)``."""
    key = np.array([seed % 2**64, stream % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def make_splits(regions: Sequence[str], sessions: int, train_size: int, seed: int,
                mode: str = "random") -> list[tuple[list[str], list[str]]]:
    """Train/validation splits over ``regions`` (in the given order).

    ``random``: session ``s`` takes the first ``train_size`` entries of a
    permutation drawn from ``split_rng(seed, s)``. ``partition``: one
    permutation from stream 0; session ``s`` validates on the cyclic block of
    ``m - train_size`` positions starting at ``s * (m - train_size)``.
    """
    m = len(regions)
    if sessions < 1:
        raise ValueError("sessions must be at least 1")
    if not 1 <= train_size <= m:
        raise ValueError(f"train_size must be in 1..{m}")
    splits = []
    if mode == "random":
        for s in range(sessions):
            perm = split_rng(seed, s).permutation(m)
            tr = sorted(perm[:train_size])
            va = sorted(perm[train_size:])
            splits.append(([regions[i] for i in tr], [regions[i] for i in va]))
    elif mode == "partition":
        perm = split_rng(seed, 0).permutation(m)
        v = m - train_size
        for s in range(sessions):
            val_pos = {(s * v + i) % m for i in range(v)}
            va = sorted(perm[i] for i in val_pos)
            tr = sorted(perm[i] for i in range(m) if i not in val_pos)
            splits.append(([regions[i] for i in tr], [regions[i] for i in va]))
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return splits


R2_FIELDS = ("r2_train_norm", "r2_val_norm", "r2_train_orig", "r2_val_orig")


@dataclass
class SessionResult:
    session: int
    train_regions: list[str]
    val_regions: list[str]
    k: int | None = None
    r2: dict[str, np.ndarray] = field(default_factory=dict)  # field -> (6,), NaN when absent
    error: str | None = None
    pipeline: TrainedPipeline | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class CrossValReport:
    sessions: list[SessionResult]
    seed: int
    index_names: tuple[str, ...] = INDEX_NAMES

    @property
    def successful(self) -> list[SessionResult]:
        return [s for s in self.sessions if not s.failed]

    def mean(self, name: str) -> np.ndarray:
        """Per-index mean of an R^2 field over successful sessions (NaN if absent)."""
        ok = self.successful
        if not ok:
            return np.full(len(self.index_names), np.nan)
        stack = np.array([s.r2[name] for s in ok])
        with np.errstate(invalid="ignore"):
            out = np.full(stack.shape[1], np.nan)
            for j in range(stack.shape[1]):
                col = stack[:, j][~np.isnan(stack[:, j])]
                if col.size:
                    out[j] = float(np.sum(col) / col.size)
        return out

    def to_csv(self, path_or_fh, comments: Sequence[str] = ()) -> None:
        header = ("session", "index", *R2_FIELDS, "n_train", "n_val", "status")
        rows = []
        for s in self.sessions:
            for j, name in enumerate(self.index_names):
                vals = [float(s.r2[f][j]) if s.r2 else "" for f in R2_FIELDS]
                vals = ["" if isinstance(v, float) and np.isnan(v) else v for v in vals]
                rows.append([s.session, name, *vals, len(s.train_regions), len(s.val_regions),
                             "failed: " + s.error if s.failed else "ok"])
        for j, name in enumerate(self.index_names):
            vals = [float(self.mean(f)[j]) for f in R2_FIELDS]
            rows.append(["mean", name, *["" if np.isnan(v) else v for v in vals], "", "", ""])
        split_lines = [f"session {s.session} validation: {' '.join(s.val_regions)}" for s in self.sessions]
        seed_line = [] if any(c.startswith("seed:") for c in comments) else [f"seed: {self.seed}"]
        _io.write_table(path_or_fh, header, rows, [*comments, *seed_line, *split_lines])


def _evaluate_heads(scores_tr, Y_tr, scores_va, Y_va, names):
    fits, glms = _fit_heads(scores_tr, Y_tr, names)
    r2 = {f: np.full(len(names), np.nan) for f in R2_FIELDS}
    norm_tr, orig_tr = _head_predict(glms, fits, scores_tr)
    for j, d in enumerate(fits):
        y_norm = to_quantile_lenient(Y_tr[:, j], d)
        r2["r2_train_norm"][j] = r_squared(y_norm, norm_tr[:, j])
        r2["r2_train_orig"][j] = r_squared(Y_tr[:, j], orig_tr[:, j])
    if scores_va is not None and len(scores_va) >= 2:
        norm_va, orig_va = _head_predict(glms, fits, scores_va)
        for j, d in enumerate(fits):
            y_norm = to_quantile_lenient(Y_va[:, j], d)
            if np.ptp(y_norm) > 0:
                r2["r2_val_norm"][j] = r_squared(y_norm, norm_va[:, j])
            if np.ptp(Y_va[:, j]) > 0:
                r2["r2_val_orig"][j] = r_squared(Y_va[:, j], orig_va[:, j])
    return fits, glms, r2


def _run_sessions(indicators: IndicatorMatrix, indices: OfficialIndices,
                  splits: list[tuple[list[str], list[str]]], ks: Iterable[KMode | int],
                  seed: int, refit_per_session: bool = True, keep_pipelines: bool = False
                  ) -> dict[object, list[SessionResult]]:
    """Evaluate every split for each requested component mode; fronts are fitted once per split."""
    ks = list(ks)
    global_front = None
    if not refit_per_session:
        allr = _shared_regions(indicators, indices)
        global_front = _fit_front(_check_inputs(indicators, indices, allr)[0])
    results: dict[object, list[SessionResult]] = {k: [] for k in ks}
    for s, (tr, va) in enumerate(splits):
        try:
            X_tr, Y_tr = _check_inputs(indicators, indices, tr)
            X_va, Y_va = _check_inputs(indicators, indices, va) if va else (None, None)
            front = global_front or _fit_front(X_tr)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("session %d failed: %s", s, exc)
            for k in ks:
                results[k].append(SessionResult(s, tr, va, error=str(exc)))
            continue
        Z_tr = normalize_columns(X_tr, front.fits)
        Z_va = normalize_columns(X_va, front.fits) if X_va is not None else None
        for kspec in ks:
            mode = kspec if isinstance(kspec, KMode) else KMode.fixed(int(kspec))
            try:
                k = mode.select(front.pca)
                if len(tr) <= k + 1:
                    raise PipelineError(f"need more than {k + 1} training regions for k={k}")
                S_tr = project(front.pca, Z_tr, k)
                S_va = project(front.pca, Z_va, k) if Z_va is not None else None
                fits, glms, r2 = _evaluate_heads(S_tr, Y_tr, S_va, Y_va, indices.names)
            except (ValueError, np.linalg.LinAlgError) as exc:
                log.warning("session %d (k mode %s) failed: %s", s, kspec, exc)
                results[kspec].append(SessionResult(s, tr, va, error=str(exc)))
                continue
            pipe = None
            if keep_pipelines:
                pipe = TrainedPipeline(front.fits, front.pca, k, fits, glms, tuple(tr),
                                       int(seed), mode, tuple(indices.names))
            results[kspec].append(SessionResult(s, tr, va, k, r2, None, pipe))
    return results


def cross_validate(indicators: IndicatorMatrix, indices: OfficialIndices, sessions: int = 4,
                   train_size: int = 34, seed: int = 0, k_mode: KMode = KMode(),
                   split_mode: str = "random", refit_per_session: bool = True,
                   keep_pipelines: bool = False) -> CrossValReport:
    """Repeated random subsampling: refit the whole chain per session, score R^2 on both sets."""
    regions = _shared_regions(indicators, indices)
    splits = make_splits(regions, sessions, train_size, seed, split_mode)
    res = _run_sessions(indicators, indices, splits, [k_mode], seed,
                        refit_per_session, keep_pipelines)[k_mode]
    if all(s.failed for s in res):
        raise PipelineError("every cross-validation session failed")
    return CrossValReport(res, seed, tuple(indices.names))


@dataclass
class SweepResult:
    ks: list[int]
    reports: list[CrossValReport]

    def curve(self, name: str) -> np.ndarray:
        """(len(ks), 6) session-averaged R^2 for one field."""
        return np.array([r.mean(name) for r in self.reports])

    def to_csv(self, path_or_fh, comments: Sequence[str] = ()) -> None:
        names = self.reports[0].index_names if self.reports else INDEX_NAMES
        header = ("k", *(f"mean_{f}" for f in R2_FIELDS),
                  *(f"{n}_{f}" for n in names for f in ("r2_train_orig", "r2_val_orig")))
        rows = []
        for i, k in enumerate(self.ks):
            rep = self.reports[i]
            row: list[object] = [k]
            for f in R2_FIELDS:
                v = rep.mean(f)
                row.append(float(np.nanmean(v)) if np.any(~np.isnan(v)) else "")
            for j in range(len(names)):
                for f in ("r2_train_orig", "r2_val_orig"):
                    v = rep.mean(f)[j]
                    row.append("" if np.isnan(v) else float(v))
            rows.append(row)
        _io.write_table(path_or_fh, header, rows, comments)


def component_sweep(indicators: IndicatorMatrix, indices: OfficialIndices,
                    k_range: Iterable[int], sessions: int = 4, train_size: int = 34,
                    seed: int = 0, split_mode: str = "random",
                    refit_per_session: bool = True) -> SweepResult:
    """Cross-validated R^2 as a function of the number of components."""
    ks = [int(k) for k in k_range]
    if not ks or min(ks) < 1:
        raise ValueError("k values must be at least 1")
    regions = _shared_regions(indicators, indices)
    if max(ks) > len(INDICATOR_NAMES):
        raise ValueError(f"k cannot exceed {len(INDICATOR_NAMES)}")
    splits = make_splits(regions, sessions, train_size, seed, split_mode)
    res = _run_sessions(indicators, indices, splits, ks, seed, refit_per_session)
    return SweepResult(ks, [CrossValReport(res[k], seed, tuple(indices.names)) for k in ks])


@dataclass
class CorrelationTable:
    values: np.ndarray  # (k, 6)
    index_names: tuple[str, ...] = INDEX_NAMES
    threshold: float = CORRELATION_FLAG

    @property
    def flagged(self) -> np.ndarray:
        return np.abs(self.values) > self.threshold

    def to_csv(self, path_or_fh, comments: Sequence[str] = ()) -> None:
        header = ("pc", *self.index_names, "flagged")
        rows = []
        for i, row in enumerate(self.values):
            flags = " ".join(n for n, f in zip(self.index_names, self.flagged[i]) if f)
            rows.append([i + 1, *map(float, row), flags])
        _io.write_table(path_or_fh, header, rows, comments)


def pc_index_correlations(pipeline: TrainedPipeline, indicators: IndicatorMatrix,
                          indices: OfficialIndices) -> CorrelationTable:
    """Pearson correlation of each retained component score with each normalized index."""
    regions = _shared_regions(indicators, indices)
    X, Y = _check_inputs(indicators, indices, regions)
    scores = _front_scores(_Front(pipeline.indicator_fits, pipeline.pca), X, pipeline.k)
    Y_norm = np.column_stack([to_quantile_lenient(Y[:, j], d)
                              for j, d in enumerate(pipeline.index_fits)])
    return CorrelationTable(cross_correlation(scores, Y_norm), tuple(indices.names))


def pca_report_rows(model: PCAModel) -> list[list[object]]:
    """Rows for the explained-variance report: component, fraction, cumulative fraction."""
    cum = model.cumulative_fraction()
    return [[i + 1, float(model.eigenvalues[i]), float(model.explained_fraction[i]), float(cum[i])]
            for i in range(model.n_components)]
