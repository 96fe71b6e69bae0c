"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 fatal parse or I/O failure, 2 invalid input or
options (including missing files). Errors are also written to standard error
as one JSON object.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, _io

log = logging.getLogger("cardecon")

EXIT_OK, EXIT_PARSE, EXIT_INVALID = 0, 1, 2

# options that do not change any output byte
_NOT_HASHED = {"func", "command", "threads", "log_level", "out", "out_dir", "summary"}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, path: str | None = None):
        super().__init__(message)
        self.code, self.kind, self.path = code, kind, path


def _require(path: str | None, label: str) -> str:
    if not path:
        raise CliError(EXIT_INVALID, "missing_option", f"--{label} is required", None)
    if not Path(path).is_file():
        raise CliError(EXIT_INVALID, "missing_file", f"{label} file not found: {path}", path)
    return path


# options naming input files; hashed by content so relocating a file keeps the hash
_PATH_OPTIONS = {"transactions", "regions", "bundles", "indicators", "indices", "pipeline",
                 "config", "train_regions", "predict_regions"}


def config_hash(args: argparse.Namespace) -> str:
    items = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_HASHED:
            continue
        if k in _PATH_OPTIONS and isinstance(v, str) and Path(v).is_file():
            v = "sha256=" + _io.file_sha256(v)
        items[k] = v
    blob = json.dumps(items, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _provenance(args, inputs: dict[str, str]) -> list[str]:
    return _io.provenance_lines(getattr(args, "seed", None), inputs,
                                {"command": args.command, "config_sha256": config_hash(args)})


def _k_mode(args):
    from .pipeline import KMode
    if args.variance is not None:
        return KMode.variance(args.variance)
    return KMode.fixed(args.k)


def _region_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    if Path(text).is_file():
        _, rows, _ = _io.read_table(text)
        return [r[0].strip() for r in rows]
    return [s.strip() for s in text.split(",") if s.strip()]


def _load_matrix(path):
    from .indicators import IndicatorMatrix
    return IndicatorMatrix.from_csv(_require(path, "indicators"))


def _load_indices(path):
    from .pipeline import OfficialIndices
    return OfficialIndices.from_csv(_require(path, "indices"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    from .indicators import compute_indicators, load_bundle_mapping
    from .ingest import load_region_table, aggregate_file

    tx = _require(args.transactions, "transactions")
    rt = _require(args.regions, "regions")
    inputs = {"transactions": tx, "regions": rt}
    if args.bundles:
        inputs["bundles"] = _require(args.bundles, "bundles")
    mapping = load_bundle_mapping(args.bundles) if args.bundles else None
    regions, external = load_region_table(rt)
    t0 = time.perf_counter()
    res = aggregate_file(tx, regions, external, threads=args.threads)
    matrix = compute_indicators(res.aggregates, res.merchants, res.regions, mapping)
    elapsed = time.perf_counter() - t0

    prov = _provenance(args, inputs)
    rejects = [f"rejected {k}: {v}" for k, v in sorted(res.report.rejected.items())]
    counts = [f"rows read: {res.report.rows_read}", f"rows accepted: {res.report.rows_accepted}"]
    matrix.to_csv(args.out, [*prov, *counts, *rejects, *(f"warning: {w}" for w in matrix.warnings)])

    summary = args.summary or str(Path(args.out).with_suffix("")) + ".summary.csv"
    rows = []
    for meta in res.regions:
        a = res.aggregates.get(meta.region_id)
        share = meta.business_market_share
        rows.append([meta.region_id, "" if share is None else float(share),
                     a.in_area.count if a else 0.0, a.in_area.amount if a else 0.0,
                     a.resident.count if a else 0.0, a.resident.amount if a else 0.0,
                     a.active_residents if a else 0, a.active_businesses if a else 0])
    _io.write_table(summary, ("region_id", "business_market_share", "in_area_weighted_count",
                              "in_area_weighted_amount_cents", "resident_weighted_count",
                              "resident_weighted_amount_cents", "active_residents",
                              "active_businesses"), rows, [*prov, *counts, *rejects])

    rate = res.report.rows_read / elapsed if elapsed > 0 else float("inf")
    print(f"rows read {res.report.rows_read}, accepted {res.report.rows_accepted}, "
          f"rejected {res.report.rows_rejected} ({elapsed:.2f} s, {rate:,.0f} rows/s)")
    for line in rejects:
        print("  " + line)
    print(f"wrote {args.out} ({len(matrix.region_ids)} x {matrix.values.shape[1]}) and {summary}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train
    matrix = _load_matrix(args.indicators)
    indices = _load_indices(args.indices)
    pipe = train(matrix, indices, _region_list(args.train_regions), _k_mode(args), args.seed)
    doc = pipe.to_dict()
    doc["provenance"] = _provenance(args, {"indicators": args.indicators, "indices": args.indices})
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    print(f"trained on {len(pipe.training_regions)} regions with k={pipe.k}; wrote {args.out}")
    return EXIT_OK


def _load_pipeline(path):
    from .pipeline import TrainedPipeline
    if not path or not Path(path).is_file():
        raise CliError(EXIT_INVALID, "missing_file", f"pipeline file not found: {path}", path)
    return TrainedPipeline.load(path)


def cmd_predict(args) -> int:
    from .pipeline import predict
    pipe = _load_pipeline(args.pipeline)
    matrix = _load_matrix(args.indicators)
    preds = predict(pipe, matrix, _region_list(args.predict_regions))
    preds.to_csv(args.out, _provenance(args, {"pipeline": args.pipeline, "indicators": args.indicators}))
    for rid, err in sorted(preds.errors.items()):
        print(f"region {rid}: {err}", file=sys.stderr)
    print(f"predicted {len(preds.region_ids)} regions; wrote {args.out}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    from .pipeline import cross_validate
    matrix = _load_matrix(args.indicators)
    indices = _load_indices(args.indices)
    report = cross_validate(matrix, indices, sessions=args.sessions, train_size=args.train_size,
                            seed=args.seed, k_mode=_k_mode(args), split_mode=args.split,
                            refit_per_session=not args.global_fit)
    report.to_csv(args.out, _provenance(args, {"indicators": args.indicators, "indices": args.indices}))
    failed = [s.session for s in report.sessions if s.failed]
    print(f"{len(report.sessions) - len(failed)} of {len(report.sessions)} sessions succeeded")
    for name, tr, va in zip(report.index_names, report.mean("r2_train_orig"), report.mean("r2_val_orig")):
        print(f"  {name:22s} train R2 {tr:7.3f}   validation R2 {va:7.3f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .pipeline import component_sweep
    matrix = _load_matrix(args.indicators)
    indices = _load_indices(args.indices)
    if args.k_min < 1 or args.k_max < args.k_min:
        raise CliError(EXIT_INVALID, "invalid_option", "need 1 <= --k-min <= --k-max")
    sweep = component_sweep(matrix, indices, range(args.k_min, args.k_max + 1),
                            sessions=args.sessions, train_size=args.train_size, seed=args.seed,
                            split_mode=args.split, refit_per_session=not args.global_fit)
    sweep.to_csv(args.out, _provenance(args, {"indicators": args.indicators, "indices": args.indices}))
    print(f"wrote {len(sweep.ks)} rows to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthgen import SynthConfig, generate
    overrides = {}
    if args.config:
        overrides.update(json.loads(Path(_require(args.config, "config")).read_text()))
    for key in ("region_count", "transactions_total", "latent_factors", "target_r2",
                "nonlinearity", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.noise_sd is not None:
        overrides["noise_sd"] = args.noise_sd[0] if len(args.noise_sd) == 1 else tuple(args.noise_sd)
    for key in ("index_params", "category_loadings", "index_loadings", "foreign_category_mix",
                "customer_share_range", "business_share_range", "area_range_km2", "noise_sd"):
        if isinstance(overrides.get(key), list):
            overrides[key] = tuple(tuple(v) if isinstance(v, list) else v for v in overrides[key])
    cfg = SynthConfig(**overrides)
    res = generate(cfg, args.out_dir)
    print(f"wrote {res.region_table_path}, {res.transactions_path}, {res.indices_path}, "
          f"{res.ground_truth_path}")
    r2 = ", ".join(f"{e['name']} {e['theoretical_r2']:.3f}" for e in res.ground_truth["indices"])
    print(f"theoretical R2: {r2}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import pc_index_correlations, pca_report_rows
    pipe = _load_pipeline(args.pipeline)
    matrix = _load_matrix(args.indicators)
    indices = _load_indices(args.indices)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args, {"pipeline": args.pipeline, "indicators": args.indicators,
                              "indices": args.indices})
    table = pc_index_correlations(pipe, matrix, indices)
    table.to_csv(out / "pc_index_correlations.csv", prov)
    _io.write_table(out / "explained_variance.csv",
                    ("component", "eigenvalue", "explained_fraction", "cumulative_fraction"),
                    pca_report_rows(pipe.pca), prov)
    loadings = [[name, *map(float, pipe.pca.components[:pipe.k, i])]
                for i, name in enumerate(matrix.indicator_names)]
    _io.write_table(out / "pc_loadings.csv",
                    ("indicator", *(f"pc{i + 1}" for i in range(pipe.k))), loadings, prov)
    print(f"wrote reports to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_k(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--k", type=int, default=6, help="number of principal components (default 6)")
    g.add_argument("--variance", type=float, default=None, metavar="TAU",
                   help="use the fewest components whose cumulative explained variance reaches TAU")


def _add_cv(p):
    p.add_argument("--sessions", type=int, default=4, help="learning sessions (default 4)")
    p.add_argument("--train-size", type=int, default=34, help="training regions per session (default 34)")
    p.add_argument("--split", choices=("random", "partition"), default="random",
                   help="independent random subsets (default) or disjoint validation blocks")
    p.add_argument("--global-fit", action="store_true",
                   help="fit normalization and PCA once on all regions instead of per session")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardecon",
        description="Regional indicators from card transactions and models of official indices.")
    parser.add_argument("--version", action="version", version=f"cardecon {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="transactions + region table -> 35-indicator matrix")
    p.add_argument("--transactions", required=True, help="transactions CSV")
    p.add_argument("--regions", required=True, help="region table CSV")
    p.add_argument("--bundles", help="category_id,bundle_name mapping (default: shipped table)")
    p.add_argument("--out", required=True, help="indicator matrix CSV to write")
    p.add_argument("--summary", help="aggregate summary CSV (default: <out>.summary.csv)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: available cores); output does not depend on it")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit normalization, PCA and one GLM per index")
    p.add_argument("--indicators", required=True, help="indicator matrix CSV")
    p.add_argument("--indices", required=True, help="official indices CSV")
    p.add_argument("--train-regions", help="comma-separated region ids or a file whose first column lists them")
    p.add_argument("--seed", type=int, default=0)
    _add_k(p)
    p.add_argument("--out", required=True, help="trained pipeline JSON to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="apply a trained pipeline to an indicator matrix")
    p.add_argument("--pipeline", required=True, help="trained pipeline JSON")
    p.add_argument("--indicators", required=True, help="indicator matrix CSV")
    p.add_argument("--predict-regions", help="comma-separated region ids or a file listing them")
    p.add_argument("--out", required=True, help="predictions CSV to write")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("crossval", help="repeated shuffle-and-split evaluation")
    p.add_argument("--indicators", required=True)
    p.add_argument("--indices", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_k(p)
    _add_cv(p)
    p.add_argument("--out", required=True, help="cross-validation report CSV to write")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("sweep", help="cross-validated R^2 as a function of k")
    p.add_argument("--indicators", required=True)
    p.add_argument("--indices", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=16)
    _add_cv(p)
    p.add_argument("--out", required=True, help="curve CSV to write, one row per k")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted indices")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON object of generator settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--regions", dest="region_count", type=int, default=None)
    p.add_argument("--transactions", dest="transactions_total", type=int, default=None)
    p.add_argument("--factors", dest="latent_factors", type=int, default=None)
    p.add_argument("--noise-sd", type=float, nargs="+", default=None,
                   help="noise on the standard normal scale: one value or one per index")
    p.add_argument("--target-r2", type=float, default=None,
                   help="tune per-index noise so the theoretical R^2 equals this value")
    p.add_argument("--nonlinearity", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="PC-index correlations, explained variance and loadings")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--indicators", required=True)
    p.add_argument("--indices", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(code: int, kind: str, message: str, path: str | None = None) -> int:
    err = {"error": kind, "message": message, "exit_code": code}
    if path:
        err["path"] = path
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    from .ingest import IngestError, MissingShareError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        return _fail(EXIT_INVALID, "invalid_option", "--threads must be at least 1")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), exc.path)
    except MissingShareError as exc:
        return _fail(EXIT_INVALID, "validation", str(exc))
    except IngestError as exc:
        return _fail(EXIT_PARSE, "parse", str(exc))
    except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_INVALID, "validation", str(exc))
    except OSError as exc:
        return _fail(EXIT_PARSE, "io", str(exc), getattr(exc, "filename", None))


if __name__ == "__main__":
    sys.exit(main())
