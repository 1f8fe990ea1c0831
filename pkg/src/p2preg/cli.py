"""Command-line entry point: ``p2preg gen | register | eval | bench``.

Exit codes: 0 when everything produced a result, 1 when some samples
failed to register (failures are recorded, not fatal), 2 for configuration
or input errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import fileio
from .benchgen import SampleSpec, build_sample, suite_specs
from .config import CONFIG_ENV, ConfigError, ExperimentConfig, MethodSpec, load_config
from .descriptors import OracleNoiseSpec, oracle_descriptor
from .errors import ParameterError, RegistrationError
from .evaluation import (
    VISIBILITY_EDGES,
    EvalRecord,
    assign_bin,
    bin_report,
    bin_rows_csv,
    paired_csv,
    paired_rows,
    success_csv,
    success_curve,
)
from .pipeline import evaluate, prepare, run_method

log = logging.getLogger("p2preg")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
FEATURE_FILES = ("features_source.bin", "features_target.bin")


def _pool_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map; ``workers <= 1`` runs in-process."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------------- gen

def _gen_one(job: tuple[dict, str, dict | None]) -> str:
    spec_d, directory, oracle = job
    sample = build_sample(SampleSpec.from_dict(spec_d))
    fileio.write_sample(directory, sample)
    if oracle is not None:
        fs, ft = oracle_descriptor(sample, OracleNoiseSpec(**oracle))
        fileio.write_features(Path(directory) / FEATURE_FILES[0], fs)
        fileio.write_features(Path(directory) / FEATURE_FILES[1], ft)
    return sample.sample_id


def generate_suite(cfg: ExperimentConfig, out: Path, workers: int = 1, dry_run: bool = False,
                   cache_features: bool = False) -> dict[str, Any]:
    specs = list(suite_specs(cfg.suite))
    out.mkdir(parents=True, exist_ok=True)
    index = fileio.suite_index(cfg.suite, specs, built=not dry_run)
    if not dry_run:
        oracle = asdict(cfg.descriptor.oracle) if cache_features else None
        jobs = [(s.to_dict(), str(out / "samples" / s.sample_id), oracle) for s in specs]
        _pool_map(_gen_one, jobs, workers)
    fileio.write_json(out / "index.json", index)
    return index


# ----------------------------------------------------------------- register

def _register_one(job: tuple[str, dict, dict, bool]) -> dict[str, Any]:
    sample_dir, method_d, cfg_d, deterministic = job
    cfg = ExperimentConfig.from_dict(cfg_d)
    spec = MethodSpec.from_dict(method_d)
    sample = fileio.read_sample(Path(sample_dir) / "sample.json")
    spec = spec.with_seed(cfg.sample_seed(f"{sample.sample_id}:{spec.params.get('seed', 0)}"))
    features = None
    if cfg.descriptor.kind == "cached":
        paths = [Path(sample_dir) / f for f in FEATURE_FILES]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ConfigError(f"missing feature cache: {', '.join(missing)}; run gen --cache-features")
        features = (fileio.read_features(paths[0]), fileio.read_features(paths[1]))
    pair = prepare(sample, cfg.voxel_size, cfg.descriptor, features)
    result = run_method(pair, spec.method, **spec.run_kwargs())
    record = evaluate(pair, result)
    return result_document(record, result, spec, deterministic)


def _strip_timing(d: Any) -> Any:
    if isinstance(d, dict):
        return {k: _strip_timing(v) for k, v in d.items() if k != "timing"}
    if isinstance(d, list):
        return [_strip_timing(v) for v in d]
    return d


def result_document(record: EvalRecord, result, spec: MethodSpec, deterministic: bool) -> dict[str, Any]:
    """Serializable per-sample result; ``deterministic`` drops wall-clock fields."""
    doc = {
        "sample_id": record.sample_id,
        "method": spec.name,
        "registrar": spec.method,
        "failed": record.failed,
        "error": result.error,
        "rms_tre": record.rms_tre,
        "visibility": record.visibility,
        "noise_level": record.noise_level,
        "deformation_rms": record.deformation_rms,
        "transform": None if result.failed else fileio.transform_to_json(result.transform),
        "transform_normalized": None if result.failed else fileio.transform_to_json(result.transform_normalized),
        "diagnostics": result.diagnostics,
    }
    if deterministic:
        doc["diagnostics"] = _strip_timing(doc["diagnostics"])
    else:
        doc["runtime_s"] = record.runtime
    return doc


def record_from_document(doc: dict[str, Any]) -> EvalRecord:
    return EvalRecord(
        sample_id=doc["sample_id"],
        method=doc["method"],
        rms_tre=doc.get("rms_tre"),
        runtime=doc.get("runtime_s"),
        visibility=float(doc["visibility"]),
        noise_level=float(doc.get("noise_level", 0.0)),
        deformation_rms=float(doc.get("deformation_rms", 0.0)),
        failed=bool(doc.get("failed", False)),
        diagnostics=doc.get("diagnostics", {}),
    )


def _sample_dirs(suite: Path, sample_ids: Iterable[str] | None) -> list[Path]:
    index = fileio.read_suite(suite)
    if not index.get("built", True):
        raise ConfigError(f"suite at {suite} was generated with --dry-run; rerun gen without it")
    known = [s["sample_id"] for s in index["samples"]]
    if sample_ids is not None:
        unknown = sorted(set(sample_ids) - set(known))
        if unknown:
            raise ConfigError(f"unknown sample id(s): {', '.join(unknown)}")
        known = [k for k in known if k in set(sample_ids)]
    return [suite / "samples" / sid for sid in known]


def register(cfg: ExperimentConfig, suite: Path, methods: Sequence[MethodSpec], out: Path,
             sample_ids: Iterable[str] | None = None, workers: int = 1,
             deterministic: bool = False) -> tuple[int, int]:
    """Register the chosen samples with every method; returns (results, failures)."""
    dirs = _sample_dirs(suite, sample_ids)
    cfg_d = cfg.to_dict()
    n_res = n_fail = 0
    for spec in methods:
        jobs = [(str(d), spec.to_dict(), cfg_d, deterministic) for d in dirs]
        docs = _pool_map(_register_one, jobs, workers)
        mdir = out / spec.name
        mdir.mkdir(parents=True, exist_ok=True)
        for doc in docs:
            fileio.write_json(mdir / f"{doc['sample_id']}.json", doc)
            n_res += 1
            n_fail += int(doc["failed"])
        log.info("%s: %d samples, %d failed", spec.name, len(docs), sum(d["failed"] for d in docs))
    return n_res, n_fail


# --------------------------------------------------------------------- eval

def load_results(results: Path) -> list[EvalRecord]:
    files = sorted(results.glob("*/*.json"))
    if not files:
        raise ConfigError(f"no result files under {results}")
    return [record_from_document(fileio.read_json(f)) for f in files]


def _pair_methods(methods: list[str]) -> tuple[str, str] | None:
    if "baseline" in methods and "p2p" in methods:
        return "baseline", "p2p"
    return (methods[0], methods[1]) if len(methods) >= 2 else None


def write_reports(records: Sequence[EvalRecord], out: Path, plots: bool = False) -> list[Path]:
    """Binned tables, success curves and the paired comparison; optional figures."""
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: (r.method, r.sample_id))
    methods = list(dict.fromkeys(r.method for r in records))
    written = []

    rows = bin_report(records, VISIBILITY_EDGES)
    (out / "bins.csv").write_text(bin_rows_csv(rows), encoding="utf-8")
    fileio.write_json(out / "bins.json", {
        "edges": list(VISIBILITY_EDGES),
        "bins": [vars(r) for r in rows],
        "samples": [{k: v for k, v in r.to_dict().items() if k != "diagnostics"} for r in records],
    })
    written += [out / "bins.csv", out / "bins.json"]

    curves, low = {}, {}
    for m in methods:
        ok = [r for r in records if r.method == m and not r.failed]
        if ok:
            curves[m] = success_curve([r.rms_tre for r in ok])
        lo = [r.rms_tre for r in ok if assign_bin(r.visibility, VISIBILITY_EDGES) == 0]
        if lo:
            low[m] = success_curve(lo)
    (out / "success.csv").write_text(success_csv(curves), encoding="utf-8")
    (out / "success_low_visibility.csv").write_text(success_csv(low), encoding="utf-8")
    written += [out / "success.csv", out / "success_low_visibility.csv"]

    pair = _pair_methods(methods)
    if pair is not None:
        (out / "paired.csv").write_text(paired_csv(paired_rows(records, *pair)), encoding="utf-8")
        written.append(out / "paired.csv")

    if plots:
        from .plotting import plot_bins, plot_success
        written.append(plot_success(curves, out / "success.png"))
        if low:
            written.append(plot_success(low, out / "success_low_visibility.png",
                                        title="Success rate, visibility [0.2,0.3)"))
        written.append(plot_bins(rows, out / "bins.png"))
    return written


# ---------------------------------------------------------------------- CLI

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"JSON experiment configuration (default: ${CONFIG_ENV}, else built-in defaults)")
    p.add_argument("--seed", type=int, help="global seed; overrides the configuration")
    p.add_argument("--out", help="output directory; overrides the configuration")
    p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on this)")
    p.add_argument("-v", "--verbose", action="store_true")


def _register_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", action="append",
                   help="method name from the configuration or a registrar; repeatable (default: all configured)")
    p.add_argument("--init", choices=("identity", "ground-truth"), help="ICP initialization")
    p.add_argument("--deterministic", action="store_true",
                   help="omit wall-clock fields so repeated runs produce identical files")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="p2preg", description="Complete-to-partial point cloud registration experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic benchmark suite")
    _common(g)
    g.add_argument("--dry-run", action="store_true", help="write the suite index only")
    g.add_argument("--cache-features", action="store_true", help="also write oracle feature caches")

    r = sub.add_parser("register", help="register suite samples")
    _common(r)
    _register_args(r)
    r.add_argument("--suite", help="suite directory (default: configuration suite_path or OUT/suite)")
    which = r.add_mutually_exclusive_group()
    which.add_argument("--sample", action="append", help="sample id; repeatable")
    which.add_argument("--all", action="store_true", help="every sample in the suite (default)")

    e = sub.add_parser("eval", help="aggregate results into reports")
    _common(e)
    e.add_argument("--results", help="results directory (default: OUT/results)")
    e.add_argument("--plots", action="store_true", help="also render PNG figures (needs matplotlib)")

    b = sub.add_parser("bench", help="gen, register and eval in one go")
    _common(b)
    _register_args(b)
    b.add_argument("--dry-run", action="store_true", help="print the plan without running it")
    b.add_argument("--plots", action="store_true", help="also render PNG figures (needs matplotlib)")
    return ap


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    return cfg


def _methods(cfg: ExperimentConfig, args) -> list[MethodSpec]:
    specs = [cfg.method(n) for n in args.method] if args.method else list(cfg.methods)
    if args.init is not None:
        specs = [replace(s, params={**s.params, "init": args.init}) if s.method == "icp" else s for s in specs]
        specs = [MethodSpec.from_dict(s.to_dict()) for s in specs]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"method names must be unique: {names}")
    return specs


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        out = Path(cfg.out)
        if args.command == "gen":
            suite = Path(args.out) if args.out else cfg.resolved_suite_path()
            index = generate_suite(cfg, suite, args.workers, args.dry_run, args.cache_features)
            print(f"{len(index['samples'])} samples -> {suite}{' (index only)' if args.dry_run else ''}")
            return EXIT_OK
        if args.command == "register":
            suite = Path(args.suite) if args.suite else cfg.resolved_suite_path()
            n, failed = register(cfg, suite, _methods(cfg, args), out / "results",
                                 args.sample, args.workers, args.deterministic)
            print(f"{n} results, {failed} failed -> {out / 'results'}")
            return EXIT_PARTIAL if failed else EXIT_OK
        if args.command == "eval":
            results = Path(args.results) if args.results else out / "results"
            records = load_results(results)
            written = write_reports(records, out / "reports", args.plots)
            print("\n".join(str(p) for p in written))
            return EXIT_PARTIAL if any(r.failed for r in records) else EXIT_OK
        # bench
        methods = _methods(cfg, args)
        suite = cfg.resolved_suite_path()
        if args.dry_run:
            print(f"suite: {cfg.suite.size} samples -> {suite}")
            print(f"methods: {', '.join(m.name for m in methods)}")
            print(f"reports -> {out / 'reports'}")
            return EXIT_OK
        t0 = time.perf_counter()
        generate_suite(cfg, suite, args.workers, cache_features=cfg.descriptor.kind == "cached")
        _, failed = register(cfg, suite, methods, out / "results", None, args.workers, args.deterministic)
        written = write_reports(load_results(out / "results"), out / "reports", args.plots)
        print("\n".join(str(p) for p in written))
        log.info("bench finished in %.1f s", time.perf_counter() - t0)
        return EXIT_PARTIAL if failed else EXIT_OK
    except (ConfigError, ParameterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RegistrationError as exc:
        print(f"registration error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
