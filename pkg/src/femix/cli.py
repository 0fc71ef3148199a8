"""``femix`` command line: property suites, truncation table, toy training, timing bands, golden vectors.

Exit codes: 0 success, 1 a suite/band/run failed, 2 usage or config error.
Every command writes ``<out-dir>/<command>-manifest.json``.  Options can come
from a flat JSON ``--config`` file or from ``FEMIX_*`` environment variables
(``FEMIX_SEED``, ``FEMIX_OUT_DIR``, ``FEMIX_CONFIG``, ``FEMIX_DETERMINISTIC``);
explicit flags win over both.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

ENV_PREFIX = "FEMIX_"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_flag(name: str) -> bool:
    return str(_env(name, "")).lower() in ("1", "true", "yes", "on")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(params: dict) -> str:
    """Content hash over sorted tensor names, shapes, dtypes and raw bytes."""
    h = hashlib.sha256()
    for k in sorted(params):
        a = np.ascontiguousarray(params[k])
        h.update(f"{k}:{a.shape}:{a.dtype.str};".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, content_hash: str | None, started: str, artifacts: list, extra=None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "content_hash": content_hash,
        "started": started,
        "finished": _now(),
        "artifacts": [str(a) for a in artifacts],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"{command}-manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ----------------------------------------------------------------------------
# commands


def cmd_check(args, out_dir: Path) -> tuple[int, dict]:
    from .checks import run_suites, select

    names = select(args.filter)
    if not names:
        raise ConfigError(f"no suite matches {args.filter!r}")
    reports = run_suites(args.filter, args.seed, fault=args.inject_fault, n=args.n)
    path = out_dir / "check-report.jsonl"
    path.write_text("".join(r.to_json() + "\n" for r in reports))
    width = max(len(r.op) for r in reports)
    print(f"{'status':6}  {'check':{width}}  {'max_abs_err':>11}  {'max_rel_err':>11}  {'tol':>8}")
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL':6}  {r.op:{width}}  {r.max_abs_err:11.3e}  {r.max_rel_err:11.3e}  {r.tol:8.2g}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(names)} suites, {len(reports)} checks, {failed} failed")
    return (EXIT_FAIL if failed else EXIT_OK), {"artifacts": [path], "hash": sha256_file(path), "extra": {"suites": names, "failed": failed}}


def degree_table():
    from .checks import TRUNCATION_EPS
    from .fem_read import min_truncation_degree

    rows = []
    for R in (5, 10):
        for eps in TRUNCATION_EPS:
            safety = eps * float(np.exp(R))
            rows.append({"R": R, "eps": eps, "N": min_truncation_degree(R, eps), "eps_exp_R": safety, "safe": safety <= 0.5})
    return rows


def cmd_table_degrees(args, out_dir: Path) -> tuple[int, dict]:
    t0 = time.perf_counter()
    rows = degree_table()
    elapsed = time.perf_counter() - t0
    eps_list = sorted({r["eps"] for r in rows}, reverse=True)
    print("R    " + "  ".join(f"eps={e:<8g}" for e in eps_list))
    for R in (5, 10):
        cells = [r for r in rows if r["R"] == R]
        print(f"{R:<4} " + "  ".join(f"N={c['N']:<2d} {'ok' if c['safe'] else '!!':<7}" for c in cells))
    print("ok: eps * e^R <= 1/2")
    path = out_dir / "table-degrees.csv"
    with open(path, "w") as fh:
        fh.write("R,eps,N,eps_exp_R,safe\n")
        for r in rows:
            fh.write(f"{r['R']},{r['eps']:g},{r['N']},{r['eps_exp_R']:.6g},{str(r['safe']).lower()}\n")
    return EXIT_OK, {"artifacts": [path], "hash": sha256_file(path), "extra": {"seconds": elapsed}}


def cmd_train_toy(args, out_dir: Path) -> tuple[int, dict]:
    from .trainer import TrainingDiverged, load_train_config, train_config_from_dict, train_toy

    try:
        if args.config:
            task, train, models = load_train_config(args.config, args.seed)
        else:
            task, train, models = train_config_from_dict({"preset": args.preset}, args.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.model != "both" and not args.config:
        models = [args.model]
    artifacts, hashes, finals = [], {}, {}
    status = EXIT_OK
    for m in models:
        csv_path = out_dir / f"metrics-{m}.csv"
        cfg = dataclasses.replace(train, model=m)
        log = (lambda row, m=m: print(f"[{m}] step {row['step']:>5}  val_mse {row['val_mse']:.5f}  index_acc {row['index_accuracy']:.4f}", flush=True)) if args.verbose else None
        try:
            res = train_toy(m, task, cfg, csv_path=csv_path, log=log)
        except TrainingDiverged as exc:
            print(f"{m}: {exc}", file=sys.stderr)
            status = EXIT_FAIL
            continue
        artifacts.append(csv_path)
        hashes[m] = params_hash(res.mixer.params)
        finals[m] = res.summary()
        print(f"{m}: final index accuracy {res.final_index_accuracy:.4f}  val_mse {res.final_val_mse:.5f}  params {res.param_count}  ({res.seconds:.1f}s)")
    content = hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest()
    return status, {
        "artifacts": artifacts,
        "hash": content,
        "config": {"task": task.to_dict(), "train": train.to_dict(), "models": models},
        "extra": {"param_hashes": hashes, "final": finals},
    }


def cmd_bench(args, out_dir: Path) -> tuple[int, dict]:
    from .bench import DENSE_BAND, STREAM_BAND, run_bench

    try:
        rows = run_bench(args.family, args.T, repeats=args.repeats, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = out_dir / "bench.csv"
    cols = list(rows[0].to_dict())
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)) for v in r.to_dict().values()) + "\n")
    print(f"{'family':8} {'path':9} {'lse':5} {'T':>6} {'seconds':>10} {'ratio':>6}  band")
    for r in rows:
        ratio = "" if r.ratio is None else f"{r.ratio:6.2f}"
        mark = "" if r.in_band is None else ("ok" if r.in_band else "OUT")
        print(f"{r.family:8} {r.path:9} {str(r.lse):5} {r.T:>6} {r.seconds:10.4f} {ratio:>6}  [{r.band_lo}, {r.band_hi}] {mark}")
    bad = [r for r in rows if r.in_band is False]
    return (EXIT_FAIL if bad else EXIT_OK), {
        "artifacts": [path],
        "hash": sha256_file(path),
        "extra": {"bands": {"streaming": STREAM_BAND, "dense": DENSE_BAND}, "out_of_band": len(bad)},
    }


def cmd_export_golden(args, out_dir: Path) -> tuple[int, dict]:
    from .golden import golden_cases, write_golden

    path = out_dir / "golden.csv"
    n = write_golden(path, golden_cases(args.seed, args.cases))
    print(f"wrote {n} arrays to {path}")
    return EXIT_OK, {"artifacts": [path], "hash": sha256_file(path)}


COMMANDS = {
    "check": cmd_check,
    "table-degrees": cmd_table_degrees,
    "train-toy": cmd_train_toy,
    "bench": cmd_bench,
    "export-golden": cmd_export_golden,
}


# ----------------------------------------------------------------------------
# parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (env FEMIX_SEED, default 0)")
    common.add_argument("--config", default=None, help="flat JSON config (env FEMIX_CONFIG)")
    common.add_argument("--deterministic", action="store_true", default=None, help="single-threaded BLAS (env FEMIX_DETERMINISTIC)")
    common.add_argument("--out-dir", default=None, help="artifact directory (env FEMIX_OUT_DIR, default ./femix-out)")

    parser = argparse.ArgumentParser(prog="femix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", parents=[common], help="run oracle and property suites")
    p.add_argument("filter", nargs="?", default="", help="substring of suite names, e.g. fem_read")
    p.add_argument("--n", type=int, default=None, help="instances per suite (default: per-suite)")
    p.add_argument("--inject-fault", action="store_true", help="flip analytic gradient signs; gradient suites must fail")

    sub.add_parser("table-degrees", parents=[common], help="minimal exp-series truncation degrees")

    p = sub.add_parser("train-toy", parents=[common], help="channel-wise argmax toy experiment")
    p.add_argument("--model", choices=("fem", "softmax", "both"), default="both")
    p.add_argument("--preset", choices=("full", "ci"), default="full")
    p.add_argument("--verbose", action="store_true", help="print every evaluation")

    p = sub.add_parser("bench", parents=[common], help="dense vs streaming scaling bands")
    p.add_argument("--family", nargs="+", default=["softmax", "gla", "decay", "aft", "ssm"], choices=("softmax", "gla", "decay", "aft", "ssm"))
    p.add_argument("--T", nargs="+", type=int, default=[1024, 2048, 4096])
    p.add_argument("--repeats", type=int, default=7)

    p = sub.add_parser("export-golden", parents=[common], help="write golden CSV vectors")
    p.add_argument("--cases", type=int, default=4)
    return parser


def _apply_config(parser, args, argv):
    """Fill options from a flat JSON config for commands other than train-toy (which has its own schema)."""
    if not args.config or args.command == "train-toy":
        return args
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {args.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = set(vars(args)) - {"command", "config"}
    unknown = sorted(set(k.replace("-", "_") for k in raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in raw.items()})
    new = parser.parse_args(argv)  # explicit flags still win over config values
    new.config = args.config
    return new


def resolve(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config is None:
        args.config = _env("CONFIG")
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    args = _apply_config(parser, args, argv)
    if args.seed is None:
        try:
            args.seed = int(_env("SEED", 0))
        except ValueError as exc:
            raise ConfigError("FEMIX_SEED must be an integer") from exc
    if args.deterministic is None:
        args.deterministic = _env_flag("DETERMINISTIC")
    if args.out_dir is None:
        args.out_dir = _env("OUT_DIR", "femix-out")
    return args


def main(argv=None) -> int:
    started = _now()
    try:
        args = resolve(argv)
    except ConfigError as exc:
        print(f"femix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        with _single_thread(args.deterministic):
            status, info = COMMANDS[args.command](args, out_dir)
    except ConfigError as exc:
        print(f"femix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    config = info.get("config") or {k: v for k, v in vars(args).items() if k != "command"}
    manifest = write_manifest(out_dir, args.command, config, args.seed, info.get("hash"), started, info["artifacts"], {**info.get("extra", {}), "exit_code": status, "deterministic": args.deterministic})
    print(f"manifest: {manifest}")
    return status


if __name__ == "__main__":
    sys.exit(main())
