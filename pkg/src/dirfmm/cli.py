"""Command-line interface.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 transport
failure.  Failures print a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .core import ProblemConfig
from .errors import ConfigError, DirFMMError
from .geometry import make_cloud
from .octree import build_octree
from .oracle import DEFAULT_SAMPLE, error_details
from .partition import check_worker_count
from .pipeline import solve
from .precompute import load_cache, precompute, save_cache
from .report import RunReport, TABLE_COLUMNS, validate_report


def _p_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad worker list {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("worker counts must be positive")
    return out


def _config(args) -> ProblemConfig:
    return ProblemConfig.from_K(args.K, epsilon=args.epsilon, seed=args.seed,
                                leaf_capacity=args.leaf_capacity)


def _load_cache(path, seed):
    if path is None:
        return None
    if not Path(path).is_file():
        raise ConfigError(f"cache file {path!r} not found")
    return load_cache(path)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_precompute(args) -> int:
    level_K = ProblemConfig.from_K(args.K, epsilon=args.epsilon, seed=args.seed)
    cache = precompute(level_K.K, args.epsilon, args.seed, lowfreq_depth=args.lf_depth)
    size = save_cache(cache, args.out)
    out = {"cache": str(args.out), "bytes": size, "K": cache.K, "epsilon": cache.epsilon,
           "separation_ranks": {repr(w): r for w, r in cache.rank_table().items()}}
    if args.verify:
        cert = cache.verify()
        bound = 100 * cache.epsilon
        out["certificates"] = cert
        out["certificates_pass"] = all(v <= bound for v in cert.values())
    _emit(out)
    return 0 if out.get("certificates_pass", True) else 3


def cmd_run(args) -> int:
    cfg = _config(args)
    cloud = make_cloud(args.geometry, cfg.K, args.ppw, cfg.seed)
    cache = _load_cache(args.cache, cfg.seed)
    mode = args.mode
    u, report, tree, cache, partition = solve(cloud, cfg, cache, p=args.p, mode=mode)
    report.config.update(geometry=args.geometry, ppw=args.ppw)
    if args.report:
        pot_path = Path(args.report).with_suffix(".potentials.npy")
        np.save(pot_path, u)
        report.extra["potentials_file"] = pot_path.name
    if args.partition_dump and partition is not None:
        Path(args.partition_dump).write_text(partition.to_json())
    if args.validate:
        det = error_details(u, cloud, args.validate, cfg.seed)
        report.relative_error = det["error"]
        report.validation = det
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text)
    else:
        print(text)
    return 0


def cmd_validate(args) -> int:
    path = Path(args.run_report)
    if not path.is_file():
        raise ConfigError(f"report {path} not found")
    d = json.loads(path.read_text())
    validate_report(d)
    c = d["config"]
    if "geometry" not in c or "potentials_file" not in d:
        raise ConfigError("report lacks geometry or potentials file; re-run with --report")
    cloud = make_cloud(c["geometry"], c["K"], c["ppw"], c["seed"])
    u = np.load(path.parent / d["potentials_file"])
    if len(u) != len(cloud):
        raise ConfigError("stored potentials do not match the regenerated point cloud")
    det = error_details(u, cloud, args.sample, args.seed)
    d["relative_error"] = det["error"]
    d["validation"] = det
    validate_report(d)
    path.write_text(json.dumps(d, indent=2, sort_keys=True))
    _emit(det)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    cloud = make_cloud(args.geometry, cfg.K, args.ppw, cfg.seed)
    tree = build_octree(cloud, cfg)
    check_worker_count(tree, max(args.p_list))
    cache = _load_cache(args.cache, cfg.seed)
    rows = []
    for p in args.p_list:
        for rep in range(args.repeats):
            _, report, tree, cache, _ = solve(cloud, cfg, cache, p=p, mode=args.mode, tree=tree)
            rows.append({"p": p, "repeat": rep, **report.table_row()})
    p_min = min(args.p_list)
    base = statistics.mean(r["total"] for r in rows if r["p"] == p_min)
    for r in rows:
        r["efficiency"] = base * p_min / (r["total"] * r["p"]) if r["total"] > 0 else 0.0
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        fields = ["p", "repeat", "lf_m2m", *TABLE_COLUMNS, "efficiency"]
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if args.out:
            out.close()
    return 0


def cmd_info(args) -> int:
    cfg = ProblemConfig.from_K(args.K, seed=args.seed, leaf_capacity=args.leaf_capacity)
    cloud = make_cloud(args.geometry, cfg.K, args.ppw, cfg.seed)
    tree = build_octree(cloud, cfg)
    _emit({"geometry": args.geometry, "K": cfg.K, "N": len(cloud),
           "partition_level": tree.partition_level,
           "partition_width": tree.width(tree.partition_level),
           "nonempty_partition_boxes": len(tree.levels[tree.partition_level]),
           "total_partition_boxes": 8 ** tree.partition_level,
           "boxes_per_level": [len(lvl) for lvl in tree.levels]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dirfmm", description="Parallel directional FMM for the "
                                 "3-D Helmholtz kernel.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, geometry=True):
        sp.add_argument("--K", type=int, required=True, help="domain width in wavelengths (4**L)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--leaf-capacity", type=int, default=40)
        if geometry:
            sp.add_argument("--geometry", default="sphere", help="sphere | obj:<path>")
            sp.add_argument("--ppw", type=float, default=10.0, help="points per wavelength")

    sp = sub.add_parser("precompute", help="build and save translation data")
    common(sp, geometry=False)
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lf-depth", type=int, default=3,
                    help="low-frequency levels below width 1 to include")
    sp.add_argument("--verify", action="store_true", help="run held-out accuracy certificates")
    sp.set_defaults(func=cmd_precompute)

    sp = sub.add_parser("run", help="evaluate potentials and write a report")
    common(sp)
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--p", type=int, default=1)
    sp.add_argument("--mode", choices=("seq", "threads", "sockets"), default="seq")
    sp.add_argument("--cache")
    sp.add_argument("--report")
    sp.add_argument("--partition-dump")
    sp.add_argument("--validate", type=int, metavar="SAMPLE",
                    help="spot-check this many targets against direct summation")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("validate", help="spot-check a finished run against direct summation")
    sp.add_argument("--run-report", required=True)
    sp.add_argument("--sample", type=int, default=DEFAULT_SAMPLE)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("bench", help="strong-scaling table as CSV")
    common(sp)
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--p-list", type=_p_list, default=[1, 2, 4, 8])
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--mode", choices=("threads", "sockets"), default="threads")
    sp.add_argument("--cache")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("info", help="partition-level occupancy of a geometry")
    common(sp)
    sp.set_defaults(func=cmd_info)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DirFMMError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": 2}
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
