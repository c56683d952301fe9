"""Command-line surface: build factorizations, compare methods at matched
memory, emit spectral statistics, and run linear-scaling timings.

Subcommands: approx, compare, stats, scaling, synth, save, load, matvec.
All experiment output is CSV with a fixed schema; summaries go to stderr.
"""

import argparse
import contextlib
import csv
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import relative_error, spectral_stats
from .baselines import (
    nystrom_kmeans,
    nystrom_leverage,
    nystrom_uniform,
    rks_features,
    truncated_svd_baseline,
)
from .bbf import (
    build_bbf,
    derive_seed,
    estimate_frobenius,
    estimate_ranks,
    fixed_rank_profile,
    load_bbf,
    save_bbf,
    select_k,
)
from .cluster import kcenter_farthest, kmeans
from .data import load_csv, standardize, synth_blobs
from .kernels import GAUSSIAN, KernelAccessor, KernelSpec, kernel_cross

CSV_HEADER = [
    "method",
    "dataset",
    "n",
    "d",
    "kernel",
    "h",
    "param",
    "memory",
    "rel_error",
    "build_s",
    "apply_s",
    "seed",
]
STATS_HEADER = [
    "dataset",
    "n",
    "d",
    "kernel",
    "r",
    "inv_h2",
    "stable_rank",
    "eig_ratio",
    "frob_capture",
    "scaled_leverage",
]

_TAG_DATA = 201
_TAG_TRIAL = 202
_TAG_VEC = 203
_TAG_METHOD = 204


@dataclass
class ExperimentRecord:
    method: str
    dataset: str
    n: int
    d: int
    kernel: str
    h: float
    param: str
    memory: float
    rel_error: object
    build_s: float
    apply_s: float
    seed: int

    def as_row(self):
        rel = (
            self.rel_error
            if isinstance(self.rel_error, str)
            else f"{self.rel_error:.6g}"
        )
        return [
            self.method,
            self.dataset,
            self.n,
            self.d,
            self.kernel,
            f"{self.h:g}",
            self.param,
            f"{self.memory:.0f}",
            rel,
            f"{self.build_s:.6g}",
            f"{self.apply_s:.6g}",
            self.seed,
        ]


def _parse_int_list(text):
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_float_list(text):
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_synth(text):
    kv = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        if not val:
            raise ValueError(f"bad synth spec component {part!r}")
        kv[key.strip()] = val.strip()
    n = int(kv["n"])
    d = int(kv.get("d", 2))
    c = int(kv.get("c", 10))
    s = float(kv.get("s", 0.1))
    return n, d, c, s


def _load_data(args):
    if args.synth and args.data:
        raise ValueError("provide either --data or --synth, not both")
    if args.synth:
        n, d, c, s = _parse_synth(args.synth)
        X = synth_blobs(n, d, c, s, seed=derive_seed(args.seed, _TAG_DATA))
        name = args.dataset_name or f"synth-n{n}-d{d}"
        if args.standardize is True:
            X = standardize(X)
        return X, name
    if args.data:
        if not os.path.exists(args.data):
            raise FileNotFoundError(f"dataset file not found: {args.data}")
        drops = _parse_int_list(args.drop_columns) if args.drop_columns else []
        X = load_csv(args.data, has_header=args.has_header, drop_columns=drops)
        if args.standardize is not False:
            X = standardize(X)
        return X, args.dataset_name or Path(args.data).stem
    raise ValueError("provide a dataset via --data or --synth")


def _write_csv(out, header, rows):
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)


def _build_pipeline(X, spec, args, trial_seed, acc=None):
    """Cluster, pick ranks, and build one factorization; returns it with
    the wall time spent."""
    if acc is None:
        acc = KernelAccessor(X, spec)
    n = X.n
    t0 = time.perf_counter()
    if args.k == "auto":
        kmax = args.kmax or int(math.ceil(math.sqrt(n)))
        kmin = min(args.kmin, kmax)
        _, profile, clustering = select_k(
            X,
            spec,
            args.eps,
            kmin,
            kmax,
            seed=trial_seed,
            r_max=args.rmax,
            oversample=args.oversample,
            partitioner=args.partitioner,
            acc=acc,
        )
    else:
        part = kmeans if args.partitioner == "kmeans" else kcenter_farthest
        clustering = part(X, int(args.k), seed=trial_seed)
        profile = estimate_ranks(
            X,
            spec,
            clustering,
            args.eps,
            r_max=args.rmax,
            seed=trial_seed,
            oversample=args.oversample,
            acc=acc,
        )
    f = build_bbf(
        X,
        spec,
        clustering,
        profile,
        l=args.oversample,
        seed=trial_seed,
        q=args.power_iters,
        acc=acc,
    )
    return f, time.perf_counter() - t0


def _time_apply(apply_fn, n, seed, min_time=0.02, max_reps=1000):
    rng = np.random.default_rng(derive_seed(seed, _TAG_VEC))
    v = rng.standard_normal(n)
    apply_fn(v)  # warm-up
    reps = 0
    t0 = time.perf_counter()
    while True:
        apply_fn(v)
        reps += 1
        dt = time.perf_counter() - t0
        if dt >= min_time or reps >= max_reps:
            return dt / reps


def _measure_error(factor, X, spec, args, seed, K=None):
    n = X.n
    if n <= args.dense_cap:
        if K is None:
            K = kernel_cross(spec, X.points, X.points)
        return relative_error(factor, K, mode="dense", dense_cap=args.dense_cap)
    acc = KernelAccessor(X, spec)
    budget = args.error_budget or 100 * n
    est, _ = relative_error(factor, acc, mode="sampled", budget=budget, seed=seed)
    return est


def _run_trials(trial_fns, parallel):
    """Run the per-trial closures, optionally on a thread pool. Seeds are
    fixed before submission, so results do not depend on scheduling."""
    results = [None] * len(trial_fns)
    if parallel and len(trial_fns) > 1:
        from concurrent.futures import ThreadPoolExecutor

        workers = int(os.environ.get("BBF_THREADS", "0")) or min(
            len(trial_fns), os.cpu_count() or 1
        )
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(fn): t for t, fn in enumerate(trial_fns)}
            for fut, t in futures.items():
                results[t] = fut.result()
    else:
        for t, fn in enumerate(trial_fns):
            results[t] = fn()
    return results


def _summary(records, label):
    errs = [r.rel_error for r in records if not isinstance(r.rel_error, str)]
    if len(errs) > 1:
        mean = float(np.mean(errs))
        std = float(np.std(errs, ddof=1))
        print(
            f"{label}: trials={len(errs)} mean_rel_error={mean:.6g} "
            f"std_rel_error={std:.6g}",
            file=sys.stderr,
        )


def cmd_approx(args):
    X, name = _load_data(args)
    spec = KernelSpec(args.kernel, args.h)
    n = X.n
    K = kernel_cross(spec, X.points, X.points) if n <= args.dense_cap else None
    seeds = [derive_seed(args.seed, _TAG_TRIAL, t) for t in range(args.trials)]
    saved = {}

    def make_trial(t):
        def run():
            f, build_s = _build_pipeline(X, spec, args, seeds[t])
            apply_s = _time_apply(f.apply, n, seeds[t])
            rel = _measure_error(f, X, spec, args, seeds[t], K=K)
            if t == 0:
                saved["factor"] = f
            return ExperimentRecord(
                method="bbf",
                dataset=name,
                n=n,
                d=X.d,
                kernel=args.kernel,
                h=args.h,
                param=f"eps={args.eps:g}",
                memory=f.memory_count(),
                rel_error=rel,
                build_s=build_s,
                apply_s=apply_s,
                seed=seeds[t],
            )

        return run

    records = _run_trials([make_trial(t) for t in range(args.trials)], args.parallel_trials)
    if args.save:
        save_bbf(saved["factor"], args.save)
        print(f"saved factorization to {args.save}", file=sys.stderr)
    _write_csv(args.out, CSV_HEADER, [r.as_row() for r in records])
    _summary(records, "bbf")
    return 0


_BASELINES = ("nys", "knys", "lsnys", "rks", "svd")


def _build_baseline(method, X, spec, r, seed, args, K):
    n = X.n
    if method == "nys":
        if 2 * r > n:
            return None
        return nystrom_uniform(X, spec, r, seed=seed)
    if method == "knys":
        if r > n:
            return None
        return nystrom_kmeans(X, spec, r, seed=seed)
    if method == "lsnys":
        if n > args.dense_cap:
            return None
        return nystrom_leverage(X, spec, r, seed=seed, dense_cap=args.dense_cap)
    if method == "rks":
        if spec.family != GAUSSIAN:
            return None
        return rks_features(X, spec, r, seed=seed)
    if method == "svd":
        if K is None:
            return None
        return truncated_svd_baseline(K, r, dense_cap=args.dense_cap)
    raise ValueError(f"unknown method {method!r}")


def cmd_compare(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ValueError("method list is empty")
    for m in methods:
        if m != "bbf" and m not in _BASELINES:
            raise ValueError(f"unknown method {m!r}")
    X, name = _load_data(args)
    spec = KernelSpec(args.kernel, args.h)
    n = X.n
    K = kernel_cross(spec, X.points, X.points) if n <= args.dense_cap else None
    seeds = [derive_seed(args.seed, _TAG_TRIAL, t) for t in range(args.trials)]

    def bbf_trial(t):
        def run():
            f, build_s = _build_pipeline(X, spec, args, seeds[t])
            apply_s = _time_apply(f.apply, n, seeds[t])
            rel = _measure_error(f, X, spec, args, seeds[t], K=K)
            return f.memory_count(), ExperimentRecord(
                method="bbf",
                dataset=name,
                n=n,
                d=X.d,
                kernel=args.kernel,
                h=args.h,
                param=f"eps={args.eps:g}",
                memory=f.memory_count(),
                rel_error=rel,
                build_s=build_s,
                apply_s=apply_s,
                seed=seeds[t],
            )

        return run

    bbf_results = _run_trials([bbf_trial(t) for t in range(args.trials)], args.parallel_trials)
    bbf_records = [rec for _, rec in bbf_results]
    # Matched rank: equal stored scalars under the n*r convention.
    r_match = max(1, int(round(bbf_results[0][0] / n)))
    print(f"matched rank from bbf memory: r = {r_match}", file=sys.stderr)

    records = list(bbf_records) if "bbf" in methods else []
    for method in methods:
        if method == "bbf":
            continue
        method_records = []
        for t in range(args.trials):
            seed_mt = derive_seed(args.seed, _TAG_METHOD, _BASELINES.index(method), t)
            t0 = time.perf_counter()
            factor = _build_baseline(method, X, spec, r_match, seed_mt, args, K)
            build_s = time.perf_counter() - t0
            if factor is None:
                method_records.append(
                    ExperimentRecord(
                        method=method,
                        dataset=name,
                        n=n,
                        d=X.d,
                        kernel=args.kernel,
                        h=args.h,
                        param=f"r={r_match}",
                        memory=float(n * r_match),
                        rel_error="infeasible",
                        build_s=0.0,
                        apply_s=0.0,
                        seed=seed_mt,
                    )
                )
                continue
            apply_s = _time_apply(factor.apply, n, seed_mt)
            rel = _measure_error(factor, X, spec, args, seed_mt, K=K)
            method_records.append(
                ExperimentRecord(
                    method=method,
                    dataset=name,
                    n=n,
                    d=X.d,
                    kernel=args.kernel,
                    h=args.h,
                    param=f"r={r_match}",
                    memory=factor.memory_count,
                    rel_error=rel,
                    build_s=build_s,
                    apply_s=apply_s,
                    seed=seed_mt,
                )
            )
        _summary(method_records, method)
        records.extend(method_records)

    _summary(bbf_records, "bbf")
    _write_csv(args.out, CSV_HEADER, [r.as_row() for r in records])
    return 0


def cmd_stats(args):
    X, name = _load_data(args)
    grid = _parse_float_list(args.inv_h2)
    if not grid:
        raise ValueError("provide at least one 1/h^2 value")
    rows = []
    for v in grid:
        spec = KernelSpec(args.kernel, 1.0 / math.sqrt(v))
        st = spectral_stats(X, spec, args.r, dense_cap=args.dense_cap)
        rows.append(
            [
                name,
                X.n,
                X.d,
                args.kernel,
                args.r,
                f"{v:g}",
                st.stable_rank,
                f"{st.eig_ratio:.6g}",
                f"{st.frob_capture:.6g}",
                f"{st.scaled_leverage:.6g}",
            ]
        )
    _write_csv(args.out, STATS_HEADER, rows)
    return 0


def _loglog_slope(xs, ys):
    if len(xs) < 2:
        return None
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)[0])


def _scaling_subsets(args):
    """Yield (label, DataMatrix) pairs for the scaling schedule."""
    if args.data:
        if not os.path.exists(args.data):
            raise FileNotFoundError(f"dataset file not found: {args.data}")
        drops = _parse_int_list(args.drop_columns) if args.drop_columns else []
        X = load_csv(args.data, has_header=args.has_header, drop_columns=drops)
        if args.standardize is not False:
            X = standardize(X)
        fractions = _parse_float_list(args.fractions or "1.0")
        groups = kmeans(X, args.k, seed=derive_seed(args.seed, _TAG_DATA))
        from .data import DataMatrix

        for p in fractions:
            keep = []
            for i in range(groups.k):
                mem = groups.members(i)
                keep.append(mem[: max(1, int(round(p * mem.size)))])
            idx = np.sort(np.concatenate(keep))
            sub = DataMatrix(X.points[idx], standardized=X.standardized,
                             feature_means=X.feature_means, feature_stds=X.feature_stds)
            yield f"p={p:g}", sub
    else:
        if not args.synth:
            raise ValueError("provide --synth (with --n-schedule) or --data (with --fractions)")
        _, d, c, s = _parse_synth(args.synth)
        for n in _parse_int_list(args.n_schedule):
            X = synth_blobs(n, d, c, s, seed=derive_seed(args.seed, _TAG_DATA, n))
            yield f"n={n}", X


def cmd_scaling(args):
    args.k = 15 if args.k == "auto" else int(args.k)
    spec = KernelSpec(args.kernel, args.h)
    rows = []
    ns, entry_counts, build_times, apply_times = [], [], [], []
    for label, X in _scaling_subsets(args):
        n = X.n
        ts = derive_seed(args.seed, _TAG_TRIAL, n)
        acc = KernelAccessor(X, spec)
        clustering = kmeans(X, args.k, seed=ts)
        frob = estimate_frobenius(
            acc, n, min(100 * n, n * (n - 1)), seed=derive_seed(ts, _TAG_DATA)
        )
        profile = fixed_rank_profile(clustering, args.rank, args.eps, frob)
        acc.reset_counter()
        t0 = time.perf_counter()
        f = build_bbf(
            X, spec, clustering, profile, l=args.oversample, seed=ts,
            q=args.power_iters, acc=acc,
        )
        build_s = time.perf_counter() - t0
        apply_s = _time_apply(f.apply, n, ts)
        ns.append(n)
        entry_counts.append(f.build_entries)
        build_times.append(build_s)
        apply_times.append(apply_s)
        rows.append(
            ExperimentRecord(
                method="bbf",
                dataset=label,
                n=n,
                d=X.d,
                kernel=args.kernel,
                h=args.h,
                param=f"r={args.rank}",
                memory=f.memory_count(),
                rel_error="",
                build_s=build_s,
                apply_s=apply_s,
                seed=ts,
            ).as_row()
        )
    _write_csv(args.out, CSV_HEADER, rows)
    for label, series in (
        ("build_time", build_times),
        ("apply_time", apply_times),
        ("kernel_entries", entry_counts),
    ):
        slope = _loglog_slope(ns, series)
        print(
            f"{label}_loglog_slope={'NA' if slope is None else f'{slope:.3f}'}",
            file=sys.stderr,
        )
    return 0


def cmd_synth(args):
    n, d, c, s = _parse_synth(args.synth)
    X = synth_blobs(n, d, c, s, seed=args.seed)
    np.savetxt(args.out, X.points, delimiter=",", fmt="%.17g")
    print(f"wrote {n} x {d} points to {args.out}", file=sys.stderr)
    return 0


def cmd_save(args):
    X, _ = _load_data(args)
    spec = KernelSpec(args.kernel, args.h)
    f, build_s = _build_pipeline(X, spec, args, derive_seed(args.seed, _TAG_TRIAL, 0))
    save_bbf(f, args.bbf)
    print(
        f"built in {build_s:.3g}s: n={f.n} k={f.k} memory={f.memory_count():.0f} "
        f"-> {args.bbf}",
        file=sys.stderr,
    )
    return 0


def cmd_load(args):
    f = load_bbf(args.bbf)
    ranks = f.ranks
    print(f"container: {args.bbf}")
    print(f"n={f.n} d={f.clustering.centers.shape[1]} k={f.k}")
    print(f"kernel={f.spec.family} h={f.spec.h:g} eps={f.epsilon:g}")
    print(f"ranks: min={ranks.min()} max={ranks.max()} mean={ranks.mean():.1f}")
    kept = sum(
        1 for i in range(f.k) for j in range(f.k) if f.inner[i][j] is not None
    )
    print(f"inner blocks kept: {kept}/{f.k * f.k}")
    print(f"memory_count={f.memory_count():.0f}")
    return 0


def cmd_matvec(args):
    f = load_bbf(args.bbf)
    v = np.loadtxt(args.vec, delimiter=",").reshape(-1)
    if v.size != f.n:
        raise ValueError(f"vector length {v.size} does not match n = {f.n}")
    y = f.apply(v)
    if args.out:
        np.savetxt(args.out, y, fmt="%.17g")
    else:
        np.savetxt(sys.stdout, y, fmt="%.17g")
    return 0


def _add_data_args(p):
    p.add_argument("--data", help="CSV dataset path")
    p.add_argument("--has-header", action="store_true", help="skip one header row")
    p.add_argument(
        "--drop-columns", default="", help="comma-separated 0-based columns to drop"
    )
    p.add_argument("--synth", help="synthetic blobs, e.g. n=2000,d=5,c=10,s=0.1")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument(
        "--standardize",
        dest="standardize",
        action="store_true",
        default=None,
        help="force standardization (default: on for --data, off for --synth)",
    )
    grp.add_argument("--no-standardize", dest="standardize", action="store_false")
    p.add_argument("--dataset-name", help="label used in CSV rows")


def _add_common_args(p):
    p.add_argument("--kernel", choices=["gaussian", "laplacian"], default="gaussian")
    p.add_argument("--h", type=float, default=1.0, help="kernel bandwidth")
    p.add_argument("--eps", type=float, default=1e-2, help="target relative error")
    p.add_argument("--k", default="auto", help="cluster count, or 'auto'")
    p.add_argument("--kmin", type=int, default=1)
    p.add_argument("--kmax", type=int, default=0, help="0 means ceil(sqrt(n))")
    p.add_argument("--rmax", type=int, default=300, help="per-cluster rank cap")
    p.add_argument("--oversample", type=int, default=10)
    p.add_argument("--power-iters", type=int, default=2)
    p.add_argument("--partitioner", choices=["kmeans", "kcenter"], default="kmeans")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--parallel-trials", action="store_true")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--dense-cap", type=int, default=8192)
    p.add_argument(
        "--error-budget", type=int, default=0, help="entry samples for sampled error (0: 100n)"
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bbfkit", description="Block basis factorization of kernel matrices"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("approx", help="build a factorization and measure its error")
    _add_data_args(p)
    _add_common_args(p)
    p.add_argument("--save", help="write the trial-0 factorization here")
    p.set_defaults(func=cmd_approx)

    p = sub.add_parser("compare", help="compare methods at matched memory")
    _add_data_args(p)
    _add_common_args(p)
    p.add_argument(
        "--methods",
        default="bbf,nys,knys,lsnys,rks,svd",
        help="comma list from {bbf,nys,knys,lsnys,rks,svd}",
    )
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stats", help="spectral statistics over a 1/h^2 grid")
    _add_data_args(p)
    _add_common_args(p)
    p.add_argument("--r", type=int, default=100, help="reference rank")
    p.add_argument("--inv-h2", default="0.25,1,4", help="comma list of 1/h^2 values")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("scaling", help="timing on a doubling schedule, fixed k and ranks")
    _add_data_args(p)
    _add_common_args(p)
    p.add_argument("--n-schedule", default="4096,8192,16384,32768")
    p.add_argument("--fractions", help="per-group subsample fractions for --data")
    p.add_argument("--rank", type=int, default=30, help="fixed per-cluster rank")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("synth", help="write a synthetic blob dataset to CSV")
    p.add_argument("--synth", required=True, help="e.g. n=2000,d=5,c=10,s=0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("save", help="build a factorization and save the container")
    _add_data_args(p)
    _add_common_args(p)
    p.add_argument("--bbf", required=True, help="output container path")
    p.set_defaults(func=cmd_save)

    p = sub.add_parser("load", help="validate a container and print a summary")
    p.add_argument("--bbf", required=True)
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("matvec", help="apply a saved factorization to a vector")
    p.add_argument("--bbf", required=True)
    p.add_argument("--vec", required=True, help="CSV vector, one value per row")
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(func=cmd_matvec)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = contextlib.nullcontext()
    threads = os.environ.get("BBF_THREADS")
    if threads:
        try:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=int(threads))
        except ImportError:
            pass
    try:
        with limiter:
            return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
