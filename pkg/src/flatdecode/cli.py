"""Command-line surface: calibrate, profile, verify, decode, bench.

Worker count comes from FLATDECODE_WORKERS (default: all cores); kernel
backend from FLATDECODE_BACKEND (numba when available, numpy otherwise).
"""

import argparse
import sys

import numpy as np

from . import verify as verify_mod
from .backend import active_backend, set_backend, worker_count
from .dispatch import (DispatchTable, TimingUnstable, UnknownShape, default_fingerprint,
                       load_table, profile_shape, save_table)
from .flatgemm import TileConfig, flat_gemm
from .attention import AttentionConfig, batch_decode_attention
from .matrix import gemm_oracle
from .metrics import rel_error_rowwise
from .pipeline import (GEMM_TOLERANCE, PRESETS, decode_layer, format_record, get_preset)
from .softmax import UncalibratableRange, calibrate, load_calibration, save_calibration
from .timing import measure, median_mad


def _parse_synthetic(spec: str, count: int, rng):
    kind, _, rest = spec.partition(":")
    params = rest.split(":") if rest else []
    if kind == "normal" and len(params) == 2:
        return rng.normal(float(params[0]), float(params[1]), count)
    if kind == "uniform" and len(params) == 2:
        return rng.uniform(float(params[0]), float(params[1]), count)
    raise ValueError(f"bad synthetic spec {spec!r}; want normal:MEAN:STD or uniform:LO:HI")


def cmd_calibrate(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.samples:
        with open(args.samples) as f:
            samples = np.array([float(line) for line in f if line.strip()])
    else:
        samples = _parse_synthetic(args.synthetic, args.count, rng)
    try:
        calib = calibrate(samples, args.coverage, args.margin)
    except UncalibratableRange as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        save_calibration(calib, args.out)
    print(f"phi={calib.phi!r} a={calib.a!r} b={calib.b!r} coverage={calib.coverage!r}")
    print(f"predicted_recompute_probability={1.0 - calib.coverage!r}")
    return 0


def _parse_shapes(text: str):
    shapes = []
    for part in text.split(","):
        n, _, k = part.partition(":")
        shapes.append((int(n), int(k)))
    return shapes


def cmd_profile(args) -> int:
    if args.model:
        cfg = get_preset(args.model, args.scale)
        shapes = [(n, k) for n, k in cfg.gemm_shapes().values()]
    else:
        shapes = _parse_shapes(args.shapes)
    sweep = [int(m) for m in args.sweep.split(",")]
    workers = worker_count()
    table = DispatchTable(fingerprint=default_fingerprint(workers))
    for n, k in shapes:
        try:
            entry = profile_shape(n, k, m_sweep=sweep, reps=args.reps,
                                  workers=workers, warmup=args.warmup, seed=args.seed)
        except TimingUnstable as exc:
            print(f"error: shape [N={n}, K={k}]: {exc}", file=sys.stderr)
            return 2
        table.add(entry)
        print(f"shape N={n} K={k} m1={entry.m1} m2={entry.m2}")
    if args.out:
        save_table(table, args.out)
        print(f"wrote {len(table.entries)} entries to {args.out}")
    return 0


def cmd_verify(args) -> int:
    ok = verify_mod.run_all(seed=args.seed, cases=args.cases,
                            inject=args.inject_out_of_range, out=sys.stdout)
    return 0 if ok else 1


def cmd_decode(args) -> int:
    cfg = get_preset(args.model, args.scale)
    calib = load_calibration(args.calib)
    table = load_table(args.table, expected_fingerprint=default_fingerprint())
    try:
        res = decode_layer(cfg, args.batch, args.seq, calib, table, args.mode,
                           seed=args.seed, split=args.split, time_reps=args.reps)
    except UnknownShape as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = "PASS" if res.passed else "FAIL"
    print(f"# decode {cfg.name} batch={args.batch} seq={args.seq} mode={args.mode} "
          f"backend={active_backend()}")
    header = f"{'op':10} {'impl':6} {'max_err':>10} {'median_s':>10} {'mad_s':>10}"
    print(header)
    for op, choice in res.choices.items():
        med, mad = res.timings.get(op, (float('nan'), float('nan')))
        print(f"{op:10} {choice.value:6} {res.gemm_errors[op]:10.3e} {med:10.6f} {mad:10.6f}")
    print(f"layer max_err={res.max_err:.3e} tolerance={GEMM_TOLERANCE} status={status}")
    print(f"recomputed_rows={res.attn_stats.rows_recomputed} "
          f"rescale_ops={res.attn_stats.rescale_ops}")
    for op, choice in res.choices.items():
        rec = {"record": "decode-gemm", "op": op, "impl": choice.value,
               "max_err": f"{res.gemm_errors[op]:.6e}"}
        if op in res.timings:
            rec["median_s"] = f"{res.timings[op][0]:.6e}"
            rec["mad_s"] = f"{res.timings[op][1]:.6e}"
        print(format_record(rec))
    print(format_record({"record": "decode-layer", "model": cfg.name,
                         "batch": args.batch, "seq": args.seq, "mode": args.mode,
                         "max_err": f"{res.max_err:.6e}",
                         "rows_recomputed": res.attn_stats.rows_recomputed,
                         "rescale_ops": res.attn_stats.rescale_ops,
                         "status": status}))
    return 0 if res.passed else 1


def _bench_backends(args):
    if args.backends == "both":
        from .backend import HAVE_NUMBA
        return ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]
    return [active_backend()]


def _bench_gemm(args, emit):
    workers = worker_count()
    for n, k in _parse_shapes(args.shapes):
        rng = np.random.default_rng(args.seed)
        a = rng.standard_normal((args.m, k), dtype=np.float32)
        b = rng.standard_normal((k, n), dtype=np.float32)
        ref = gemm_oracle(a, b)
        widths = [w for w in (8, 16, 32, 64, 128, 256, 512, 1024, 2048) if w <= n]
        for backend in _bench_backends(args):
            prev = set_backend(backend)
            try:
                best = None
                for bn in widths:
                    for db in (False, True):
                        cfg = TileConfig(b_n=bn, b_k=min(32, k), double_buffer=db)
                        samples = measure(lambda: flat_gemm(a, b, cfg),
                                          reps=args.reps, warmup=1)
                        med, mad = median_mad(samples)
                        err = rel_error_rowwise(flat_gemm(a, b, cfg), ref)
                        gflops = 2.0 * args.m * n * k / med / 1e9
                        if best is None or med < best[0]:
                            best = (med, bn, db)
                        emit({"record": "bench-gemm", "backend": backend, "m": args.m,
                              "n": n, "k": k, "b_n": bn, "double_buffer": int(db),
                              "parallelism": f"{n / bn:.1f}",
                              "median_s": f"{med:.6e}", "mad_s": f"{mad:.6e}",
                              "gflops": f"{gflops:.3f}", "max_err": f"{err:.3e}",
                              "status": "PASS" if err <= GEMM_TOLERANCE else "FAIL"})
                emit({"record": "bench-gemm-best", "backend": backend, "n": n, "k": k,
                      "best_b_n": best[1], "double_buffer": int(best[2]),
                      "parallelism_ok": int(n / best[1] >= workers)})
            finally:
                set_backend(prev)


def _bench_attn(args, emit):
    rng = np.random.default_rng(args.seed)
    M, L, d, p = 8, args.seq, 64, 4
    K = rng.standard_normal((L, d), dtype=np.float32)
    V = rng.standard_normal((L, d), dtype=np.float32)
    Q = rng.standard_normal((M, d), dtype=np.float32)
    logits = Q.astype(np.float64) @ K.astype(np.float64).T
    Q *= np.float32(6.0 / np.abs(logits).max())
    from .softmax import ScalingCalibration
    calib = ScalingCalibration(phi=0.0, a=-8.0, b=8.0, coverage=1.0)
    cfg = AttentionConfig(p=p, scale=1.0, calib=calib)
    for backend in _bench_backends(args):
        prev = set_backend(backend)
        try:
            meds = {}
            for mode in ("sync", "async"):
                samples = measure(lambda: batch_decode_attention(Q, K, V, cfg, mode),
                                  reps=args.reps, warmup=2)
                med, mad = median_mad(samples)
                meds[mode] = med
                _, stats = batch_decode_attention(Q, K, V, cfg, mode)
                emit({"record": "bench-attn", "backend": backend, "mode": mode,
                      "m": M, "seq": L, "head_dim": d, "p": p,
                      "median_s": f"{med:.6e}", "mad_s": f"{mad:.6e}",
                      "rescale_ops": stats.rescale_ops,
                      "rows_recomputed": stats.rows_recomputed})
            emit({"record": "bench-attn-summary", "backend": backend,
                  "async_faster": int(meds["async"] <= meds["sync"]),
                  "note": "informational" if meds["async"] <= meds["sync"]
                          else "inversion-flagged"})
        finally:
            set_backend(prev)


def cmd_bench(args) -> int:
    if args.reps < 2:
        print("warning: --reps 1 gives unstable medians; use >= 3", file=sys.stderr)
    lines = []

    def emit(fields):
        line = format_record(fields)
        lines.append(line)
        print(line)

    if args.suite == "gemm":
        _bench_gemm(args, emit)
    else:
        _bench_attn(args, emit)
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flatdecode",
                                 description="decode-phase CPU kernels and benchmarks")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit a softmax scaling factor to logit samples")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--samples", help="text file, one logit per line")
    src.add_argument("--synthetic", help="normal:MEAN:STD or uniform:LO:HI")
    c.add_argument("--count", type=int, default=1_000_000, help="synthetic sample count")
    c.add_argument("--coverage", type=float, default=0.9999)
    c.add_argument("--margin", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="write calibration file")
    c.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("profile", help="find per-shape dispatch inflection points")
    msrc = p.add_mutually_exclusive_group(required=True)
    msrc.add_argument("--model", choices=sorted(PRESETS))
    msrc.add_argument("--shapes", help="comma-separated N:K pairs")
    p.add_argument("--scale", type=int, default=1, help="shrink preset dims by this factor")
    p.add_argument("--sweep", default="1,2,4,8,16,32,64,128,256")
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write dispatch table file")
    p.set_defaults(fn=cmd_profile)

    v = sub.add_parser("verify", help="run the oracle-backed property suites")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--cases", type=int, default=50)
    v.add_argument("--inject-out-of-range", type=int, default=1,
                   help="rows pushed outside the calibrated band in the recompute suite")
    v.set_defaults(fn=cmd_verify)

    d = sub.add_parser("decode", help="one toy transformer layer decode step")
    d.add_argument("--model", required=True, choices=sorted(PRESETS))
    d.add_argument("--scale", type=int, default=1)
    d.add_argument("--batch", type=int, default=1)
    d.add_argument("--seq", type=int, default=64)
    d.add_argument("--calib", required=True)
    d.add_argument("--table", required=True)
    d.add_argument("--mode", choices=("sync", "async"), default="async")
    d.add_argument("--split", type=int, default=None, help="KV chunk count per row")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--reps", type=int, default=3, help="timing reps per op")
    d.set_defaults(fn=cmd_decode)

    b = sub.add_parser("bench", help="timing sweeps for the gemm/attention kernels")
    b.add_argument("--suite", choices=("gemm", "attn"), required=True)
    b.add_argument("--shapes", default="512:4096,16384:4096", help="N:K list (gemm suite)")
    b.add_argument("--m", type=int, default=8, help="rows (gemm suite)")
    b.add_argument("--seq", type=int, default=1024, help="KV length (attn suite)")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--backends", choices=("active", "both"), default="active")
    b.add_argument("--out", help="write machine-readable records")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
