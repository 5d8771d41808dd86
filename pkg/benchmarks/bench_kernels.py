"""Time the compiled convolution kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the desk-scale network at batch 8: the stride-2 stem-sized
depthwise layer, 5x5 and 7x7 stage layers, the im2col used by grouped
convolutions, and one full training step of the supernet.
"""
import argparse
import json
import logging
import time

import numpy as np

from vltrack import kernels

logger = logging.getLogger("bench_kernels")

CASES = [
    # name, (n, c, padded side, k, stride)
    ("depthwise 3x3 s2 c16", (8, 16, 82, 3, 2)),
    ("depthwise 5x5 s1 c24", (8, 24, 24, 5, 1)),
    ("depthwise 7x7 s1 c48", (8, 48, 16, 7, 1)),
    ("xcorr 8x8 on 20x20 c256", (1, 256, 20, 8, 1)),
]


def _time(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, (n, c, side, k, s) in CASES:
        xp = rng.standard_normal((n, c, side, side)).astype(np.float32)
        w = rng.standard_normal((c, k, k)).astype(np.float32)
        o = (side - k) // s + 1
        g = rng.standard_normal((n, c, o, o)).astype(np.float32)
        x8 = np.ascontiguousarray(xp[:, :8])
        ops = {
            "forward": lambda: kernels.depthwise_forward(xp, w, s, o, o),
            "grad_input": lambda: kernels.depthwise_grad_input(g, w, s, side, side),
            "grad_weight": lambda: kernels.depthwise_grad_weight(g, xp, k, s),
            "im2col": lambda: kernels.im2col(x8, k, s, o, o),
        }
        for op, fn in ops.items():
            row = {"case": name, "op": op}
            for backend in kernels.available_backends():
                with kernels.use_backend(backend):
                    row[backend] = _time(fn, repeat)
            rows.append(row)
    return rows


def train_step_rows(repeat):
    from vltrack import search as S
    from vltrack import synth
    from vltrack.supernet import DESK_PLAN
    from vltrack.tracker import TrackerNet

    seqs = synth.manifest_sequences(synth.build_benchmark("bench", 8, "mixed", 0))
    row = {"case": "desk supernet, batch 8", "op": "train step"}
    for backend in kernels.available_backends():
        with kernels.use_backend(backend):
            net = TrackerNet(DESK_PLAN, seed=0)
            rng = np.random.default_rng(0)
            pairs = synth.make_training_pairs(seqs, 0.5, rng, DESK_PLAN)
            iters = max(2, repeat // 4)
            t = time.perf_counter()
            S.train_supernet(net, pairs, S.TrainSchedule(iters=iters), rng, log_every=0)
            row[backend] = (time.perf_counter() - t) / iters
    return [row]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write the rows here")
    ap.add_argument("--skip-train", action="store_true", help="kernels only")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if "native" not in kernels.available_backends():
        logger.warning("compiled kernels not built; only the numpy fallback is timed")
    rows = kernel_rows(args.repeat)
    if not args.skip_train:
        rows += train_step_rows(args.repeat)
    backends = kernels.available_backends()
    print(f"{'case':<26} {'op':<12} " + " ".join(f"{b + ' ms':>12}" for b in backends) + "  speedup")
    for r in rows:
        times = " ".join(f"{r[b] * 1e3:12.3f}" for b in backends)
        speed = f"{r['python'] / r['native']:7.1f}x" if "native" in r else ""
        print(f"{r['case']:<26} {r['op']:<12} {times}  {speed}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
