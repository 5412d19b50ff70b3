"""Time the box kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py --boxes 2000 --repeat 5
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from patchsmith import _accel, kernels


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.9, (n, 2))
    wh = rng.uniform(0.02, 0.2, (n, 2))
    return np.concatenate([xy, xy + wh], 1)


def cases(n: int, seed: int):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, n), random_boxes(rng, n // 4)
    scores = rng.uniform(0, 1, n)
    n_img = max(1, n // 20)
    det_img, gt_img = rng.integers(0, n_img, n), rng.integers(0, n_img, n // 4)
    tp = rng.random(n) < 0.6
    ctp, cfp = np.cumsum(tp), np.cumsum(~tp)
    return {
        "iou_matrix": lambda: kernels.iou_matrix(a, b),
        "nms": lambda: kernels.nms(a, scores, 0.45),
        "greedy_match": lambda: kernels.greedy_match(det_img, a, gt_img, b, 0.5),
        "interpolated_ap": lambda: kernels.interpolated_ap(ctp, cfp, int(tp.sum()) + 5),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--boxes", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    fns = cases(args.boxes, args.seed)
    results = {}
    for backend in ("numpy", "numba"):
        _accel.set_backend(backend)
        for name, fn in fns.items():
            fn()  # warm-up (numba compiles on first call)
            results[name, backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}   ({args.boxes} boxes)")
    for name in fns:
        t_np, t_nb = results[name, "numpy"], results[name, "numba"]
        print(f"{name:<16}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
