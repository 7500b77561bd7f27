#!/usr/bin/env python3
"""Compare the numba kernels with their pure-numpy counterparts.

Both variants are called directly, so the GCGKIT_NUMBA flag does not matter
here.  Also checks that the two agree on every input before timing them.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 256]
"""
import argparse
import time

import numpy as np

from gcgkit import kernels as K


def random_masks(rng, n, h, w):
    out = []
    for _ in range(n):
        grid = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(1, h // 2 + 1), x0 + rng.integers(1, w // 2 + 1)
            grid[y0:y1, x0:x1] = 1
        out.append(grid.ravel(order="F"))
    return out


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(name, nb_fn, np_fn, repeat, check):
    nb_fn()  # jit warm-up
    r_nb, r_np = nb_fn(), np_fn()
    check(r_nb, r_np)
    t_nb = best_of(nb_fn, repeat)
    t_np = best_of(np_fn, repeat)
    print(f"{name:<22} numba {t_nb * 1e3:9.2f} ms   numpy {t_np * 1e3:9.2f} ms   "
          f"speedup {t_np / t_nb:6.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=256, help="mask side length")
    ap.add_argument("--masks", type=int, default=40, help="masks per side of the IoU matrix")
    ap.add_argument("--boxes", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    h = w = args.size
    flats = random_masks(rng, 2 * args.masks, h, w)

    def same(a, b):
        if isinstance(a, tuple):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)
        else:
            np.testing.assert_array_equal(a, b)

    bench("rle_encode", lambda: [K.nb_rle_encode(f) for f in flats],
          lambda: [K.np_rle_encode(f) for f in flats], args.repeat,
          lambda a, b: [np.testing.assert_array_equal(x, y) for x, y in zip(a, b)])

    runs = [K.np_rle_encode(f) for f in flats]
    ra, oa = K.pack_runs(runs[:args.masks])
    rb, ob = K.pack_runs(runs[args.masks:])
    bench(f"rle_iou_matrix {args.masks}x{args.masks}", lambda: K.nb_rle_iou_matrix(ra, oa, rb, ob),
          lambda: K.np_rle_iou_matrix(ra, oa, rb, ob), args.repeat, same)

    xy = rng.uniform(0, 500, size=(args.boxes, 2))
    wh = rng.uniform(5, 80, size=(args.boxes, 2))
    boxes = np.hstack([xy, xy + wh])
    bench(f"box_iou_matrix {args.boxes}", lambda: K.nb_box_iou_matrix(boxes, boxes),
          lambda: K.np_box_iou_matrix(boxes, boxes), args.repeat,
          lambda a, b: np.testing.assert_allclose(a, b, rtol=0, atol=1e-12))
    bench(f"nms_keep {args.boxes}", lambda: K.nb_nms_keep(boxes, 0.5),
          lambda: K.np_nms_keep(boxes, 0.5), args.repeat, same)

    cost = -rng.uniform(0, 1, size=(60, 80))
    bench("assignment 60x80", lambda: K.nb_min_cost_assignment(cost),
          lambda: K.np_min_cost_assignment(cost), args.repeat,
          lambda a, b: np.testing.assert_allclose(cost[np.arange(60), a].sum(),
                                                  cost[np.arange(60), b].sum(), atol=1e-9))


if __name__ == "__main__":
    main()
