"""Time the numba kernels against their numpy fallbacks and check they agree.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64] [--frames 24]
"""

import argparse
import statistics
import time

import numpy as np

from pointtrack.sift import gaussian_octaves, scale_space_extrema, to_gray, upsample2
from pointtrack.synth import generate_scene, render_video


def timeit(fn, repeat):
    fn()  # warm-up (JIT compile / cache load)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--frames", type=int, default=24)
    args = ap.parse_args()

    sc = generate_scene(0, T=args.frames, H=args.size, W=args.size)
    tex = sc.textures

    def render(flag):
        return lambda: render_video(sc.sprite_params, tex, args.frames, args.size, args.size,
                                    use_numba=flag)

    img = upsample2(to_gray(sc.video[0]))
    dog = np.diff(gaussian_octaves(img, 1)[0], axis=0)
    thr = 0.02 / 3

    def extrema(flag):
        return lambda: scale_space_extrema(dog, thr, use_numba=flag)

    rows = []
    for name, make in (("render_video", render), ("dog_extrema", extrema)):
        a, b = make(True)(), make(False)()
        same = np.array_equal(a, b)
        tn, tp = timeit(make(True), args.repeat), timeit(make(False), args.repeat)
        rows.append((name, tn, tp, same))

    print(f"{'kernel':<14}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  identical")
    for name, tn, tp, same in rows:
        print(f"{name:<14}{tn * 1e3:>10.2f}{tp * 1e3:>10.2f}{tp / tn:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
