"""Slow, loop-based reference implementations used as test oracles.

Written from the documented conventions only, without importing the
package's resampling or statistics code.
"""

import math


def _cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def axis_taps(n_in, n_out, kind):
    """List of {source index: weight} per output index."""
    taps = []
    for i in range(n_out):
        x = (i + 0.5) * n_in / n_out - 0.5
        w = {}

        def add(j, v):
            j = min(max(j, 0), n_in - 1)
            w[j] = w.get(j, 0.0) + v

        if kind == "nearest":
            add(int(math.floor(x + 0.5)), 1.0)
        elif kind == "bilinear":
            j = math.floor(x)
            add(j, 1 - (x - j))
            add(j + 1, x - j)
        else:
            j = math.floor(x)
            for k in (-1, 0, 1, 2):
                add(j + k, _cubic(x - (j + k)))
            total = sum(w.values())
            w = {k: v / total for k, v in w.items()}
        taps.append(w)
    return taps


def resize(img, out_h, out_w, kind):
    """Pixel-by-pixel resize of a nested-list or array image (H, W, C)."""
    H, W, C = len(img), len(img[0]), len(img[0][0])
    rows, cols = axis_taps(H, out_h, kind), axis_taps(W, out_w, kind)
    out = []
    for r in range(out_h):
        line = []
        for c in range(out_w):
            px = []
            for ch in range(C):
                acc = 0.0
                for i, wi in rows[r].items():
                    for j, wj in cols[c].items():
                        acc += wi * wj * float(img[i][j][ch])
                px.append(min(max(acc, 0.0), 255.0))
            line.append(px)
        out.append(line)
    return out


def mean(xs):
    return math.fsum(xs) / len(xs)


def pvariance(xs):
    m = mean(xs)
    return math.fsum((x - m) ** 2 for x in xs) / len(xs)


def lower_median(xs):
    s = sorted(xs)
    return s[(len(s) - 1) // 2]


def brute_asr(records):
    ok = [r for r in records if r["status"] != "errored"]
    return sum(1 for r in ok if r["status"] == "success") / len(ok)


def brute_distance(records):
    d = [r["visual_distance"] for r in records if r["status"] != "errored"]
    return {"mean": mean(d), "median": lower_median(d), "std": math.sqrt(pvariance(d)), "max": max(d)}


def brute_convergence(records):
    wins = [r for r in records if r["status"] == "success"]
    its = [r["iterations"] for r in wins]
    return {
        "mean_iterations": mean(its),
        "median_iterations": lower_median(its),
        "iteration_variance": pvariance(its),
        "mean_time": mean([r["wall_time"] for r in wins]),
    }


def brute_dmr(records):
    ok = [r for r in records if r["status"] != "errored"]
    flips = sum(1 for r in ok if r["status"] == "success" or r["final_label"] != r["clean_label"])
    deltas = [r["final_confidence"] - r["clean_confidence"] for r in ok]
    return {"dmr": flips / len(ok), "mean_delta_c": mean(deltas),
            "std_delta_c": math.sqrt(pvariance(deltas))}
