"""Evaluation statistics over collections of trial records.

Conventions: errored trials never enter a denominator, spreads are population
(not sample) statistics, and the median of an even-sized list is its
lower-middle element.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass


STRATEGY_NAMES = {
    "hc": "Hill-Climbing",
    "ga": "Genetic Algorithm",
    "static": "Static Baseline",
}


def _valid(records):
    records = [r for r in records if not r.errored]
    if not records:
        raise ValueError("no non-errored trial records")
    return records


def _lower_median(values):
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def _mean(values):
    # fsum is correctly rounded, so results do not depend on summation order
    values = [float(v) for v in values]
    return math.fsum(values) / len(values)


def _mean_std(values):
    mean = _mean(values)
    var = math.fsum((float(v) - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def asr(records) -> float:
    """Fraction of non-errored trials that succeeded."""
    records = _valid(records)
    return sum(r.success for r in records) / len(records)


def distance_stats(records) -> dict:
    d = [r.visual_distance for r in _valid(records)]
    mean, std = _mean_std(d)
    return {"mean": mean, "median": float(_lower_median(d)), "std": std, "max": float(max(d))}


def convergence_stats(records) -> dict:
    """Iteration/time statistics over the successful trials only."""
    wins = [r for r in records if r.success]
    if not wins:
        raise ValueError("no successful trials")
    its = [r.iterations for r in wins]
    mean = _mean(its)
    return {
        "mean_iterations": mean,
        "median_iterations": float(_lower_median(its)),
        "iteration_variance": math.fsum((i - mean) ** 2 for i in its) / len(its),
        "mean_time": _mean([r.wall_time for r in wins]),
    }


def dmr_and_confidence(records) -> dict:
    """Decision manipulation rate and confidence change against the clean query.

    A trial counts as manipulated when its final label differs from the
    clean-image label or when it succeeded.
    """
    records = _valid(records)
    if any(r.clean_label is None or r.clean_confidence is None for r in records):
        raise ValueError("records lack the clean-image reference query")
    flipped = [r.success or r.final_label != r.clean_label for r in records]
    deltas = [r.final_confidence - r.clean_confidence for r in records]
    mean, std = _mean_std(deltas)
    return {"dmr": sum(flipped) / len(records), "mean_delta_c": mean, "std_delta_c": std}


@dataclass
class ExperimentSummary:
    strategy: str
    n_trials: int
    n_errored: int
    successes: int
    asr: float
    distance: dict
    convergence: dict | None
    dmr: float | None
    confidence_change: dict | None
    total_api_calls: int
    mean_abs_change: float

    def to_dict(self):
        return asdict(self)


def summarize(records, strategy="") -> ExperimentSummary:
    records = list(records)
    valid = _valid(records)
    try:
        conv = convergence_stats(valid)
    except ValueError:
        conv = None
    try:
        dm = dmr_and_confidence(valid)
        dmr = dm["dmr"]
        cc = {"mean": dm["mean_delta_c"], "std": dm["std_delta_c"]}
    except ValueError:
        dmr, cc = None, None
    return ExperimentSummary(
        strategy=strategy,
        n_trials=len(valid),
        n_errored=len(records) - len(valid),
        successes=sum(r.success for r in valid),
        asr=asr(valid),
        distance=distance_stats(valid),
        convergence=conv,
        dmr=dmr,
        confidence_change=cc,
        total_api_calls=sum(r.api_calls + r.reference_calls for r in records),
        mean_abs_change=_mean([r.mean_abs_change for r in valid]),
    )


# --------------------------------------------------------------------------
# table rendering
# --------------------------------------------------------------------------

TABLE_HEADERS = {
    "asr": ["strategy", "asr", "success_trials"],
    "distance": ["strategy", "mean", "median", "std_dev", "max"],
    "convergence": ["strategy", "mean_iterations", "median_iterations",
                    "iteration_variance", "mean_time_sec"],
    "dmr": ["strategy", "dmr", "confidence_change"],
}


def strategy_name(optimizer: str) -> str:
    return STRATEGY_NAMES.get(optimizer, optimizer)


def percent(x: float) -> str:
    return f"{100.0 * x:.1f}%"


def table_rows(groups: dict) -> dict:
    """Rows for every table, one per strategy, sorted by display name.

    ``groups`` maps optimizer key to its records.
    """
    rows = {name: [] for name in TABLE_HEADERS}
    for key in sorted(groups, key=strategy_name):
        recs = [r for r in groups[key] if not r.errored]
        if not recs:
            continue
        name = strategy_name(key)
        n_ok = sum(r.success for r in recs)
        rows["asr"].append([name, percent(n_ok / len(recs)), f"{n_ok}/{len(recs)}"])
        ds = distance_stats(recs)
        rows["distance"].append([name] + [f"{ds[k]:.4f}" for k in ("mean", "median", "std", "max")])
        if n_ok:
            cs = convergence_stats(recs)
            rows["convergence"].append([
                name, f"{cs['mean_iterations']:.1f}", f"{cs['median_iterations']:g}",
                f"{cs['iteration_variance']:.1f}", f"{cs['mean_time']:.1f}",
            ])
        else:
            rows["convergence"].append([name, "", "", "", ""])
        try:
            dm = dmr_and_confidence(recs)
            rows["dmr"].append([
                name, percent(dm["dmr"]), f"{dm['mean_delta_c']:+.2f} ± {dm['std_delta_c']:.2f}",
            ])
        except ValueError:
            rows["dmr"].append([name, "", ""])
    return rows


def render_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
