import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference
from scaleinject.metrics import (
    TABLE_HEADERS, asr, convergence_stats, distance_stats, dmr_and_confidence, percent,
    render_csv, summarize, table_rows,
)
from scaleinject.optimize import TrialRecord


def rec(status="failed", d=0.05, it=50, t=1.0, c0=0.5, c1=0.5, l0="benign", l1="benign",
        opt="hc"):
    return TrialRecord(optimizer=opt, status=status, iterations=it, visual_distance=d,
                       wall_time=t, clean_confidence=c0, final_confidence=c1,
                       clean_label=l0, final_label=l1, api_calls=it, reference_calls=1)


def random_records(seed, n):
    r = random.Random(seed)
    out = []
    for _ in range(n):
        status = r.choices(["success", "failed", "errored"], [5, 4, 1])[0]
        out.append(rec(status, d=r.random() * 0.1, it=r.randint(1, 50), t=r.random() * 20,
                       c0=r.random(), c1=r.random(), l0=r.choice("ab"), l1=r.choice("ab"),
                       opt=r.choice(["hc", "ga", "static"])))
    if all(x.errored for x in out):
        out[0].status = "failed"
    if not any(x.success for x in out):
        out[-1].status = "success"
    return out


def test_asr_examples():
    assert asr([rec("success")] * 87 + [rec()] * 13) == 0.87
    assert asr([rec("success")] * 91 + [rec()] * 9) == 0.91
    assert asr([rec()] * 4) == 0.0
    assert asr([rec("success"), rec(), rec("errored")]) == 0.5
    with pytest.raises(ValueError):
        asr([])
    with pytest.raises(ValueError):
        asr([rec("errored")])


def test_distance_examples():
    s = distance_stats([rec(d=0.1)] * 3)
    assert s["mean"] == pytest.approx(0.1) and s["std"] == pytest.approx(0.0, abs=1e-15)
    s = distance_stats([rec(d=0.0), rec(d=0.2)])
    assert (s["mean"], s["median"], s["max"]) == (pytest.approx(0.1), 0.0, 0.2)
    s = distance_stats([rec(d=0.0721)])
    assert s == {"mean": 0.0721, "median": 0.0721, "std": 0.0, "max": 0.0721}


def test_convergence_examples():
    s = convergence_stats([rec("success", it=i) for i in (22, 22, 26)])
    assert s["mean_iterations"] == pytest.approx(23.333, abs=1e-3)
    assert s["median_iterations"] == 22
    assert s["iteration_variance"] == pytest.approx(3.556, abs=1e-3)
    s = convergence_stats([rec("success", it=7)])
    assert s["mean_iterations"] == s["median_iterations"] == 7 and s["iteration_variance"] == 0
    mixed = [rec("success", it=10), rec("failed", it=50)]
    assert convergence_stats(mixed)["mean_iterations"] == 10
    with pytest.raises(ValueError):
        convergence_stats([rec()])


def test_dmr_examples():
    s = dmr_and_confidence([rec(c0=0.9, c1=0.72, l1="payload")] * 5)
    assert s["dmr"] == 1.0 and s["mean_delta_c"] == pytest.approx(-0.18)
    assert dmr_and_confidence([rec()] * 3)["dmr"] == 0.0
    with pytest.raises(ValueError):
        dmr_and_confidence([])
    missing = rec()
    missing.clean_label = None
    with pytest.raises(ValueError):
        dmr_and_confidence([missing])


@pytest.mark.parametrize("seed", range(100))
def test_matches_brute_force(seed):
    recs = random_records(seed, random.Random(seed).randint(1, 1000 if seed < 3 else 60))
    dicts = [r.to_dict() for r in recs]
    assert asr(recs) == reference.brute_asr(dicts)
    assert distance_stats(recs) == reference.brute_distance(dicts)
    assert convergence_stats(recs) == reference.brute_convergence(dicts)
    assert dmr_and_confidence(recs) == reference.brute_dmr(dicts)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_order_invariance_and_append_monotonicity(seed):
    recs = random_records(seed, 30)
    shuffled = recs[:]
    random.Random(seed).shuffle(shuffled)
    assert asr(shuffled) == asr(recs)
    assert dmr_and_confidence(shuffled)["dmr"] == dmr_and_confidence(recs)["dmr"]
    assert asr(recs + [rec()]) <= asr(recs)
    assert asr(recs + [rec("success")]) >= asr(recs)


def test_asr_row_rendering():
    rows = table_rows({"hc": [rec("success")] * 87 + [rec()] * 13})
    assert rows["asr"] == [["Hill-Climbing", "87.0%", "87/100"]]
    assert percent(0.91) == "91.0%"


def test_rows_sorted_two_optimizers():
    groups = {"hc": [rec("success", opt="hc")], "ga": [rec(opt="ga")]}
    rows = table_rows(groups)
    for name in TABLE_HEADERS:
        assert [r[0] for r in rows[name]] == ["Genetic Algorithm", "Hill-Climbing"]
    assert rows["convergence"][0][1:] == ["", "", "", ""]


def test_dmr_cell_format():
    rows = table_rows({"hc": [rec("success", c0=0.9, c1=0.72, l1="payload")] * 4})
    assert rows["dmr"][0] == ["Hill-Climbing", "100.0%", "-0.18 ± 0.00"]


def test_render_csv_headers_only():
    assert render_csv(["a", "b"], []) == "a,b\n"


def test_summary_fields():
    recs = random_records(7, 40)
    s = summarize(recs, "Hill-Climbing")
    assert 0 <= s.asr <= 1 and 0 <= s.dmr <= 1
    assert s.distance["max"] >= s.distance["median"] >= 0
    assert s.n_trials + s.n_errored == 40
    assert s.total_api_calls == sum(r.api_calls + r.reference_calls for r in recs)
    assert s.to_dict()["strategy"] == "Hill-Climbing"
