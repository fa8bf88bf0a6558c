"""Acceptance gate: one test per criterion, each with its own runtime budget.

Every test logs a ``[PASS]``/``[FAIL]`` line; the lines are printed together
at the end of the pytest run.
"""

import json
import math
import random
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import reference
from conftest import ACCEPTANCE_LINES
from scaleinject.defense import default_probes, multiscale_check
from scaleinject.experiment import load_plan, read_records, run_plan, strip_wall_times
from scaleinject.imaging import (
    BICUBIC, BILINEAR, NEAREST, apply_perturbation, downscale, visual_distance,
)
from scaleinject.metrics import (
    asr, convergence_stats, distance_stats, dmr_and_confidence, table_rows,
)
from scaleinject import optimize
from scaleinject.optimize import (
    AttackConfig, GaConfig, HillClimbConfig, RewardWeights, TrialRecord, ga_generation,
    reward, run_attack,
)
from scaleinject.oracle import (
    MockOracle, MockOracleSpec, RateLimiter, SuccessRule, encode_request, parse_response,
)
from scaleinject.payload import EmbedSpec, embed_payload
from scaleinject.scenarios import make_scenario, scenario_config

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.yaml"


@contextmanager
def criterion(number, title, budget):
    t0 = time.perf_counter()
    status, note = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - t0
        if elapsed >= budget:
            note = f"over budget: {elapsed:.2f}s >= {budget}s"
            raise AssertionError(f"criterion {number} {note}")
        status = "PASS"
    except BaseException as exc:
        note = note or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        elapsed = time.perf_counter() - t0
        line = f"[{status}] {number:>2}. {title} ({elapsed:.2f}s, budget {budget}s)"
        if note:
            line += f" {note}"
        ACCEPTANCE_LINES.append(line)
        print(line)


def test_c01_kernel_invariants():
    with criterion(1, "kernel invariants", 5):
        r = np.random.default_rng(101)
        for _ in range(50):
            h, w = int(r.integers(1, 20)), int(r.integers(1, 20))
            fh, fw = int(r.integers(1, 9)), int(r.integers(1, 9))
            value = float(r.uniform(0, 255))
            img = np.full((h * fh, w * fw, 3), value)
            for method in (NEAREST, BILINEAR, BICUBIC):
                assert np.abs(downscale(img, h, w, method) - value).max() <= 1e-9
        for _ in range(50):
            H, W = int(r.integers(2, 40)), int(r.integers(2, 40))
            img = np.round(r.uniform(0, 255, (H, W, 3)), 3)
            out = downscale(img, int(r.integers(1, H + 1)), int(r.integers(1, W + 1)), NEAREST)
            assert np.isin(out, img).all()


def test_c02_visual_distance():
    with criterion(2, "visual distance formula", 1):
        a = np.zeros((3, 5, 3))
        assert abs(visual_distance(a, a) - 0.0) <= 1e-12
        assert abs(visual_distance(a, np.full_like(a, 255.0)) - 1.0) <= 1e-12
        p, q = np.zeros((1, 1, 3)), np.zeros((1, 1, 3))
        q[0, 0, 0] = 255.0
        assert abs(visual_distance(p, q) - 1 / math.sqrt(3)) <= 1e-12
        r = np.random.default_rng(102)
        for _ in range(200):
            shape = (int(r.integers(1, 16)), int(r.integers(1, 16)), 3)
            x, y = r.uniform(0, 255, shape), r.uniform(0, 255, shape)
            d = visual_distance(x, y)
            assert d == visual_distance(y, x) and 0.0 <= d <= 1.0


def test_c03_reward_formula():
    with criterion(3, "reward formula", 1):
        w = RewardWeights(10.0, 0.5, 0.2)
        for (s, d, c), expected in [((1, 0.0, 1.0), 10.0), ((0, 1.0, 0.0), -0.7),
                                    ((1, 0.0847, 0.82), 9.92165)]:
            assert abs(reward(s, d, c, w) - expected) <= 1e-9
        rnd = random.Random(103)
        for _ in range(1000):
            s, d, c = rnd.random() < 0.5, rnd.random(), rnd.random()
            dd, dc = rnd.random() * (1 - d), rnd.random() * (1 - c)
            assert reward(s, d + dd, c, w) <= reward(s, d, c, w)
            assert reward(s, d, c + dc, w) >= reward(s, d, c, w)
            assert reward(True, d, c, w) >= reward(False, d, c, w)


def test_c04_embedding_roundtrip():
    with criterion(4, "embedding round-trip (nearest exact, bicubic <= 2 levels)", 30):
        r = np.random.default_rng(104)
        for factor in (2, 4, 8):
            for _ in range(20):
                h, w = int(r.integers(1, 12)), int(r.integers(1, 12))
                payload = r.integers(0, 256, (h, w, 3)).astype(float)
                src = r.uniform(0, 255, (h * factor, w * factor, 3))
                out = embed_payload(src, EmbedSpec(payload, factor, NEAREST))
                assert np.array_equal(downscale(out, h, w, NEAREST), payload)
        for _ in range(5):
            payload = r.uniform(0, 255, (8, 8, 3))
            src = r.uniform(0, 255, (64, 64, 3))
            out = embed_payload(src, EmbedSpec(payload, 8, BICUBIC), tolerance=None)
            seen = np.array(reference.resize(out, 8, 8, "bicubic"))
            assert np.abs(seen - payload).max() <= 2.0


def test_c05_search_invariants(monkeypatch):
    with criterion(5, "hill-climb monotone within budget; GA elites and population size", 20):
        norms = []
        real_call = optimize._Scorer.__call__

        def spy(self, delta):
            norms.append(float(np.abs(delta).max()))
            return real_call(self, delta)

        monkeypatch.setattr(optimize._Scorer, "__call__", spy)
        for seed in range(20):
            sc = make_scenario(seed)
            rec = run_attack(sc.base, scenario_config(seed), sc.oracle())
            trace = rec.reward_trace
            assert all(b >= a for a, b in zip(trace, trace[1:]))
            assert len(trace) == rec.iterations
        assert max(norms) <= 0.02
        monkeypatch.setattr(optimize._Scorer, "__call__", real_call)

        sc = make_scenario(0)
        oracle = sc.oracle()
        cfg = GaConfig()
        rng = np.random.default_rng(0)

        def score(delta):
            adv = apply_perturbation(sc.base, delta)
            resp = oracle.query(adv)
            return reward(resp.success, visual_distance(sc.base, adv), resp.confidence)

        pop = [(d, score(d)) for d in (rng.uniform(-0.02, 0.02, sc.base.shape)
                                       for _ in range(20))]
        best = [max(rw for _, rw in pop)]
        for _ in range(20):
            cached = {id(d): rw for d, rw in pop}
            nxt = ga_generation(pop, cfg, rng, 0.02)
            assert len(nxt) == 20
            assert all(np.abs(d).max() <= 0.02 for d in nxt)
            pop = [(d, cached.get(id(d), None)) for d in nxt]
            pop = [(d, rw if rw is not None else score(d)) for d, rw in pop]
            best.append(max(rw for _, rw in pop))
        assert all(b >= a for a, b in zip(best, best[1:]))


class _Fixed:
    def __init__(self, success):
        self.success = success
        self.calls = 0

    def query(self, image, prompt=""):
        from scaleinject.oracle import OracleResponse

        self.calls += 1
        label = "payload" if self.success else "benign"
        return OracleResponse(0.9 if self.success else 0.1, label, self.success, label)


def test_c06_termination_and_accounting():
    with criterion(6, "loop termination and api_calls accounting", 5):
        base = np.full((16, 16, 3), 120.0)
        for opt in (HillClimbConfig(), HillClimbConfig(proposals_per_iter=3), GaConfig()):
            cfg = AttackConfig(optimizer=opt, seed=1)
            never = _Fixed(False)
            rec = run_attack(base, cfg, never, query_clean=False)
            assert rec.iterations == 50 and not rec.success
            assert rec.api_calls == never.calls == cfg.call_budget(50)
            now = _Fixed(True)
            rec = run_attack(base, cfg, now, query_clean=False)
            assert rec.iterations == 1 and rec.success
            assert rec.api_calls == now.calls == cfg.call_budget(1)
        assert AttackConfig().call_budget(50) == 50
        assert AttackConfig(optimizer=GaConfig()).call_budget(50) == 20 + 18 * 49


def test_c07_adaptive_beats_static(tmp_path):
    with criterion(7, "adaptive ASR exceeds static ASR by >= 0.25 (desk scenario)", 120):
        plan = load_plan(DESK, output_dir=str(tmp_path / "desk"),
                         optimizers=["hc", "ga", "static"])
        res = run_plan(plan)
        rates = {cell: s["asr"] for cell, s in res.summaries.items()}
        static = rates["static-bilinear-x8"]
        for adaptive in ("hc-bilinear-x8", "ga-bilinear-x8"):
            print(f"    {adaptive}: {rates[adaptive]:.2f} vs static {static:.2f}")
            assert rates[adaptive] - static >= 0.25
        assert all(s["n_trials"] == 20 for s in res.summaries.values())


def _fixture_records(seed):
    r = random.Random(seed)
    recs = []
    for _ in range(r.randint(1, 200)):
        status = r.choice(["success", "success", "failed", "errored"])
        recs.append(TrialRecord(
            r.choice(["hc", "ga"]), status, iterations=r.randint(1, 50),
            visual_distance=r.random() * 0.2, wall_time=r.random() * 30,
            clean_confidence=r.random(), final_confidence=r.random(),
            clean_label=r.choice("xy"), final_label=r.choice("xy")))
    if all(x.errored for x in recs):
        recs[0].status = "failed"
    if not any(x.success for x in recs):
        recs[0].status = "success"
    return recs


def test_c08_metrics_oracle_equivalence():
    with criterion(8, "metrics match brute-force implementation; 87/100 row", 5):
        for seed in range(100):
            recs = _fixture_records(seed)
            dicts = [x.to_dict() for x in recs]
            assert asr(recs) == reference.brute_asr(dicts)
            assert distance_stats(recs) == reference.brute_distance(dicts)
            assert convergence_stats(recs) == reference.brute_convergence(dicts)
            assert dmr_and_confidence(recs) == reference.brute_dmr(dicts)
        rows = table_rows({"hc": [TrialRecord("hc", "success")] * 87
                           + [TrialRecord("hc", "failed")] * 13})
        assert rows["asr"][0] == ["Hill-Climbing", "87.0%", "87/100"]


def test_c09_defense():
    with criterion(9, "multi-scale defense verdicts", 5):
        r = np.random.default_rng(109)
        stencil = np.repeat(np.where(r.uniform(size=(8, 8, 1)) > 0.5, 200.0, 40.0), 3, axis=2)
        oracle = MockOracle(MockOracleSpec(stencil, NEAREST))
        flat = multiscale_check(np.full((64, 64, 3), 128.0), default_probes((8, 8), (64, 64)),
                                oracle)
        assert flat.verdict == "consistent" and flat.divergence == 0.0
        cover = np.clip(255.0 - np.kron(stencil, np.ones((8, 8, 1)))
                        + r.normal(0, 4, (64, 64, 3)), 0, 255)
        attack = embed_payload(cover, EmbedSpec(stencil, 8, NEAREST))
        probes = [((8, 8), NEAREST), ((8, 8), BILINEAR)]
        verdict = multiscale_check(attack, probes, oracle)
        assert verdict.verdict == "suspicious" and verdict.divergence >= 0.5


def test_c10_protocol_golden():
    with criterion(10, "protocol golden tests", 2):
        img = np.array([[[0, 0, 0], [255, 0, 0]], [[0, 255, 0], [12, 34, 56]]], float)
        golden = (ROOT / "tests" / "fixtures" / "request_2x2.json").read_bytes()
        assert encode_request(img, "Describe this image.") == golden

        now = [0.0]

        def sleep(dt):
            now[0] += dt

        lim = RateLimiter(1.0, clock=lambda: now[0], sleep=sleep)
        rnd = random.Random(110)
        for _ in range(100):
            now[0] += rnd.randrange(1536) / 1024  # dyadic steps keep the clock exact
            lim.acquire()
        assert min(np.diff(lim.dispatch_times)) >= 1.0

        assert parse_response("Result APPROVED", SuccessRule.text_contains("APPROVED")).success
        cat = parse_response("cat\nconfidence: 0.82", SuccessRule.label_equals("cat"))
        assert cat.predicted_label == "cat" and cat.confidence == 0.82
        with pytest.raises(Exception):
            parse_response("", SuccessRule.label_equals("cat"))


def test_c11_determinism(tmp_path):
    with criterion(11, "plan rerun reproduces JSONL modulo wall time", 120):
        outs = []
        for name in ("first", "second"):
            plan = load_plan(DESK, output_dir=str(tmp_path / name),
                             optimizers=["hc", "ga", "static"])
            run_plan(plan)
            lines = (tmp_path / name / "records.jsonl").read_text().splitlines()
            outs.append([strip_wall_times(x) for x in lines])
        assert len(outs[0]) == 60 and outs[0] == outs[1]
        recs, skipped = read_records(tmp_path / "first" / "records.jsonl")
        assert skipped == 0 and json.dumps(recs[0].to_dict())
