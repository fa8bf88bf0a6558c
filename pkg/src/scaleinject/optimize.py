"""Reward-driven perturbation search against a black-box oracle.

The outer loop perturbs the clean image, queries the oracle, scores the reply
with

    R = w1 * s - w2 * d - w3 * (1 - c)

and refines the perturbation until the oracle reports success or the
iteration budget runs out.

Query accounting (``TrialRecord.api_calls``):

* hill climbing: ``1 + proposals_per_iter * (iterations - 1)``; iteration 1
  scores the initial perturbation, every later iteration scores its proposals.
* genetic algorithm: ``population + (population - elitism) * (iterations - 1)``;
  elites are carried over with their cached reward and are not re-queried.
* static baseline: always 1.

The optional reference query of the clean image is counted separately in
``reference_calls``.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import OracleError, ResponseParseError
from .imaging import (
    BILINEAR, ResampleMethod, apply_perturbation, axis_weights, separable_apply, visual_distance,
)
from .oracle import SuccessRule
from .payload import sample_initial_perturbation
from .validation import check_image, check_scalar

DEFAULT_EPSILON = 0.02
DEFAULT_MAX_ITERATIONS = 50


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 10.0
    w2: float = 0.5
    w3: float = 0.2

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            check_scalar(getattr(self, name), name, min_val=0.0)


@dataclass(frozen=True)
class HillClimbConfig:
    """``density`` is the fraction of coordinates each proposal touches."""

    step_size: float = 0.01
    proposals_per_iter: int = 1
    density: float = 0.3

    name = "hc"

    def __post_init__(self):
        check_scalar(self.step_size, "step_size", min_val=0.0, include_min=False)
        check_scalar(self.proposals_per_iter, "proposals_per_iter", min_val=1, integer=True)
        check_scalar(self.density, "density", min_val=0.0, max_val=1.0, include_min=False)


class ProposalBasis:
    """Draws search directions on the attacked output grid.

    A random sparse sign pattern over output cells is pulled back through the
    resize kernel, so a step only touches source pixels the victim resizer
    actually reads, with the sign that moves each output cell the same way.
    """

    def __init__(self, image_shape, out_shape, method=BILINEAR):
        H, W = image_shape[:2]
        h, w = out_shape
        self.shape = tuple(image_shape)
        self.grid = (h, w) + tuple(image_shape[2:])
        self._Wh = axis_weights(H, h, method)
        self._Ww = axis_weights(W, w, method)

    def direction(self, rng, density=1.0):
        u = _sparse_signs(rng, self.grid, density)
        return np.sign(separable_apply(self._Wh.T, u, self._Ww.T))


def _sparse_signs(rng, shape, density):
    u = rng.choice((-1.0, 1.0), size=shape)
    if density < 1.0:
        u *= rng.uniform(size=shape) < density
    return u


@dataclass(frozen=True)
class GaConfig:
    population: int = 20
    mutation_sigma: float | None = None  # None -> epsilon / 10
    elitism: int = 2
    tournament_size: int = 3

    name = "ga"

    def __post_init__(self):
        check_scalar(self.population, "population", min_val=2, integer=True)
        check_scalar(self.elitism, "elitism", min_val=1, integer=True)
        check_scalar(self.tournament_size, "tournament_size", min_val=2, integer=True)
        if self.elitism >= self.population:
            raise ValueError("elitism must be smaller than the population")
        if self.mutation_sigma is not None:
            check_scalar(self.mutation_sigma, "mutation_sigma", min_val=0.0)

    def sigma(self, epsilon):
        return epsilon / 10.0 if self.mutation_sigma is None else self.mutation_sigma


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    weights: RewardWeights = RewardWeights()
    optimizer: HillClimbConfig | GaConfig = HillClimbConfig()
    seed: int | None = 0
    success_rule: SuccessRule | None = None
    out_shape: tuple | None = None
    method: ResampleMethod = BILINEAR

    def __post_init__(self):
        check_scalar(self.epsilon, "epsilon", min_val=0.0)
        check_scalar(self.max_iterations, "max_iterations", min_val=1, integer=True)
        object.__setattr__(self, "method", ResampleMethod.parse(self.method))

    def call_budget(self, iterations: int) -> int:
        """Documented number of oracle queries for a run of ``iterations``."""
        if isinstance(self.optimizer, GaConfig):
            p, e = self.optimizer.population, self.optimizer.elitism
            return p + (p - e) * (iterations - 1)
        return 1 + self.optimizer.proposals_per_iter * (iterations - 1)


@dataclass
class TrialRecord:
    """Outcome of one attack trial; serializes to one JSON object."""

    optimizer: str
    status: str  # "success" | "failed" | "errored"
    iterations: int = 0
    api_calls: int = 0
    reference_calls: int = 0
    visual_distance: float = 0.0
    mean_abs_change: float = 0.0
    wall_time: float = 0.0
    confidence_trace: list = field(default_factory=list)
    reward_trace: list = field(default_factory=list)
    final_confidence: float | None = None
    final_label: str | None = None
    clean_confidence: float | None = None
    clean_label: str | None = None
    confidence_fallback: bool = False
    perturbation_checksum: str = ""
    seed: int | None = None
    method: str = ""
    out_shape: list | None = None
    error: str | None = None
    trial_id: str = ""
    meta: dict = field(default_factory=dict)
    perturbation: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def success(self) -> bool:
        return self.status == "success"

    @property
    def errored(self) -> bool:
        return self.status == "errored"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("perturbation")
        d["success"] = self.success
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        d = dict(d)
        d.pop("success", None)
        known = set(cls.__dataclass_fields__) - {"perturbation"}
        return cls(**{k: v for k, v in d.items() if k in known})


def checksum(delta) -> str:
    arr = np.ascontiguousarray(delta, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def reward(s, d: float, c: float, w: RewardWeights = RewardWeights()) -> float:
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"distance must lie in [0, 1], got {d}")
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"confidence must lie in [0, 1], got {c}")
    return w.w1 * float(bool(s)) - w.w2 * d - w.w3 * (1.0 - c)


def project(delta, epsilon):
    return np.clip(delta, -epsilon, epsilon)


def hill_climb_step(current, current_reward, evaluate, cfg: HillClimbConfig, rng,
                    epsilon=DEFAULT_EPSILON, basis: ProposalBasis | None = None):
    """One greedy step: propose random sign moves of size ``step_size``.

    Each proposal is ``project(current + step_size * u)`` where ``u`` has
    entries in {-1, 0, +1} (drawn per pixel, or through ``basis`` when the
    victim's output grid is known). The best proposal replaces ``current``
    only if its reward is strictly larger. Returns ``(delta, reward, accepted)``.
    """
    best, best_reward = current, current_reward
    for _ in range(cfg.proposals_per_iter):
        if basis is None:
            u = _sparse_signs(rng, np.shape(current), cfg.density)
        else:
            u = basis.direction(rng, cfg.density)
        cand = project(current + cfg.step_size * u, epsilon)
        r = evaluate(cand)
        if r > best_reward:
            best, best_reward = cand, r
    return best, best_reward, best is not current


def _rank(pop):
    # ties on reward resolve toward the lower checksum
    return sorted(pop, key=lambda item: (-item[1], checksum(item[0])))


def crossover(parent1, parent2, lam, sigma, rng, epsilon):
    child = lam * parent1 + (1.0 - lam) * parent2
    if sigma > 0:
        child = child + rng.normal(0.0, sigma, size=np.shape(parent1))
    return project(child, epsilon)


def ga_generation(pop, cfg: GaConfig, rng, epsilon=DEFAULT_EPSILON):
    """Produce the next population from ``[(delta, reward), ...]``.

    The first ``cfg.elitism`` entries of the result are the current elites,
    returned as the very same arrays. The rest are tournament-selected blends
    ``lam * p1 + (1 - lam) * p2 + N(0, sigma^2)`` with ``lam ~ U(0, 1)``.
    """
    if not pop:
        raise ValueError("population is empty")
    if len(pop) != cfg.population:
        raise ValueError(f"population has {len(pop)} members, config says {cfg.population}")
    if not all(math.isfinite(r) for _, r in pop):
        raise ValueError("population rewards must be finite")
    ranked = _rank(pop)
    rank_of = {id(d): i for i, (d, _) in enumerate(ranked)}
    sigma = cfg.sigma(epsilon)
    size = min(cfg.tournament_size, len(pop))

    def select():
        picks = rng.choice(len(pop), size=size, replace=False)
        return ranked[min(rank_of[id(pop[i][0])] for i in picks)][0]

    new = [d for d, _ in ranked[: cfg.elitism]]
    while len(new) < cfg.population:
        p1, p2 = select(), select()
        new.append(crossover(p1, p2, rng.uniform(0.0, 1.0), sigma, rng, epsilon))
    return new


class _Scorer:
    """Queries the oracle for a perturbation and turns the reply into a reward."""

    def __init__(self, base, cfg, oracle, prompt):
        self.base, self.cfg, self.oracle, self.prompt = base, cfg, oracle, prompt
        self.calls = 0
        self.fallback = False
        self.responses = {}

    def __call__(self, delta):
        adv = apply_perturbation(self.base, delta)
        self.calls += 1
        resp = self.oracle.query(adv, self.prompt)
        if self.cfg.success_rule is not None:
            resp.success = self.cfg.success_rule.matches(resp.raw_text, resp.predicted_label)
        self.fallback |= resp.confidence_fallback
        d = visual_distance(self.base, adv)
        r = reward(resp.success, d, resp.confidence, self.cfg.weights)
        self.responses[id(delta)] = (delta, resp)
        return r

    def response(self, delta):
        return self.responses[id(delta)][1]

    def keep(self, deltas):
        live = {id(d) for d in deltas}
        self.responses = {k: v for k, v in self.responses.items() if k in live}


def _new_record(cfg, name, base, trial_id):
    return TrialRecord(
        optimizer=name,
        status="failed",
        seed=cfg.seed,
        method=str(cfg.method),
        out_shape=list(cfg.out_shape) if cfg.out_shape else list(base.shape[:2]),
        trial_id=trial_id,
    )


def _reference_query(rec, base, oracle, prompt, cfg):
    resp = oracle.query(base, prompt)
    rec.reference_calls = 1
    rec.clean_confidence = resp.confidence
    rec.clean_label = resp.predicted_label


def _finish(rec, base, delta, resp, scorer, t0):
    adv = apply_perturbation(base, delta)
    rec.status = "success" if resp.success else "failed"
    rec.visual_distance = visual_distance(base, adv)
    rec.mean_abs_change = float(np.abs(adv - base).mean())
    rec.final_confidence = resp.confidence
    rec.final_label = resp.predicted_label
    rec.api_calls = scorer.calls
    rec.confidence_fallback = scorer.fallback
    rec.perturbation_checksum = checksum(delta)
    rec.perturbation = delta
    rec.wall_time = time.perf_counter() - t0
    return rec


def _errored(rec, exc, scorer, t0):
    rec.status = "errored"
    rec.error = f"iteration {rec.iterations + 1}: {type(exc).__name__}: {exc}"
    rec.api_calls = scorer.calls if scorer else 0
    rec.wall_time = time.perf_counter() - t0
    return rec


def run_attack(base, cfg: AttackConfig, oracle, prompt: str = "", *, query_clean=True,
               initial_delta=None, trial_id="") -> TrialRecord:
    """Run the adaptive attack loop on ``base`` and return its record.

    Stops at the first successful query or after ``cfg.max_iterations``
    iterations. Transport or parse failures end the trial with status
    ``"errored"`` instead of raising.
    """
    base = check_image(base, name="base")
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.optimizer
    rec = _new_record(cfg, opt.name, base, trial_id)
    scorer = None
    t0 = time.perf_counter()
    try:
        if query_clean:
            _reference_query(rec, base, oracle, prompt, cfg)
        scorer = _Scorer(base, cfg, oracle, prompt)
        if isinstance(opt, GaConfig):
            delta, resp = _run_ga(base, cfg, scorer, rng, rec, initial_delta)
        else:
            delta, resp = _run_hc(base, cfg, scorer, rng, rec, initial_delta)
    except (OracleError, ResponseParseError) as exc:
        return _errored(rec, exc, scorer, t0)
    return _finish(rec, base, delta, resp, scorer, t0)


def _initial(base, cfg, rng, initial_delta):
    if initial_delta is not None:
        return project(np.asarray(initial_delta, dtype=np.float64), cfg.epsilon)
    return sample_initial_perturbation(base.shape, cfg.epsilon, rng)


def _run_hc(base, cfg, scorer, rng, rec, initial_delta):
    basis = ProposalBasis(base.shape, cfg.out_shape, cfg.method) if cfg.out_shape else None
    delta = _initial(base, cfg, rng, initial_delta)
    r = scorer(delta)
    resp = scorer.response(delta)
    rec.iterations = 1
    rec.reward_trace.append(r)
    rec.confidence_trace.append(resp.confidence)
    while not resp.success and rec.iterations < cfg.max_iterations:
        delta, r, _ = hill_climb_step(delta, r, scorer, cfg.optimizer, rng, cfg.epsilon, basis)
        resp = scorer.response(delta)
        scorer.keep([delta])
        rec.iterations += 1
        rec.reward_trace.append(r)
        rec.confidence_trace.append(resp.confidence)
    return delta, resp


def _run_ga(base, cfg, scorer, rng, rec, initial_delta):
    ga = cfg.optimizer
    first = _initial(base, cfg, rng, initial_delta)
    deltas = [first] + [
        sample_initial_perturbation(base.shape, cfg.epsilon, rng) for _ in range(ga.population - 1)
    ]
    pop = [(d, scorer(d)) for d in deltas]
    rec.iterations = 1

    def best_of(pop):
        winners = [p for p in pop if scorer.response(p[0]).success]
        return _rank(winners or pop)[0]

    while True:
        best, r = best_of(pop)
        resp = scorer.response(best)
        rec.reward_trace.append(r)
        rec.confidence_trace.append(resp.confidence)
        if resp.success or rec.iterations >= cfg.max_iterations:
            return best, resp
        cached = {id(d): rw for d, rw in pop}
        nxt = ga_generation(pop, ga, rng, cfg.epsilon)
        pop = [(d, cached[id(d)]) if id(d) in cached else (d, scorer(d)) for d in nxt]
        scorer.keep([d for d, _ in pop])
        rec.iterations += 1


def static_baseline(base, cfg: AttackConfig, oracle, prompt: str = "", *, query_clean=True,
                    trial_id="") -> TrialRecord:
    """One random perturbation, one query, no adaptation."""
    base = check_image(base, name="base")
    rng = np.random.default_rng(cfg.seed)
    rec = _new_record(cfg, "static", base, trial_id)
    scorer = None
    t0 = time.perf_counter()
    try:
        if query_clean:
            _reference_query(rec, base, oracle, prompt, cfg)
        scorer = _Scorer(base, cfg, oracle, prompt)
        delta = sample_initial_perturbation(base.shape, cfg.epsilon, rng)
        r = scorer(delta)
        resp = scorer.response(delta)
    except (OracleError, ResponseParseError) as exc:
        return _errored(rec, exc, scorer, t0)
    rec.iterations = 1
    rec.reward_trace.append(r)
    rec.confidence_trace.append(resp.confidence)
    return _finish(rec, base, delta, resp, scorer, t0)
