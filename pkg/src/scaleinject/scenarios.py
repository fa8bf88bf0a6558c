"""Seeded desk-scale attack scenario against the mock oracle.

Each seed yields a 64x64 base image carrying a weak bilinear embedding of a
random 8x8 two-tone stencil. The embedding strength is tuned per seed so the
clean image scores a stencil similarity in ``[0.76, 0.79)``, just under the
oracle threshold of 0.8: a static random perturbation does not cross it, an
adaptive attack within the default budget can.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import BILINEAR
from .oracle import MockOracle, MockOracleSpec
from .optimize import AttackConfig, GaConfig, HillClimbConfig
from .payload import EmbedSpec, embed_payload

BASE_SIZE = 64
STENCIL_SIZE = 8
THRESHOLD = 0.8
SHARPNESS = 10.0
TEXTURE_CONTRAST = 16.0
CLEAN_SIMILARITY = (0.76, 0.79)


@dataclass
class Scenario:
    base: np.ndarray
    stencil: np.ndarray
    oracle_spec: MockOracleSpec
    clean_similarity: float

    def oracle(self) -> MockOracle:
        return MockOracle(self.oracle_spec)


def random_stencil(rng, size=STENCIL_SIZE, lo=96.0, hi=160.0):
    bits = rng.uniform(size=(size, size, 1)) > 0.5
    return np.repeat(np.where(bits, hi, lo), 3, axis=2)


def make_scenario(seed: int, *, size=BASE_SIZE, stencil_size=STENCIL_SIZE,
                  threshold=THRESHOLD, sharpness=SHARPNESS, method=BILINEAR,
                  clean_similarity=CLEAN_SIMILARITY) -> Scenario:
    rng = np.random.default_rng([seed, 0x5CA1E])
    factor = size // stencil_size
    stencil = random_stencil(rng, stencil_size)
    blocks = rng.normal(0.0, 1.0, size=(stencil_size, stencil_size, 3))
    texture = 128.0 + TEXTURE_CONTRAST * np.kron(blocks, np.ones((factor, factor, 1)))
    texture = np.clip(texture + rng.normal(0.0, 3.0, size=texture.shape), 0.0, 255.0)
    full = embed_payload(texture, EmbedSpec(stencil, factor, method), tolerance=None)

    spec = MockOracleSpec(stencil, method, threshold, sharpness)
    oracle = MockOracle(spec)
    target = rng.uniform(*clean_similarity)
    lo, hi = 0.0, 1.0
    # similarity grows monotonically with the blend toward the full embedding
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if oracle.similarity(texture + mid * (full - texture)) < target:
            lo = mid
        else:
            hi = mid
    base = texture + lo * (full - texture)
    return Scenario(base, stencil, spec, oracle.similarity(base))


def scenario_config(seed: int, optimizer="hc", **overrides) -> AttackConfig:
    """Attack settings paired with :func:`make_scenario` (default budget)."""
    if optimizer == "ga":
        opt = GaConfig()
    else:
        opt = HillClimbConfig(step_size=0.01, proposals_per_iter=2, density=0.3)
    kw = dict(seed=seed, optimizer=opt, out_shape=(STENCIL_SIZE, STENCIL_SIZE), method=BILINEAR)
    kw.update(overrides)
    return AttackConfig(**kw)
