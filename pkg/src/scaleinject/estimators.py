"""scikit-learn style wrappers so attacks compose with pipelines and grid tools."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .imaging import apply_perturbation
from .optimize import (
    AttackConfig, GaConfig, HillClimbConfig, RewardWeights, run_attack, static_baseline,
)
from .payload import EmbedSpec, embed_payload, render_text
from .validation import check_image, check_same_shape


class PayloadEmbedder(TransformerMixin, BaseEstimator):
    """Hide a low-resolution payload in a source image.

    Give either ``payload`` (an ``(h, w, 3)`` array) or ``text``; text is
    rendered in the built-in 5x7 font at ``source / scale_factor`` size when
    the estimator is fitted.
    """

    def __init__(self, payload=None, text=None, scale_factor=4, method="bilinear",
                 max_deviation=255.0, tolerance=1.0):
        self.payload = payload
        self.text = text
        self.scale_factor = scale_factor
        self.method = method
        self.max_deviation = max_deviation
        self.tolerance = tolerance

    def fit(self, X, y=None):
        img = check_image(X)
        if (self.payload is None) == (self.text is None):
            raise ValueError("give exactly one of payload or text")
        H, W = img.shape[:2]
        f = self.scale_factor
        if H % f or W % f:
            raise ValueError(f"image size {(H, W)} is not a multiple of scale_factor {f}")
        if self.text is not None:
            self.payload_ = render_text(self.text, (H // f, W // f))
        else:
            self.payload_ = check_image(self.payload, name="payload")
        self.source_shape_ = img.shape
        return self

    def transform(self, X):
        check_is_fitted(self, "payload_")
        spec = EmbedSpec(self.payload_, self.scale_factor, self.method, self.max_deviation)
        return embed_payload(X, spec, tolerance=self.tolerance)


class AdaptiveScalingAttack(TransformerMixin, BaseEstimator):
    """Feedback-driven perturbation search against a black-box oracle.

    ``fit(image)`` runs the attack and stores ``record_`` (a
    :class:`~scaleinject.optimize.TrialRecord`), ``perturbation_`` and
    ``adversarial_``. ``transform`` applies the learned perturbation to an
    image of the same shape.

    Parameters
    ----------
    oracle : object with ``query(image, prompt)``
    prompt : str
    optimizer : {"hc", "ga", "static"}
    epsilon : float
        Perturbation budget in normalized units.
    max_iterations : int
    step_size, proposals_per_iter, density : hill-climbing settings
    population, mutation_sigma, elitism, tournament_size : GA settings
    w1, w2, w3 : reward weights
    out_shape : tuple or None
        Output size of the attacked resize. Enables kernel-aware proposals.
    method : str
        Kernel of the attacked resize.
    success_rule : SuccessRule or None
    query_clean : bool
        Also query the clean image once for DMR bookkeeping.
    random_state : int or None
    """

    def __init__(self, oracle=None, prompt="", optimizer="hc", epsilon=0.02,
                 max_iterations=50, step_size=0.01, proposals_per_iter=1, density=0.3,
                 population=20, mutation_sigma=None, elitism=2, tournament_size=3,
                 w1=10.0, w2=0.5, w3=0.2, out_shape=None, method="bilinear",
                 success_rule=None, query_clean=True, random_state=None):
        self.oracle = oracle
        self.prompt = prompt
        self.optimizer = optimizer
        self.epsilon = epsilon
        self.max_iterations = max_iterations
        self.step_size = step_size
        self.proposals_per_iter = proposals_per_iter
        self.density = density
        self.population = population
        self.mutation_sigma = mutation_sigma
        self.elitism = elitism
        self.tournament_size = tournament_size
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.out_shape = out_shape
        self.method = method
        self.success_rule = success_rule
        self.query_clean = query_clean
        self.random_state = random_state

    def make_config(self) -> AttackConfig:
        if self.optimizer == "ga":
            opt = GaConfig(self.population, self.mutation_sigma, self.elitism, self.tournament_size)
        elif self.optimizer in ("hc", "static"):
            opt = HillClimbConfig(self.step_size, self.proposals_per_iter, self.density)
        else:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return AttackConfig(
            epsilon=self.epsilon,
            max_iterations=self.max_iterations,
            weights=RewardWeights(self.w1, self.w2, self.w3),
            optimizer=opt,
            seed=self.random_state,
            success_rule=self.success_rule,
            out_shape=tuple(self.out_shape) if self.out_shape is not None else None,
            method=self.method,
        )

    def fit(self, X, y=None):
        if self.oracle is None:
            raise ValueError("an oracle is required")
        img = check_image(X)
        cfg = self.make_config()
        if self.optimizer == "static":
            rec = static_baseline(img, cfg, self.oracle, self.prompt, query_clean=self.query_clean)
        else:
            rec = run_attack(img, cfg, self.oracle, self.prompt, query_clean=self.query_clean)
        self.record_ = rec
        if rec.errored:
            self.perturbation_ = np.zeros_like(img)
        else:
            self.perturbation_ = rec.perturbation
        self.adversarial_ = apply_perturbation(img, self.perturbation_)
        self.success_ = rec.success
        return self

    def transform(self, X):
        check_is_fitted(self, "perturbation_")
        img = check_image(X)
        check_same_shape(img, self.perturbation_, ("image", "perturbation"))
        return apply_perturbation(img, self.perturbation_)
