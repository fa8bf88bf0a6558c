"""Adaptive image-scaling prompt-injection attacks, metrics and a multi-scale defense."""

from .defense import (
    ConsistencyVerdict, MultiScaleConsistencyDetector, default_probes, label_divergence,
    multiscale_check,
)
from .estimators import AdaptiveScalingAttack, PayloadEmbedder
from .exceptions import (
    ConfigError, InfeasibleEmbeddingError, OracleError, PartialResultError, RateLimitError,
    ResponseParseError, ScaleInjectError, ShapeMismatchError,
)
from .experiment import PROMPT_TEMPLATES, ExperimentPlan, load_plan, report, run_plan
from .imaging import (
    BICUBIC, BILINEAR, NEAREST, ResampleMethod, apply_perturbation, downscale, visual_distance,
)
from .metrics import asr, convergence_stats, distance_stats, dmr_and_confidence, summarize
from .optimize import (
    AttackConfig, GaConfig, HillClimbConfig, RewardWeights, TrialRecord, reward, run_attack,
    static_baseline,
)
from .oracle import (
    HttpOracle, MockOracle, MockOracleSpec, OracleResponse, RateLimiter, SuccessRule,
    encode_request, parse_response,
)
from .payload import EmbedSpec, embed_payload, render_text, sample_initial_perturbation

__version__ = "0.1.0"
