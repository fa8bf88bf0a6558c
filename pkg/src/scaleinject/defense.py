"""Multi-scale consistency check.

The image is resized at several (size, kernel) probes and each variant is
sent to the model. A scaling attack usually only fires for the resize it was
built for, so the labels disagree across probes. Divergence is

    1 - (size of the largest label-agreeing group) / (number of probes)

and the image is flagged when divergence exceeds the threshold.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import OracleError, PartialResultError, ResponseParseError
from .imaging import BICUBIC, BILINEAR, ResampleMethod, downscale
from .validation import check_image, check_scalar

DEFAULT_THRESHOLD = 0.34


@dataclass
class ProbeResult:
    dims: tuple
    method: str
    label: str
    confidence: float


@dataclass
class ConsistencyVerdict:
    verdict: str  # "consistent" | "suspicious"
    divergence: float
    probes: list = field(default_factory=list)

    @property
    def suspicious(self) -> bool:
        return self.verdict == "suspicious"

    def to_dict(self):
        d = asdict(self)
        for p in d["probes"]:
            p["dims"] = list(p["dims"])
        return d


def default_probes(attack_dims, image_dims=None):
    """Attack size with bilinear and bicubic, plus twice the attack size with bilinear.

    Labels are usually binary, so three probes can disagree by at most 1/3 and
    never exceed the default threshold. A payload visible through a single
    kernel is flagged by a two-probe set such as
    ``[(dims, attack_kernel), (dims, "bilinear")]``.
    """
    h, w = attack_dims
    double = (2 * h, 2 * w)
    if image_dims is not None:
        double = (min(double[0], image_dims[0]), min(double[1], image_dims[1]))
    return [((h, w), BILINEAR), ((h, w), BICUBIC), (double, BILINEAR)]


def label_divergence(labels) -> float:
    if not labels:
        raise ValueError("no labels")
    top = Counter(labels).most_common(1)[0][1]
    return 1.0 - top / len(labels)


def multiscale_check(image, probes, oracle, prompt="", threshold=DEFAULT_THRESHOLD,
                     workers=1) -> ConsistencyVerdict:
    """Query ``oracle`` on every probe of ``image`` and compare the labels.

    Raises :class:`PartialResultError` (with the finished probes attached)
    when the oracle fails on any probe.
    """
    img = check_image(image)
    probes = [(tuple(int(v) for v in dims), ResampleMethod.parse(m)) for dims, m in probes]
    if len(probes) < 2:
        raise ValueError("the consistency check needs at least two probes")
    check_scalar(threshold, "threshold", min_val=0.0)

    def run(probe):
        (h, w), method = probe
        variant = img if (h, w) == img.shape[:2] else downscale(img, h, w, method)
        resp = oracle.query(variant, prompt)
        return ProbeResult((h, w), str(method), resp.predicted_label, resp.confidence)

    results = [None] * len(probes)
    errors = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(run, p) for p in probes]
        for i, fut in enumerate(futures):
            try:
                results[i] = fut.result()
            except (OracleError, ResponseParseError) as exc:
                errors.append(exc)
    if errors:
        done = [r for r in results if r is not None]
        raise PartialResultError(
            f"{len(errors)} of {len(probes)} probes failed: {errors[0]}", done
        ) from errors[0]

    div = label_divergence([r.label for r in results])
    verdict = "suspicious" if div > threshold else "consistent"
    return ConsistencyVerdict(verdict, div, results)


class MultiScaleConsistencyDetector(BaseEstimator):
    """Estimator wrapper around :func:`multiscale_check`.

    ``predict`` returns 1 for suspicious images and 0 otherwise;
    ``decision_function`` returns the divergence.

    Parameters
    ----------
    oracle : object with ``query(image, prompt)``
    probes : list of ``((h, w), method)``, default None
        None uses :func:`default_probes` around ``attack_dims``.
    attack_dims : tuple, default None
        Output size the victim pipeline resizes to. Needed when ``probes`` is None.
    threshold : float, default 0.34
    prompt : str, default ""
    """

    def __init__(self, oracle=None, probes=None, attack_dims=None,
                 threshold=DEFAULT_THRESHOLD, prompt="", workers=1):
        self.oracle = oracle
        self.probes = probes
        self.attack_dims = attack_dims
        self.threshold = threshold
        self.prompt = prompt
        self.workers = workers

    def fit(self, X=None, y=None):
        if self.oracle is None:
            raise ValueError("an oracle is required")
        if self.probes is None and self.attack_dims is None:
            raise ValueError("set either probes or attack_dims")
        self.n_probes_ = len(self.probes) if self.probes is not None else 3
        return self

    def _probes_for(self, img):
        if self.probes is not None:
            return self.probes
        return default_probes(self.attack_dims, img.shape[:2])

    def check(self, image) -> ConsistencyVerdict:
        img = check_image(image)
        return multiscale_check(img, self._probes_for(img), self.oracle, self.prompt,
                                self.threshold, self.workers)

    def _images(self, X):
        arr = np.asarray(X, dtype=np.float64) if not isinstance(X, list) else None
        if arr is not None and arr.ndim == 3:
            return [arr]
        return list(X)

    def decision_function(self, X):
        return np.array([self.check(img).divergence for img in self._images(X)])

    def predict(self, X):
        return (self.decision_function(X) > self.threshold).astype(int)
