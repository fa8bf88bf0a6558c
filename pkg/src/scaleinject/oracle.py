"""Black-box access to the target model.

Two backends share one ``query(image, prompt) -> OracleResponse`` surface:

* :class:`MockOracle`, a deterministic local stand-in that resizes the image
  like a VLM front-end and scores it against a stencil.
* :class:`HttpOracle`, a rate-limited JSON-over-HTTP client.

Wire format (request body, UTF-8 JSON, keys in this order)::

    {"prompt": <string>, "image_png_b64": <base64 of 8-bit RGB PNG>}

Replies are plain text or ``{"text": <string>}``.
"""

from __future__ import annotations

import base64
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import OracleError, RateLimitError, ResponseParseError
from .imaging import BILINEAR, ResampleMethod, downscale, png_bytes
from .validation import check_image

CONFIDENCE_FALLBACK = 0.5
_CONFIDENCE_RE = re.compile(r"confidence\s*[:=]\s*([-+]?\d*\.?\d+)\s*(%?)", re.IGNORECASE)


@dataclass
class OracleResponse:
    confidence: float
    predicted_label: str
    success: bool
    raw_text: str
    latency: float = 0.0
    confidence_fallback: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class SuccessRule:
    """How the binary success signal is read off a reply.

    ``mode`` is ``"label_equals"`` (case-insensitive match on the predicted
    label) or ``"text_contains"`` (case-sensitive substring of the raw text).
    """

    mode: str
    value: str

    def __post_init__(self):
        if self.mode not in ("label_equals", "text_contains"):
            raise ValueError(f"unknown success rule mode {self.mode!r}")
        if not self.value:
            raise ValueError("success rule needs a non-empty label or marker")

    @classmethod
    def label_equals(cls, label):
        return cls("label_equals", label)

    @classmethod
    def text_contains(cls, marker):
        return cls("text_contains", marker)

    def matches(self, raw_text: str, label: str) -> bool:
        if self.mode == "label_equals":
            return label.strip().lower() == self.value.strip().lower()
        return self.value in raw_text


def parse_response(raw, rule: SuccessRule, latency: float = 0.0) -> OracleResponse:
    """Extract label, confidence and success from a model reply.

    The label is the first non-empty line. Confidence comes from a
    ``confidence: X`` pattern (``X`` in [0, 1] or a percentage) and falls back
    to 0.5 with ``confidence_fallback`` set when absent.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    text = raw if raw is not None else ""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            payload = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ResponseParseError(f"malformed JSON reply: {exc}", raw) from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ResponseParseError("JSON reply lacks a string 'text' field", raw)
        text = payload["text"]
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ResponseParseError("empty reply", raw)
    label = lines[0]

    match = _CONFIDENCE_RE.search(text)
    fallback = match is None
    if fallback:
        confidence = CONFIDENCE_FALLBACK
    else:
        confidence = float(match.group(1))
        if match.group(2) == "%" or confidence > 1.0:
            confidence /= 100.0
        confidence = min(max(confidence, 0.0), 1.0)
    return OracleResponse(
        confidence=confidence,
        predicted_label=label,
        success=rule.matches(text, label),
        raw_text=text,
        latency=latency,
        confidence_fallback=fallback,
    )


def encode_request(image, prompt: str) -> bytes:
    """Serialize an image + prompt into the JSON request body."""
    b64 = base64.b64encode(png_bytes(image)).decode("ascii")
    body = {"prompt": prompt, "image_png_b64": b64}
    return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_request(body: bytes):
    """Inverse of :func:`encode_request`; returns ``(png_bytes, prompt)``."""
    payload = json.loads(body.decode("utf-8"))
    return base64.b64decode(payload["image_png_b64"]), payload["prompt"]


# --------------------------------------------------------------------------
# mock oracle
# --------------------------------------------------------------------------

def _logistic(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def centered_cosine(a, b) -> float:
    """Cosine similarity of mean-centered arrays; 0 when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class MockOracleSpec:
    """Stand-in VLM: resize to the stencil's size, compare, answer.

    Confidence is a logistic in ``sharpness * (similarity - threshold)``,
    affinely rescaled so that similarity -1 maps to 0 and +1 maps to 1.
    Success is ``similarity >= threshold``.
    """

    stencil: np.ndarray
    method: ResampleMethod = BILINEAR
    threshold: float = 0.8
    sharpness: float = 10.0
    target_label: str = "payload"
    benign_label: str = "benign"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.sharpness > 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")

    @property
    def dims(self):
        return tuple(np.shape(self.stencil)[:2])


class MockOracle:
    """Deterministic, thread-safe local oracle."""

    def __init__(self, spec: MockOracleSpec):
        self.spec = spec
        self._stencil = check_image(spec.stencil, name="stencil")
        self.calls = 0
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def similarity(self, image) -> float:
        h, w = self.spec.dims
        seen = downscale(image, h, w, self.spec.method)
        return centered_cosine(seen, self._stencil)

    def confidence_from_similarity(self, sim: float) -> float:
        k, thr = self.spec.sharpness, self.spec.threshold
        lo, hi = _logistic(k * (-1.0 - thr)), _logistic(k * (1.0 - thr))
        return min(max((_logistic(k * (sim - thr)) - lo) / (hi - lo), 0.0), 1.0)

    def query(self, image, prompt: str = "") -> OracleResponse:
        img = check_image(image)
        with self._lock:
            self.calls += 1
        sim = self.similarity(img)
        conf = self.confidence_from_similarity(sim)
        success = sim >= self.spec.threshold
        label = self.spec.target_label if success else self.spec.benign_label
        return OracleResponse(
            confidence=conf,
            predicted_label=label,
            success=success,
            raw_text=f"{label}\nconfidence: {conf:.6f}",
        )


# --------------------------------------------------------------------------
# HTTP oracle
# --------------------------------------------------------------------------

class RateLimiter:
    """Enforces a minimum spacing between dispatches on an injectable clock."""

    def __init__(self, min_interval: float = 1.0, clock=time.monotonic, sleep=time.sleep):
        if min_interval < 0:
            raise ValueError("min_interval must be non-negative")
        self.min_interval = min_interval
        self.clock = clock
        self.sleep = sleep
        self._last = None
        self._lock = threading.Lock()
        self.dispatch_times = []

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a dispatch is allowed; returns the dispatch timestamp."""
        with self._lock:
            now = self.clock()
            if self._last is not None:
                target = self._last + self.min_interval
                # sleep can return early, so re-check the clock
                while now < target:
                    self.sleep(target - now)
                    now = self.clock()
            self._last = now
            self.dispatch_times.append(now)
            return now


@dataclass
class HttpResult:
    status: int
    text: str


class RequestsTransport:
    """POSTs bytes with the ``requests`` library."""

    def __init__(self, session=None):
        import requests

        self.session = session or requests.Session()

    def post(self, url, body, headers, timeout):
        import requests

        try:
            r = self.session.post(url, data=body, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            raise OracleError(f"transport failure: {exc}") from exc
        return HttpResult(r.status_code, r.text)


THROTTLE_STATUSES = (429, 503)


@dataclass
class HttpOracle:
    """Rate-limited client for a remote model speaking the documented wire format.

    ``base_url`` and ``api_key`` default to ``SCALEINJECT_BASE_URL`` and
    ``SCALEINJECT_API_KEY``.
    """

    rule: SuccessRule
    base_url: str | None = None
    path: str = "/v1/analyze"
    api_key: str | None = None
    timeout: float = 60.0
    retry_cap: int = 3
    backoff_base: float = 1.0
    limiter: RateLimiter = field(default_factory=RateLimiter)
    transport: object = None
    retries: int = 0
    calls: int = 0

    def __post_init__(self):
        self.base_url = self.base_url or os.environ.get("SCALEINJECT_BASE_URL")
        self.api_key = self.api_key or os.environ.get("SCALEINJECT_API_KEY")
        if self.transport is None:
            self.transport = RequestsTransport()
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def url(self):
        if not self.base_url:
            raise OracleError("no base URL configured (set SCALEINJECT_BASE_URL)")
        return self.base_url.rstrip("/") + "/" + self.path.lstrip("/")

    def rate_limited_send(self, body: bytes) -> str:
        """Send with spacing and exponential backoff on throttle replies.

        Makes at most ``retry_cap + 1`` attempts.
        """
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        attempts = 0
        while True:
            self.limiter.acquire()
            attempts += 1
            with self._lock:
                self.calls += 1
            result = self.transport.post(self.url, body, headers, self.timeout)
            if result.status in THROTTLE_STATUSES:
                if attempts > self.retry_cap:
                    raise RateLimitError(
                        f"still throttled after {attempts} attempts", attempts=attempts
                    )
                with self._lock:
                    self.retries += 1
                self.limiter.sleep(self.backoff_base * 2 ** (attempts - 1))
                continue
            if result.status >= 400:
                raise OracleError(f"HTTP {result.status}: {result.text[:200]}")
            return result.text

    def query(self, image, prompt: str = "") -> OracleResponse:
        body = encode_request(check_image(image), prompt)
        t0 = time.perf_counter()
        raw = self.rate_limited_send(body)
        return parse_response(raw, self.rule, latency=time.perf_counter() - t0)
