"""Payload embedding and initial perturbation sampling.

The embedder edits a high-resolution source so that resizing it with a known
kernel reproduces a low-resolution payload. For every output pixel the source
pixels under its kernel support are moved along the kernel weights,

    x = clip(x_ref + t * w, lo, hi)

with ``t`` chosen so that ``w . x`` hits the payload value. This is the exact
minimum-norm correction under the box constraint ``[lo, hi]``, so heavily
weighted pixels absorb most of the change. Outputs whose supports overlap
(bicubic at factor 2) are handled by block Gauss-Seidel sweeps over classes
of mutually disjoint supports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InfeasibleEmbeddingError, ShapeMismatchError
from .imaging import BILINEAR, ResampleMethod, axis_weights, downscale, separable_apply
from .validation import check_image

_BISECT_STEPS = 90


@dataclass(frozen=True)
class EmbedSpec:
    """What to embed and how the victim pipeline will resize it.

    ``scale_factor`` is an int or an ``(rows, cols)`` pair of ints.
    ``max_deviation`` bounds the per-pixel change in intensity levels.
    """

    target_payload: np.ndarray
    scale_factor: int | tuple = 4
    method: ResampleMethod = BILINEAR
    max_deviation: float = 255.0

    def factors(self):
        f = self.scale_factor
        fh, fw = (f, f) if np.isscalar(f) else tuple(f)
        for v in (fh, fw):
            if isinstance(v, (bool, np.bool_)) or int(v) != v or v < 1:
                raise ValueError(f"scale factors must be positive integers, got {f!r}")
        return int(fh), int(fw)


def _axis_taps(n_in, n_out, method):
    """Padded tap indices/weights per output index plus the class stride.

    Padding entries point at index ``n_in`` (a scratch row) with weight 0.
    """
    A = axis_weights(n_in, n_out, method)
    supports = [np.flatnonzero(A[r]) for r in range(n_out)]
    T = max(len(s) for s in supports)
    idx = np.full((n_out, T), n_in, dtype=np.int64)
    wts = np.zeros((n_out, T), dtype=np.float64)
    for r, s in enumerate(supports):
        idx[r, : len(s)] = s
        wts[r, : len(s)] = A[r, s]
    stride = 1
    while any(
        supports[r].max() >= supports[r + stride].min() for r in range(n_out - stride)
    ):
        stride += 1
    return idx, wts, stride


def _solve_blocks(x_ref, w, target, lo, hi):
    """Vectorized projection of each block onto ``{w . x = target}`` within the box.

    Shapes: ``x_ref, w, lo, hi`` are ``(B, K)``, ``target`` is ``(B,)``.
    Unreachable targets end on the box corner closest to them.
    """
    nz = np.abs(w[w != 0])
    t_max = 255.0 / nz.min() + 1.0 if nz.size else 1.0
    t_lo = np.full(target.shape, -t_max)
    t_hi = np.full(target.shape, t_max)
    for _ in range(_BISECT_STEPS):
        t = 0.5 * (t_lo + t_hi)
        val = np.einsum("bk,bk->b", w, np.clip(x_ref + t[:, None] * w, lo, hi))
        below = val < target
        t_lo = np.where(below, t, t_lo)
        t_hi = np.where(below, t_hi, t)
    t = 0.5 * (t_lo + t_hi)
    return np.clip(x_ref + t[:, None] * w, lo, hi)


def embed_payload(source, spec: EmbedSpec, *, tolerance: float | None = 1.0,
                  max_sweeps: int = 60) -> np.ndarray:
    """Return a copy of ``source`` whose downscale reproduces ``spec.target_payload``.

    Raises :class:`InfeasibleEmbeddingError` when the worst round-trip residual
    exceeds ``tolerance`` intensity levels (pass ``None`` to accept any result).
    """
    src = check_image(source, name="source")
    payload = check_image(spec.target_payload, name="payload")
    method = ResampleMethod.parse(spec.method)
    if not spec.max_deviation >= 0:
        raise ValueError(f"max_deviation must be >= 0, got {spec.max_deviation}")
    fh, fw = spec.factors()
    h, w = payload.shape[:2]
    H, W = src.shape[:2]
    if (h * fh, w * fw) != (H, W):
        raise ShapeMismatchError(
            f"payload {(h, w)} x factors {(fh, fw)} does not match source {(H, W)}"
        )

    # one scratch row/col absorbs writes from padded taps
    E = np.zeros((H + 1, W + 1, 3))
    E[:H, :W] = src
    lo_full = np.zeros_like(E)
    hi_full = np.zeros_like(E)
    lo_full[:H, :W] = np.maximum(src - spec.max_deviation, 0.0)
    hi_full[:H, :W] = np.minimum(src + spec.max_deviation, 255.0)

    ridx, rw, kh = _axis_taps(H, h, method)
    cidx, cw, kw = _axis_taps(W, w, method)
    Wh = axis_weights(H, h, method)
    Ww = axis_weights(W, w, method)

    def forward(img):
        return separable_apply(Wh, img[:H, :W], Ww)

    single = rw.shape[1] == 1 and cw.shape[1] == 1
    sweeps = 1 if (kh == 1 and kw == 1) else max_sweeps
    for _ in range(sweeps):
        for cr in range(kh):
            R = np.arange(cr, h, kh)
            for cc in range(kw):
                C = np.arange(cc, w, kw)
                if R.size == 0 or C.size == 0:
                    continue
                rows = ridx[R][:, :, None, None]
                cols = cidx[C][None, None, :, :]
                # (R, Th, C, Tw, 3) -> (R, C, 3, Th*Tw)
                def gather(a):
                    g = a[rows, cols]
                    return g.transpose(0, 2, 4, 1, 3).reshape(R.size, C.size, 3, -1)

                x_cur = gather(E)
                wblk = np.einsum("rt,cu->rctu", rw[R], cw[C]).reshape(R.size, C.size, 1, -1)
                wblk = np.broadcast_to(wblk, x_cur.shape)
                own = np.einsum("rcdk,rcdk->rcd", wblk, x_cur)
                others = forward(E)[np.ix_(R, C)] - own
                target = payload[np.ix_(R, C)] - others
                lo, hi = gather(lo_full), gather(hi_full)
                if single:
                    x_new = np.clip(target[..., None], lo, hi)
                else:
                    K = x_cur.shape[-1]
                    x_new = _solve_blocks(
                        x_cur.reshape(-1, K), wblk.reshape(-1, K), target.reshape(-1),
                        lo.reshape(-1, K), hi.reshape(-1, K),
                    ).reshape(x_cur.shape)
                Th, Tw = rw.shape[1], cw.shape[1]
                E[rows, cols] = x_new.reshape(R.size, C.size, 3, Th, Tw).transpose(0, 3, 1, 4, 2)
        if np.abs(forward(E) - payload).max() < 1e-9:
            break

    out = E[:H, :W].copy()
    if tolerance is not None:
        worst = float(np.abs(downscale(out, h, w, method) - payload).max())
        if worst > tolerance:
            raise InfeasibleEmbeddingError("payload not reachable within max_deviation", worst)
    return out


def sample_initial_perturbation(shape, epsilon: float, seed=None) -> np.ndarray:
    """Draw ``delta ~ U(-epsilon, epsilon)`` elementwise, reproducibly from ``seed``."""
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if epsilon == 0:
        return np.zeros(shape, dtype=np.float64)
    return rng.uniform(-epsilon, epsilon, size=shape)


# 5x7 bitmap font, one string of 7 rows x 5 columns per glyph.
_FONT_ROWS = {
    "A": "01110 10001 10001 11111 10001 10001 10001",
    "B": "11110 10001 10001 11110 10001 10001 11110",
    "C": "01110 10001 10000 10000 10000 10001 01110",
    "D": "11110 10001 10001 10001 10001 10001 11110",
    "E": "11111 10000 10000 11110 10000 10000 11111",
    "F": "11111 10000 10000 11110 10000 10000 10000",
    "G": "01110 10001 10000 10111 10001 10001 01111",
    "H": "10001 10001 10001 11111 10001 10001 10001",
    "I": "01110 00100 00100 00100 00100 00100 01110",
    "J": "00111 00010 00010 00010 00010 10010 01100",
    "K": "10001 10010 10100 11000 10100 10010 10001",
    "L": "10000 10000 10000 10000 10000 10000 11111",
    "M": "10001 11011 10101 10101 10001 10001 10001",
    "N": "10001 10001 11001 10101 10011 10001 10001",
    "O": "01110 10001 10001 10001 10001 10001 01110",
    "P": "11110 10001 10001 11110 10000 10000 10000",
    "Q": "01110 10001 10001 10001 10101 10010 01101",
    "R": "11110 10001 10001 11110 10100 10010 10001",
    "S": "01111 10000 10000 01110 00001 00001 11110",
    "T": "11111 00100 00100 00100 00100 00100 00100",
    "U": "10001 10001 10001 10001 10001 10001 01110",
    "V": "10001 10001 10001 10001 10001 01010 00100",
    "W": "10001 10001 10001 10101 10101 10101 01010",
    "X": "10001 10001 01010 00100 01010 10001 10001",
    "Y": "10001 10001 01010 00100 00100 00100 00100",
    "Z": "11111 00001 00010 00100 01000 10000 11111",
    "0": "01110 10001 10011 10101 11001 10001 01110",
    "1": "00100 01100 00100 00100 00100 00100 01110",
    "2": "01110 10001 00001 00010 00100 01000 11111",
    "3": "11111 00010 00100 00010 00001 10001 01110",
    "4": "00010 00110 01010 10010 11111 00010 00010",
    "5": "11111 10000 11110 00001 00001 10001 01110",
    "6": "00110 01000 10000 11110 10001 10001 01110",
    "7": "11111 00001 00010 00100 01000 01000 01000",
    "8": "01110 10001 10001 01110 10001 10001 01110",
    "9": "01110 10001 10001 01111 00001 00010 01100",
    " ": "00000 00000 00000 00000 00000 00000 00000",
    ".": "00000 00000 00000 00000 00000 01100 01100",
    ",": "00000 00000 00000 00000 01100 00100 01000",
    ":": "00000 01100 01100 00000 01100 01100 00000",
    "!": "00100 00100 00100 00100 00100 00000 00100",
    "?": "01110 10001 00001 00010 00100 00000 00100",
    "-": "00000 00000 00000 11111 00000 00000 00000",
    "'": "00100 00100 01000 00000 00000 00000 00000",
    "/": "00000 00001 00010 00100 01000 10000 00000",
}
FONT = {
    ch: np.array([[c == "1" for c in row] for row in rows.split()], dtype=bool)
    for ch, rows in _FONT_ROWS.items()
}


def text_mask(text: str, *, spacing: int = 1) -> np.ndarray:
    """Boolean ink mask of ``text`` in the built-in 5x7 font (unknown chars become '?')."""
    glyphs = [FONT.get(ch, FONT["?"]) for ch in text.upper()]
    if not glyphs:
        return np.zeros((7, 0), dtype=bool)
    gap = np.zeros((7, spacing), dtype=bool)
    parts = []
    for i, g in enumerate(glyphs):
        if i:
            parts.append(gap)
        parts.append(g)
    return np.hstack(parts)


def render_text(text: str, shape, *, ink=0.0, background=255.0) -> np.ndarray:
    """Render ``text`` centered in an ``(h, w)`` RGB payload at the largest integer zoom that fits."""
    h, w = shape
    mask = text_mask(text)
    mh, mw = mask.shape
    zoom = min(h // mh, w // mw) if mw else 0
    if zoom < 1:
        raise ValueError(f"text {text!r} needs at least {(mh, mw)} pixels, payload is {(h, w)}")
    big = np.kron(mask, np.ones((zoom, zoom), dtype=bool))
    out = np.full((h, w, 3), float(background))
    top, left = (h - big.shape[0]) // 2, (w - big.shape[1]) // 2
    region = out[top: top + big.shape[0], left: left + big.shape[1]]
    region[big] = float(ink)
    return out
