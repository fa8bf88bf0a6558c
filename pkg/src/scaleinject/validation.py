"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np
from sklearn.utils import check_scalar as sk_check_scalar

from .exceptions import ShapeMismatchError


def check_image(img, *, name="image", allow_plane=False, copy=False):
    """Validate an intensity grid and return it as a float64 array.

    Images are ``(H, W, 3)`` arrays with values in ``[0, 255]``. When
    ``allow_plane`` is true a single ``(H, W)`` plane is accepted as well.
    """
    arr = np.array(img, dtype=np.float64) if copy else np.asarray(img, dtype=np.float64)
    if arr.ndim == 2 and allow_plane:
        pass
    elif arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive height and width, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 255.0:
        raise ValueError(f"{name} values must lie in [0, 255]")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(
            f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}"
        )


def check_scalar(value, name, *, min_val=None, max_val=None, include_min=True,
                 include_max=True, integer=False):
    """sklearn's ``check_scalar`` with bool rejection and a finiteness check."""
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool):
        raise TypeError(f"{name} must be {'an int' if integer else 'a real number'}, got {value!r}")
    # sklearn rejects an inclusive flag on a missing bound; mirror the given one
    if max_val is None:
        include_max = include_min
    if min_val is None:
        include_min = include_max
    bounds = {(True, True): "both", (True, False): "left",
              (False, True): "right", (False, False): "neither"}[(include_min, include_max)]
    sk_check_scalar(value, name, kind, min_val=min_val, max_val=max_val,
                    include_boundaries=bounds)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value
