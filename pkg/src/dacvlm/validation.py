"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .autodiff import DimensionError
from .patch_embed import ImageInput
from .synth import KINDS, Sample


def check_image(x) -> ImageInput:
    """Coerce an ``ImageInput`` or a ``3 x H x W`` array into an ``ImageInput``."""
    if isinstance(x, ImageInput):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return ImageInput(arr)


def check_images(X) -> List[ImageInput]:
    if isinstance(X, ImageInput) or (isinstance(X, np.ndarray) and X.ndim == 3):
        X = [X]
    images = [check_image(x) for x in X]
    if not images:
        raise ValueError("no images given")
    return images


def check_samples(X, kinds: Sequence[str] = KINDS) -> List[Sample]:
    samples = list(X)
    if not samples:
        raise ValueError("empty sample collection")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected Sample")
        if s.kind not in kinds:
            raise ValueError(f"item {i} has kind {s.kind!r}, allowed: {list(kinds)}")
    return samples


def check_positive_int(value, name: str, allow_zero: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return int(value)


def check_choice(value, name: str, choices: Sequence) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {list(choices)}, got {value!r}")
    return value
