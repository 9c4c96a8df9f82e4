"""Builtin token-level features used by the bundled experiments.

``contains_token`` and ``majority_of_pair`` are binary; ``count_fraction`` is
a smoothed occupancy score in (0, 1), imitating a soft classifier probability
so its log stays finite everywhere (required by the choice-model reward).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .targets import FeatureFn

__all__ = [
    "contains_token",
    "count_fraction",
    "majority_of_pair",
    "prefix_match",
    "parse_feature",
]


def contains_token(t: int) -> FeatureFn:
    def fn(tokens):
        return 1.0 if t in tokens else 0.0

    def matrix_fn(mat):
        return (mat == t).any(axis=1).astype(np.float64)

    return FeatureFn(f"contains_token:{t}", fn, matrix_fn)


def count_fraction(t: int) -> FeatureFn:
    """(count(t) + 1/2) / (length + 1): strictly inside (0, 1)."""

    def fn(tokens):
        return (sum(1 for x in tokens if x == t) + 0.5) / (len(tokens) + 1)

    def matrix_fn(mat):
        return ((mat == t).sum(axis=1) + 0.5) / (mat.shape[1] + 1)

    return FeatureFn(f"count_fraction:{t}", fn, matrix_fn)


def majority_of_pair(t1: int, t2: int) -> FeatureFn:
    """1 iff t1 occurs strictly more often than t2."""

    def fn(tokens):
        c1 = sum(1 for x in tokens if x == t1)
        c2 = sum(1 for x in tokens if x == t2)
        return 1.0 if c1 > c2 else 0.0

    def matrix_fn(mat):
        return ((mat == t1).sum(axis=1) > (mat == t2).sum(axis=1)).astype(np.float64)

    return FeatureFn(f"majority_of_pair:{t1},{t2}", fn, matrix_fn)


def prefix_match(prefix: tuple[int, ...]) -> FeatureFn:
    prefix = tuple(int(t) for t in prefix)

    def fn(tokens):
        return 1.0 if tuple(tokens[: len(prefix)]) == prefix else 0.0

    def matrix_fn(mat):
        ok = np.ones(mat.shape[0], dtype=bool)
        for j, t in enumerate(prefix):
            ok &= mat[:, j] == t
        return ok.astype(np.float64)

    name = "prefix_match:" + ",".join(str(t) for t in prefix)
    return FeatureFn(name, fn, matrix_fn)


def parse_feature(spec: str) -> FeatureFn:
    """Parse declarations like ``contains_token:3`` or ``majority_of_pair:1,2``."""
    kind, _, args = spec.strip().partition(":")
    values = [int(a) for a in args.split(",") if a != ""] if args else []
    try:
        if kind == "contains_token":
            (t,) = values
            return contains_token(t)
        if kind == "count_fraction":
            (t,) = values
            return count_fraction(t)
        if kind == "majority_of_pair":
            t1, t2 = values
            return majority_of_pair(t1, t2)
        if kind == "prefix_match":
            if not values:
                raise ValueError("prefix required")
            return prefix_match(tuple(values))
    except ValueError as exc:
        raise ValidationError(f"bad feature arguments in {spec!r}: {exc}") from exc
    raise ValidationError(f"unknown feature kind {kind!r}")
