"""Unnormalized target distributions built from a base policy and preferences.

A target scores sequences via ``log P(x)``; minus infinity marks hard
constraint violations.  On enumerable spaces the exact log partition function
is computed at construction, so the normalized target ``p = P / Z`` is always
available to exact oracles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .divergence import FiniteDistribution
from .errors import (
    CapacityError,
    DegenerateTargetError,
    InfeasibleMomentError,
    MomentFitError,
    UnknownContextError,
    ValidationError,
)
from .policy import SequenceSpace

__all__ = [
    "FeatureFn",
    "TargetKind",
    "TargetModel",
    "MomentSpec",
    "ConditionalTask",
    "gdc_binary_target",
    "rlkl_target",
    "gdc_dist_target",
    "fit_lambda",
    "reward_from_choice_model",
    "conditional_target",
    "exact_log_partition",
]

NEG_INF = float("-inf")


@dataclass
class FeatureFn:
    """A deterministic map from sequences to reals (binary features in {0,1})."""

    name: str
    fn: Callable[[tuple], float]
    matrix_fn: Callable[[np.ndarray], np.ndarray] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __call__(self, tokens) -> float:
        return float(self.fn(tuple(int(t) for t in tokens)))

    def values(self, space: SequenceSpace) -> np.ndarray:
        """Dense evaluation over the enumerated space, cached per space."""
        if space not in self._cache:
            mat = space.token_matrix()
            if self.matrix_fn is not None:
                vals = np.asarray(self.matrix_fn(mat), dtype=np.float64)
            else:
                vals = np.fromiter(
                    (self.fn(tuple(row)) for row in mat.tolist()),
                    dtype=np.float64,
                    count=mat.shape[0],
                )
            vals.setflags(write=False)
            self._cache[space] = vals
        return self._cache[space]


class TargetKind(enum.Enum):
    GDC_BINARY = "gdc-binary"
    RLKL = "rlkl"
    GDC_DISTRIBUTIONAL = "gdc-dist"
    CONDITIONAL = "conditional"


@dataclass(frozen=True)
class TargetModel:
    """An unnormalized score P over a sequence space, plus its exact log Z."""

    base: object
    space: SequenceSpace
    kind: TargetKind
    log_scores: np.ndarray | None = None
    score_fn: Callable[[tuple], float] | None = None
    exact_log_z: float | None = None

    def log_score(self, tokens) -> float:
        if self.log_scores is not None:
            return float(self.log_scores[self.space.index(tokens)])
        return float(self.score_fn(tuple(int(t) for t in tokens)))

    def log_scores_of_indices(self, indices: np.ndarray) -> np.ndarray:
        if self.log_scores is not None:
            return self.log_scores[indices]
        return np.asarray(
            [self.score_fn(self.space.sequence_at(int(i))) for i in indices]
        )

    def exact_distribution(self) -> FiniteDistribution:
        if self.log_scores is None or self.exact_log_z is None:
            raise CapacityError("target space is not enumerated")
        mass = np.exp(self.log_scores - self.exact_log_z)
        mass = np.where(np.isfinite(self.log_scores), mass, 0.0)
        return FiniteDistribution(range(self.space.size), mass / mass.sum())


def _logsumexp(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return NEG_INF
    m = finite.max()
    return float(m + np.log(np.exp(finite - m).sum()))


def _finalize(base, space, kind, log_scores) -> TargetModel:
    if not np.any(np.isfinite(log_scores)):
        raise DegenerateTargetError("target has empty support")
    log_z = _logsumexp(log_scores)
    return TargetModel(base, space, kind, log_scores, None, log_z)


def gdc_binary_target(a, b: FeatureFn) -> TargetModel:
    """P(x) = a(x) when b(x) = 1 and 0 otherwise."""
    space = a.space
    vals = b.values(space)
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ValidationError(f"feature {b.name} is not binary")
    log_a = a.all_log_probs()
    log_scores = np.where(vals == 1.0, log_a, NEG_INF)
    return _finalize(a, space, TargetKind.GDC_BINARY, log_scores)


def rlkl_target(a, r: FeatureFn, beta: float) -> TargetModel:
    """P(x) = a(x) exp(r(x) / beta); full support wherever a has support."""
    if beta <= 0.0:
        raise ValidationError("beta must be positive")
    space = a.space
    log_scores = a.all_log_probs() + r.values(space) / beta
    return _finalize(a, space, TargetKind.RLKL, log_scores)


def gdc_dist_target(a, lambdas: Sequence[tuple[FeatureFn, float]]) -> TargetModel:
    """P(x) = a(x) exp(sum_i lambda_i phi_i(x))."""
    space = a.space
    log_scores = a.all_log_probs().copy()
    for phi, lam in lambdas:
        log_scores += lam * phi.values(space)
    return _finalize(a, space, TargetKind.GDC_DISTRIBUTIONAL, log_scores)


@dataclass(frozen=True)
class MomentSpec:
    feature: FeatureFn
    desired: float


def fit_lambda(
    a,
    specs: Sequence[MomentSpec],
    tol: float = 1e-6,
    max_iter: int = 200,
) -> list[float]:
    """Exponential-family coefficients matching the desired feature moments.

    Damped Newton iteration on exact expectations; the Jacobian of the moment
    map is the feature covariance under the tilted distribution.
    """
    space = a.space
    space.check_enumerable()
    log_a = a.all_log_probs()
    phi = np.stack([s.feature.values(space) for s in specs], axis=1)
    desired = np.asarray([s.desired for s in specs], dtype=np.float64)
    lo, hi = phi.min(axis=0), phi.max(axis=0)
    for i, s in enumerate(specs):
        if not lo[i] <= s.desired <= hi[i]:
            raise InfeasibleMomentError(
                f"desired moment {s.desired} for {s.feature.name} outside "
                f"achievable hull [{lo[i]}, {hi[i]}]"
            )

    lam = np.zeros(len(specs))

    def moments(l: np.ndarray) -> np.ndarray:
        w = log_a + phi @ l
        p = np.exp(w - _logsumexp(w))
        return p @ phi, p

    m, p = moments(lam)
    resid = m - desired
    for _ in range(max_iter):
        if np.max(np.abs(resid)) <= tol:
            return [float(v) for v in lam]
        cov = (phi * p[:, None]).T @ phi - np.outer(m, m)
        try:
            step = np.linalg.solve(cov, resid)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(cov, resid, rcond=None)[0]
        damp = 1.0
        best = np.max(np.abs(resid))
        while damp > 1e-10:
            trial = lam - damp * step
            m_t, p_t = moments(trial)
            if np.max(np.abs(m_t - desired)) < best:
                lam, m, p = trial, m_t, p_t
                resid = m - desired
                break
            damp *= 0.5
        else:
            break
    if np.max(np.abs(resid)) <= tol:
        return [float(v) for v in lam]
    raise MomentFitError(resid.tolist(), max_iter)


def reward_from_choice_model(phi: FeatureFn) -> FeatureFn:
    """r(x) = log phi(x): softmax of this reward recovers categorical choice
    with weights phi, so it is the exact reward for such a chooser."""

    def fn(tokens):
        v = phi.fn(tokens)
        if v <= 0.0:
            raise ValidationError(
                f"feature {phi.name} is {v} at {tokens}; the log-reward is "
                "-inf there, use a hard-constraint target instead"
            )
        return math.log(v)

    matrix_fn = None
    if phi.matrix_fn is not None:
        base_matrix = phi.matrix_fn

        def matrix_fn(mat):
            vals = np.asarray(base_matrix(mat), dtype=np.float64)
            if np.any(vals <= 0.0):
                raise ValidationError(
                    f"feature {phi.name} hits 0; the log-reward is -inf, "
                    "use a hard-constraint target instead"
                )
            return np.log(vals)

    return FeatureFn(f"log({phi.name})", fn, matrix_fn)


@dataclass(frozen=True)
class ConditionalTask:
    """Contexts, their distribution tau, and a binary scorer b(x, c)."""

    contexts: tuple
    context_dist: FiniteDistribution
    constraint: Callable[[tuple, object], int]

    def __post_init__(self):
        if self.context_dist.support != tuple(self.contexts):
            raise ValidationError("context distribution must cover the contexts")


def conditional_target(a, task: ConditionalTask, c) -> TargetModel:
    """The per-context hard-constraint target p_c over continuations of c."""
    if c not in task.contexts:
        raise UnknownContextError(c)
    base = a.policy_for(c) if hasattr(a, "policy_for") else a
    space = base.space
    mat = space.token_matrix()
    vals = np.fromiter(
        (float(task.constraint(tuple(row), c)) for row in mat.tolist()),
        dtype=np.float64,
        count=mat.shape[0],
    )
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ValidationError("conditional constraint is not binary")
    log_scores = np.where(vals == 1.0, base.all_log_probs(), NEG_INF)
    if not np.any(np.isfinite(log_scores)):
        raise DegenerateTargetError(f"no continuation satisfies the constraint at {c!r}")
    log_z = _logsumexp(log_scores)
    return TargetModel(base, space, TargetKind.CONDITIONAL, log_scores, None, log_z)


def exact_log_partition(t: TargetModel) -> float:
    """log sum_x P(x) over the enumerated space."""
    if t.exact_log_z is not None:
        return t.exact_log_z
    if t.log_scores is not None:
        return _logsumexp(t.log_scores)
    t.space.check_enumerable()
    values = np.fromiter(
        (t.score_fn(x) for x in t.space.enumerate()),
        dtype=np.float64,
        count=t.space.size,
    )
    return _logsumexp(values)
