"""Generators of f-divergences and exact divergence evaluation.

A divergence ``D_f(p1||p2)`` is identified by a convex generator ``f`` on
(0, inf) with ``f(1) = 0``.  Values are computed in the support-aware form

    D_f(p1||p2) = sum_{p1>0, p2>0} p2 f(p1/p2)
                  + f(0) * p2{p1=0} + f'(inf) * p1{p2=0}

with the conventions ``0 * f(0) = 0`` and ``0 * f'(inf) = 0`` even when the
constants are infinite.  ``f'(inf)`` denotes the limit of ``t f(1/t)`` at 0,
which equals the value at 0 of the perspective transform ``f*(t) = t f(1/t)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InfinitePseudoRewardError, SupportMismatchError, ValidationError

__all__ = [
    "DivergenceKind",
    "ExtendedReal",
    "Generator",
    "FiniteDistribution",
    "make_generator",
    "perspective",
    "f_divergence_exact",
    "pseudo_reward",
]

LOG2 = math.log(2.0)


class DivergenceKind(enum.Enum):
    FORWARD_KL = "kl"
    REVERSE_KL = "rkl"
    TOTAL_VARIATION = "tv"
    JENSEN_SHANNON = "js"
    SQUARED_HELLINGER = "hellinger"
    CHI_SQUARED = "chi2"
    LE_CAM = "lecam"

    @classmethod
    def parse(cls, name: str) -> "DivergenceKind":
        for kind in cls:
            if kind.value == name or kind.name.lower() == name.lower():
                return kind
        raise ValidationError(
            f"unknown divergence kind {name!r}; expected one of "
            + ", ".join(k.value for k in cls)
        )

    @property
    def label(self) -> str:
        return _KIND_LABELS[self]


_KIND_LABELS: dict = {}


def display_name(g) -> str:
    """Human-readable divergence name for diagnostics."""
    if getattr(g, "kind", None) is not None:
        return g.kind.label
    return g.name


@dataclass(frozen=True)
class ExtendedReal:
    """A real number or an explicit +infinity marker.

    The marker is kept separate from float('inf') so that the 0 * inf = 0
    convention is applied by rule rather than by IEEE arithmetic.
    """

    value: float = 0.0
    is_inf: bool = False

    @staticmethod
    def of(value: float) -> "ExtendedReal":
        if math.isinf(value):
            if value < 0:
                raise ValidationError("extended reals here are bounded below")
            return ExtendedReal(0.0, True)
        return ExtendedReal(float(value), False)

    @staticmethod
    def infinity() -> "ExtendedReal":
        return ExtendedReal(0.0, True)

    @property
    def finite(self) -> bool:
        return not self.is_inf

    def to_float(self) -> float:
        return math.inf if self.is_inf else self.value

    def times_mass(self, mass: float) -> "ExtendedReal":
        """Multiply by a non-negative mass, with 0 * inf = 0."""
        if mass == 0.0:
            return ExtendedReal(0.0)
        if self.is_inf:
            return ExtendedReal.infinity()
        return ExtendedReal(self.value * mass)

    def __add__(self, other: "ExtendedReal") -> "ExtendedReal":
        if self.is_inf or other.is_inf:
            return ExtendedReal.infinity()
        return ExtendedReal(self.value + other.value)

    def __repr__(self) -> str:
        return "ExtendedReal(inf)" if self.is_inf else f"ExtendedReal({self.value!r})"


@dataclass(frozen=True)
class Generator:
    """The algebraic identity of one f-divergence.

    ``f`` and ``f_prime`` act on (0, inf) and accept scalars or numpy arrays;
    at non-differentiable points ``f_prime`` returns a fixed subgradient
    choice.  ``f_at_zero`` and ``f_prime_at_inf`` are the closed-form boundary
    constants, stored rather than computed numerically.
    """

    name: str
    f: Callable
    f_prime: Callable
    f_at_zero: ExtendedReal
    f_prime_at_inf: ExtendedReal
    kind: DivergenceKind | None = None

    def __repr__(self) -> str:
        return f"Generator({self.name})"


def _fkl_f(t):
    return -np.log(t)


def _fkl_fp(t):
    return -1.0 / np.asarray(t, dtype=np.float64)


def _rkl_f(t):
    return t * np.log(t)


def _rkl_fp(t):
    return np.log(t) + 1.0


def _tv_f(t):
    return 0.5 * np.abs(1.0 - np.asarray(t, dtype=np.float64))


def _tv_fp(t):
    # Subgradient at the kink t=1 fixed to the midpoint 0.
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > 1.0, 0.5, np.where(t < 1.0, -0.5, 0.0))


def _js_f(t):
    return t * np.log(2.0 * t / (t + 1.0)) + np.log(2.0 / (t + 1.0))


def _js_fp(t):
    return np.log(2.0 * t / (t + 1.0))


def _hel_f(t):
    return (1.0 - np.sqrt(t)) ** 2


def _hel_fp(t):
    return 1.0 - 1.0 / np.sqrt(t)


def _chi2_f(t):
    return (np.asarray(t, dtype=np.float64) - 1.0) ** 2


def _chi2_fp(t):
    return 2.0 * (np.asarray(t, dtype=np.float64) - 1.0)


def _lecam_f(t):
    return (1.0 - t) / (2.0 * t + 2.0)


def _lecam_fp(t):
    return -1.0 / (1.0 + np.asarray(t, dtype=np.float64)) ** 2


_TABLE = {
    DivergenceKind.FORWARD_KL: (_fkl_f, _fkl_fp, ExtendedReal.infinity(), ExtendedReal(0.0)),
    DivergenceKind.REVERSE_KL: (_rkl_f, _rkl_fp, ExtendedReal(0.0), ExtendedReal.infinity()),
    DivergenceKind.TOTAL_VARIATION: (_tv_f, _tv_fp, ExtendedReal(0.5), ExtendedReal(0.5)),
    DivergenceKind.JENSEN_SHANNON: (_js_f, _js_fp, ExtendedReal(LOG2), ExtendedReal(LOG2)),
    DivergenceKind.SQUARED_HELLINGER: (_hel_f, _hel_fp, ExtendedReal(1.0), ExtendedReal(1.0)),
    DivergenceKind.CHI_SQUARED: (_chi2_f, _chi2_fp, ExtendedReal(1.0), ExtendedReal.infinity()),
    DivergenceKind.LE_CAM: (_lecam_f, _lecam_fp, ExtendedReal(0.5), ExtendedReal(0.0)),
}

_KIND_LABELS.update(
    {
        DivergenceKind.FORWARD_KL: "forward KL",
        DivergenceKind.REVERSE_KL: "reverse KL",
        DivergenceKind.TOTAL_VARIATION: "total variation",
        DivergenceKind.JENSEN_SHANNON: "Jensen-Shannon",
        DivergenceKind.SQUARED_HELLINGER: "squared Hellinger",
        DivergenceKind.CHI_SQUARED: "chi-squared",
        DivergenceKind.LE_CAM: "Le Cam",
    }
)


def make_generator(kind: DivergenceKind | str) -> Generator:
    """Return the generator of one of the seven tabulated divergences.

    The convention is D_f(pi||p): forward KL means KL(p||pi) and uses
    f(t) = -log t; reverse KL means KL(pi||p) and uses f(t) = t log t.
    Total variation carries the 0.5|1-t| normalization.
    """
    if isinstance(kind, str):
        kind = DivergenceKind.parse(kind)
    f, fp, f0, fpinf = _TABLE[kind]
    return Generator(kind.value, f, fp, f0, fpinf, kind)


def perspective(g: Generator) -> Generator:
    """The perspective transform g*(t) = t g(1/t).

    Swaps divergence arguments: D_g(p||q) = D_{g*}(q||p).  Applying it twice
    recovers the original generator, and the boundary constants swap roles.
    """
    base_f = g.f
    base_fp = g.f_prime

    def star_f(t):
        return t * base_f(1.0 / t)

    def star_fp(t):
        u = 1.0 / t
        return base_f(u) - u * base_fp(u)

    name = g.name[:-1] if g.name.endswith("*") else g.name + "*"
    return Generator(name, star_f, star_fp, g.f_prime_at_inf, g.f_at_zero, None)


@dataclass(frozen=True)
class FiniteDistribution:
    """A probability distribution over an ordered finite support."""

    support: tuple
    mass: np.ndarray

    def __init__(self, support: Sequence, mass):
        mass = np.asarray(mass, dtype=np.float64)
        support = tuple(support)
        if len(support) != mass.shape[0]:
            raise ValidationError(
                f"support has {len(support)} points but mass has {mass.shape[0]}"
            )
        if mass.ndim != 1:
            raise ValidationError("mass must be one-dimensional")
        if np.any(mass < 0.0):
            raise ValidationError("negative mass")
        total = math.fsum(mass.tolist())
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"masses sum to {total!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)
        self.mass.setflags(write=False)

    def __len__(self) -> int:
        return len(self.support)

    @staticmethod
    def uniform(support: Sequence) -> "FiniteDistribution":
        n = len(support)
        return FiniteDistribution(support, np.full(n, 1.0 / n))

    @staticmethod
    def from_weights(support: Sequence, weights) -> "FiniteDistribution":
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise ValidationError("weights must have positive total")
        return FiniteDistribution(support, w / total)


def _check_supports(p1: FiniteDistribution, p2: FiniteDistribution) -> None:
    if p1.support != p2.support:
        raise SupportMismatchError(
            "distributions are defined over different ordered supports"
        )


def f_divergence_from_masses(g: Generator, a: np.ndarray, b: np.ndarray) -> ExtendedReal:
    """D_g between two mass vectors already aligned on the same support."""
    both = (a > 0.0) & (b > 0.0)
    if np.any(both):
        ratios = a[both] / b[both]
        main = float(np.dot(b[both], np.asarray(g.f(ratios), dtype=np.float64)))
    else:
        main = 0.0
    result = ExtendedReal(main)
    mass_b_where_a_zero = float(b[a == 0.0].sum())
    mass_a_where_b_zero = float(a[b == 0.0].sum())
    result = result + g.f_at_zero.times_mass(mass_b_where_a_zero)
    result = result + g.f_prime_at_inf.times_mass(mass_a_where_b_zero)
    if result.finite and -1e-9 < result.value < 0.0:
        # Jensen guarantees D_f >= 0; absorb summation rounding only.
        result = ExtendedReal(0.0)
    return result


def f_divergence_exact(
    g: Generator, p1: FiniteDistribution, p2: FiniteDistribution
) -> ExtendedReal:
    """Evaluate D_g(p1||p2) exactly over a shared finite support."""
    _check_supports(p1, p2)
    return f_divergence_from_masses(g, p1.mass, p2.mass)


def pseudo_reward(g: Generator, pi_x: float, p_x: float) -> float:
    """The per-sample weight -f'(pi(x)/p(x)) of the policy-gradient form.

    When p(x) = 0 the ratio is infinite and the value -f'(inf) is used; kinds
    with infinite f'(inf) (reverse KL, chi-squared) cannot score such samples
    and raise instead.
    """
    if pi_x <= 0.0:
        raise ValidationError("policy probability must be positive (full support)")
    if p_x < 0.0:
        raise ValidationError("target probability must be non-negative")
    if p_x == 0.0:
        if not g.f_prime_at_inf.finite:
            raise InfinitePseudoRewardError(display_name(g))
        return -g.f_prime_at_inf.value
    return -float(g.f_prime(pi_x / p_x))
