"""Independent brute-force reference paths used only by tests and acceptance.

These deliberately recompute quantities through a different route than the
primary code: divergences via the plain expectation form rather than the
symmetrical three-term form, gradients via central finite differences, and
moments via direct enumeration.  Everything runs in double precision with
compensated summation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .divergence import (
    DivergenceKind,
    ExtendedReal,
    FiniteDistribution,
    Generator,
    make_generator,
)
from .errors import SupportMismatchError, ValidationError

__all__ = [
    "OracleReport",
    "kahan_sum",
    "divergence_by_enumeration",
    "finite_difference_gradient",
    "exact_feature_moment",
    "write_reports_csv",
]


def kahan_sum(values) -> float:
    total = 0.0
    comp = 0.0
    for v in values:
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def divergence_by_enumeration(
    kind: DivergenceKind | str | Generator,
    p1: FiniteDistribution,
    p2: FiniteDistribution,
) -> ExtendedReal:
    """D_f(p1||p2) in the expectation form

        E_{x~p2}[f(p1(x)/p2(x))] + f'(inf) * p1{p2=0},

    where the summand uses f(0) when p1(x)=0 < p2(x), and the residual term
    is dropped entirely when p1 puts no mass where p2 vanishes.
    """
    g = kind if isinstance(kind, Generator) else make_generator(kind)
    if p1.support != p2.support:
        raise SupportMismatchError("oracle requires a shared ordered support")
    terms = []
    for a, b in zip(p1.mass.tolist(), p2.mass.tolist()):
        if b == 0.0:
            continue
        if a == 0.0:
            if not g.f_at_zero.finite:
                return ExtendedReal.infinity()
            terms.append(b * g.f_at_zero.value)
        else:
            terms.append(b * float(g.f(a / b)))
    residual_mass = kahan_sum(a for a, b in zip(p1.mass.tolist(), p2.mass.tolist()) if b == 0.0)
    total = kahan_sum(terms)
    if residual_mass > 0.0:
        if not g.f_prime_at_inf.finite:
            return ExtendedReal.infinity()
        total += g.f_prime_at_inf.value * residual_mass
    if -1e-9 < total < 0.0:
        total = 0.0
    return ExtendedReal(total)


def finite_difference_gradient(
    objective: Callable[[np.ndarray], float],
    params: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central differences per coordinate."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros(params.shape[0])
    for j in range(params.shape[0]):
        bump = np.zeros_like(params)
        bump[j] = eps
        hi = objective(params + bump)
        lo = objective(params - bump)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValidationError(
                f"objective is not finite near coordinate {j} (values {lo}, {hi})"
            )
        grad[j] = (hi - lo) / (2.0 * eps)
    return grad


def exact_feature_moment(dist: FiniteDistribution, phi, space=None) -> float:
    """sum_x mass(x) phi(x); support items are decoded through ``space`` when
    they are sequence ranks rather than token tuples."""
    decode = (lambda s: space.sequence_at(int(s))) if space is not None else (lambda s: s)
    return kahan_sum(
        m * float(phi(decode(s))) for s, m in zip(dist.support, dist.mass.tolist())
    )


@dataclass(frozen=True)
class OracleReport:
    """One verified quantity: reference value, primary value, and the verdict."""

    name: str
    oracle_value: float
    primary_value: float
    tolerance: float

    @property
    def abs_error(self) -> float:
        if math.isinf(self.oracle_value) and math.isinf(self.primary_value):
            return 0.0
        return abs(self.oracle_value - self.primary_value)

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.oracle_value), abs(self.primary_value), 1.0)
        if math.isinf(scale):
            return 0.0 if self.abs_error == 0.0 else math.inf
        return self.abs_error / scale

    @property
    def passed(self) -> bool:
        return self.abs_error <= self.tolerance or self.rel_error <= self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"[{flag}] {self.name}: oracle={self.oracle_value:.12g} "
            f"primary={self.primary_value:.12g} tol={self.tolerance:g}"
        )


def write_reports_csv(reports: Sequence[OracleReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["name", "oracle_value", "primary_value", "abs_error", "rel_error", "tolerance", "pass"]
        )
        for r in reports:
            writer.writerow(
                [
                    r.name,
                    f"{r.oracle_value:.17g}",
                    f"{r.primary_value:.17g}",
                    f"{r.abs_error:.17g}",
                    f"{r.rel_error:.17g}",
                    f"{r.tolerance:g}",
                    str(r.passed).lower(),
                ]
            )
