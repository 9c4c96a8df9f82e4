"""Gradient estimators for f-divergence descent.

The exact form enumerates sum_x pi(x) f'(pi(x)/p(x)) grad log pi(x); the
sampled form replaces the expectation with a policy minibatch and the true
normalizer with a running importance-weight estimate.  Probability ratios are
formed in log space (log pi - log P + log Zhat) and exponentiated once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .divergence import ExtendedReal, Generator, display_name
from .errors import (
    EstimatorStateError,
    InfinitePseudoRewardError,
    ValidationError,
)
from .policy import ConditionalPolicy
from .targets import ConditionalTask, TargetModel, conditional_target, exact_log_partition

__all__ = [
    "ZEstimator",
    "BaselineState",
    "GradientEstimate",
    "update_z",
    "importance_weights",
    "fdpg_gradient_exact",
    "fdpg_gradient_sampled",
    "dpg_gradient",
    "rlkl_policy_gradient",
    "conditional_fdpg_gradient_exact",
    "conditional_fdpg_gradient_sampled",
    "change_of_generator",
]


@dataclass(frozen=True)
class ZEstimator:
    """Running mean of importance weights P(x)/pi(x); each is unbiased for Z."""

    n: int = 0
    z_mean: float = 0.0

    def log_z(self) -> float:
        if self.n == 0 or self.z_mean <= 0.0:
            raise EstimatorStateError(
                f"partition estimate unusable (n={self.n}, mean={self.z_mean})"
            )
        return math.log(self.z_mean)


def update_z(z: ZEstimator, weight: float) -> ZEstimator:
    if weight < 0.0:
        raise ValidationError(f"importance weight {weight} is negative")
    n = z.n + 1
    return ZEstimator(n, z.z_mean + (weight - z.z_mean) / n)


def update_z_batch(z: ZEstimator, weights: np.ndarray) -> ZEstimator:
    for w in weights:
        z = update_z(z, float(w))
    return z


@dataclass(frozen=True)
class BaselineState:
    """Constant subtracted from pseudo-rewards; leaves the expected gradient
    unchanged while reducing its variance.

    Modes: "none" (B=0), "analytic-one" (B=1, the exact forward-KL
    pseudo-reward expectation), "ema" (exponential moving average of batch
    means, seeded with the first batch mean).
    """

    mode: str = "ema"
    alpha: float = 0.99
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if self.mode not in ("none", "analytic-one", "ema"):
            raise ValidationError(f"unknown baseline mode {self.mode!r}")
        if self.mode == "ema" and not 0.0 < self.alpha < 1.0:
            raise ValidationError("ema weight must lie in (0, 1)")

    def effective(self, batch_mean: float) -> float:
        """The B applied to the current batch."""
        if self.mode == "none":
            return 0.0
        if self.mode == "analytic-one":
            return 1.0
        return self.value if self.initialized else batch_mean

    def update(self, batch_mean: float) -> "BaselineState":
        if self.mode != "ema":
            return self
        if not self.initialized:
            return replace(self, value=batch_mean, initialized=True)
        return replace(self, value=self.alpha * self.value + (1.0 - self.alpha) * batch_mean)


@dataclass(frozen=True)
class GradientEstimate:
    """A descent-direction estimate of grad D_f plus batch reward statistics."""

    grad: np.ndarray
    reward_mean: float
    reward_std: float
    batch_size: int


def _check_admissible(g: Generator, target: TargetModel, where: str) -> None:
    if target.log_scores is None:
        return
    if not g.f_prime_at_inf.finite and not np.all(np.isfinite(target.log_scores)):
        raise InfinitePseudoRewardError(display_name(g), where)


def _f_prime_with_limit(g: Generator, log_ratio: np.ndarray, zero_mask: np.ndarray) -> np.ndarray:
    """f'(pi/p) with f'(inf) substituted on zero-mass target points."""
    out = np.empty(log_ratio.shape)
    if np.any(~zero_mask):
        out[~zero_mask] = g.f_prime(np.exp(log_ratio[~zero_mask]))
    if np.any(zero_mask):
        if not g.f_prime_at_inf.finite:
            raise InfinitePseudoRewardError(display_name(g))
        out[zero_mask] = g.f_prime_at_inf.value
    return out


def importance_weights(policy, target: TargetModel, indices: np.ndarray) -> np.ndarray:
    """P(x)/pi(x) for each sampled sequence."""
    log_pi = policy.log_probs_of_indices(indices)
    log_score = target.log_scores_of_indices(indices)
    w = np.exp(log_score - log_pi)
    return np.where(np.isfinite(log_score), w, 0.0)


def fdpg_gradient_exact(g: Generator, policy, target: TargetModel) -> np.ndarray:
    """The true gradient of D_g(pi||p) by full enumeration.

    Requires f'(inf) finite wherever the target has zero mass; reverse KL and
    chi-squared therefore reject hard-constraint targets outright.
    """
    policy.space.check_enumerable()
    _check_admissible(g, target, "exact gradient")
    log_z = target.exact_log_z
    if log_z is None:
        log_z = exact_log_partition(target)
    log_pi = policy.all_log_probs()
    log_p = target.log_scores - log_z
    zero_mask = ~np.isfinite(log_p)
    log_ratio = np.where(zero_mask, 0.0, log_pi - log_p)
    f_prime = _f_prime_with_limit(g, log_ratio, zero_mask)
    weights = np.exp(log_pi) * f_prime
    return policy.accumulate_weighted_scores(np.arange(policy.space.size), weights)


def _pseudo_reward_terms(g, policy, target, indices, log_z):
    log_pi = policy.log_probs_of_indices(indices)
    log_score = target.log_scores_of_indices(indices)
    zero_mask = ~np.isfinite(log_score)
    if np.any(zero_mask) and not g.f_prime_at_inf.finite:
        offender = int(indices[np.argmax(zero_mask)])
        raise InfinitePseudoRewardError(
            display_name(g), f"sample index {offender} has zero target mass"
        )
    log_ratio = np.where(zero_mask, 0.0, log_pi - (log_score - log_z))
    f_prime = _f_prime_with_limit(g, log_ratio, zero_mask)
    return f_prime


def fdpg_gradient_sampled(
    g: Generator,
    policy,
    target: TargetModel,
    batch: np.ndarray,
    baseline: BaselineState,
    log_z: float,
    weights: np.ndarray | None = None,
) -> GradientEstimate:
    """Minibatch estimate of grad D_g(pi||p) with a baselined pseudo-reward.

    ``batch`` holds sequence indices (or a token matrix); ``weights`` replaces
    the uniform 1/N batch weighting, so passing the full enumeration with
    weights pi(x) reproduces the exact gradient for any baseline mode.
    """
    batch = np.asarray(batch)
    if batch.ndim == 2:
        batch = policy.space.indices_of(batch)
    if batch.size == 0:
        raise ValidationError("batch must be non-empty")
    if not math.isfinite(log_z):
        raise EstimatorStateError(f"log Zhat is {log_z}")
    f_prime = _pseudo_reward_terms(g, policy, target, batch, log_z)
    rewards = -f_prime
    if weights is None:
        w = np.full(batch.shape[0], 1.0 / batch.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise ValidationError("batch weights must have positive total")
        w = w / total
    reward_mean = float(np.dot(w, rewards))
    reward_var = float(np.dot(w, (rewards - reward_mean) ** 2))
    b_value = baseline.effective(reward_mean)
    grad = policy.accumulate_weighted_scores(batch, w * (f_prime + b_value))
    if not np.all(np.isfinite(grad)):
        raise EstimatorStateError("gradient estimate contains non-finite entries")
    return GradientEstimate(grad, reward_mean, math.sqrt(max(reward_var, 0.0)), batch.shape[0])


def dpg_gradient(policy, target: TargetModel) -> np.ndarray:
    """The cross-entropy descent direction -sum_x p(x) grad log pi(x).

    Kept as an independent code path: the forward-KL instance of the general
    estimator must coincide with it.
    """
    log_z = target.exact_log_z
    if log_z is None:
        log_z = exact_log_partition(target)
    p = np.exp(target.log_scores - log_z)
    p = np.where(np.isfinite(target.log_scores), p, 0.0)
    return policy.accumulate_weighted_scores(np.arange(policy.space.size), -p)


def rlkl_policy_gradient(policy, a, r, beta: float) -> np.ndarray:
    """Exact gradient of the reward-with-KL-penalty objective
    E_pi[r(x) - beta log(pi(x)/a(x))] (ascent direction)."""
    if beta <= 0.0:
        raise ValidationError("beta must be positive")
    space = policy.space
    space.check_enumerable()
    log_pi = policy.all_log_probs()
    log_a = a.all_log_probs()
    r_vals = r.values(space)
    integrand = r_vals - beta * (log_pi - log_a)
    weights = np.exp(log_pi) * integrand
    return policy.accumulate_weighted_scores(np.arange(space.size), weights)


def conditional_targets(base, task: ConditionalTask) -> dict:
    return {c: conditional_target(base, task, c) for c in task.contexts}


def conditional_fdpg_gradient_exact(
    g: Generator, policy: ConditionalPolicy, task: ConditionalTask, targets: dict
) -> np.ndarray:
    """Gradient of E_{c~tau}[D_g(pi(.|c)||p_c)] over the stacked parameters.

    Per-context parameter blocks are disjoint, so this is the tau-weighted
    placement of each context's exact gradient into its own block.
    """
    grad = np.zeros(policy.n_params)
    for c, tau_c in zip(task.contexts, task.context_dist.mass):
        if tau_c == 0.0:
            continue
        try:
            sub = fdpg_gradient_exact(g, policy.policy_for(c), targets[c])
        except InfinitePseudoRewardError as exc:
            raise InfinitePseudoRewardError(display_name(g), f"context {c!r}") from exc
        lo, hi = policy.block(c)
        grad[lo:hi] += tau_c * sub
    return grad


def conditional_fdpg_gradient_sampled(
    g: Generator,
    policy: ConditionalPolicy,
    task: ConditionalTask,
    targets: dict,
    context_counts: dict,
    batches: dict,
    baselines: dict,
    log_zs: dict,
) -> tuple[GradientEstimate, dict]:
    """Average over sampled contexts of per-context minibatch estimates.

    ``context_counts[c]`` is how many times c appeared in the context draw;
    ``batches[c]`` holds that context's sampled sequence indices.  Contexts
    are reduced in their declared order so results do not depend on the
    grouping produced upstream.  Returns the pooled estimate plus the
    per-context estimates (for baseline bookkeeping).
    """
    m = sum(context_counts.values())
    if m == 0:
        raise ValidationError("context batch must be non-empty")
    grad = np.zeros(policy.n_params)
    per_context: dict = {}
    pooled_mean = 0.0
    pooled_sq = 0.0
    total = 0
    for c in task.contexts:
        n_c = context_counts.get(c, 0)
        if n_c == 0:
            continue
        idx = batches[c]
        try:
            est = fdpg_gradient_sampled(
                g, policy.policy_for(c), targets[c], idx, baselines[c], log_zs[c]
            )
        except InfinitePseudoRewardError as exc:
            raise InfinitePseudoRewardError(display_name(g), f"context {c!r}") from exc
        per_context[c] = est
        lo, hi = policy.block(c)
        grad[lo:hi] += (n_c / m) * est.grad
        pooled_mean += n_c * est.reward_mean
        pooled_sq += n_c * (est.reward_std**2 + est.reward_mean**2)
        total += n_c
    pooled_mean /= total
    pooled_var = max(pooled_sq / total - pooled_mean**2, 0.0)
    return GradientEstimate(grad, pooled_mean, math.sqrt(pooled_var), total), per_context


def change_of_generator(g: Generator, b: float) -> Generator:
    """g_b(t) = g(t) - b (t - 1): same divergence values and exact gradients,
    pseudo-reward shifted by b."""
    if b == 0.0:
        return g
    base_f = g.f
    base_fp = g.f_prime

    def f(t):
        return base_f(t) - b * (np.asarray(t, dtype=np.float64) - 1.0)

    def f_prime(t):
        return base_fp(t) - b

    f_at_zero = g.f_at_zero if not g.f_at_zero.finite else ExtendedReal(g.f_at_zero.value + b)
    f_prime_at_inf = (
        g.f_prime_at_inf
        if not g.f_prime_at_inf.finite
        else ExtendedReal(g.f_prime_at_inf.value - b)
    )
    return Generator(f"{g.name}|shift{b:g}", f, f_prime, f_at_zero, f_prime_at_inf, None)
