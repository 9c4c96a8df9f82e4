"""The optimization loop, metric evaluation, and run recording.

Each step samples a policy minibatch, refreshes the partition estimate,
forms the baselined pseudo-reward gradient estimate, and takes an optimizer
step that descends the chosen f-divergence.  Metrics are evaluated every
``eval_interval`` steps and collected into a RunRecord whose serialized form
is fully deterministic for a fixed (config, seed).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_streams
from .divergence import (
    DivergenceKind,
    Generator,
    display_name,
    f_divergence_from_masses,
    make_generator,
    perspective,
)
from .errors import (
    EstimatorStateError,
    InfinitePseudoRewardError,
    NonFiniteGradientError,
    TrainAbortedError,
    ValidationError,
)
from .estimator import (
    BaselineState,
    ZEstimator,
    conditional_fdpg_gradient_sampled,
    conditional_targets,
    fdpg_gradient_sampled,
    importance_weights,
    update_z_batch,
)
from .policy import ConditionalPolicy, distinct_n, exact_normalized_entropy, normalized_entropy
from .targets import ConditionalTask, FeatureFn, TargetModel

__all__ = [
    "TrainConfig",
    "AdamState",
    "RunRecord",
    "adam_step",
    "sgd_step",
    "evaluate_metrics",
    "train",
]

REPORTED_KINDS = (
    DivergenceKind.FORWARD_KL,
    DivergenceKind.REVERSE_KL,
    DivergenceKind.TOTAL_VARIATION,
    DivergenceKind.JENSEN_SHANNON,
)

METRIC_KEYS = (
    "kl",
    "rkl",
    "tv",
    "js",
    "kl_from_base",
    "alignment",
    "entropy",
    "distinct_1",
)


@dataclass(frozen=True)
class TrainConfig:
    divergence: str = "js"
    learning_rate: float = 0.1
    batch_size: int = 256
    steps: int = 2000
    baseline: str = "auto"  # auto | none | analytic-one | ema
    baseline_alpha: float = 0.99
    z_mode: str = "exact"  # exact | estimated
    z_update: str = "post"  # post | pre: which Zhat the batch gradient sees
    optimizer: str = "adam"  # adam | sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    master_seed: int = 0
    eval_interval: int = 100
    eval_budget: int = 16384
    metrics: str = "exact"  # exact | sampled

    def validate(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValidationError("learning rate must be positive")
        if self.batch_size < 1 or self.steps < 1 or self.eval_interval < 1:
            raise ValidationError("batch size, steps and eval interval must be >= 1")
        if self.z_mode not in ("exact", "estimated"):
            raise ValidationError(f"unknown z mode {self.z_mode!r}")
        if self.z_update not in ("post", "pre"):
            raise ValidationError(f"unknown z update {self.z_update!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.metrics not in ("exact", "sampled"):
            raise ValidationError(f"unknown metrics mode {self.metrics!r}")
        if self.baseline not in ("auto", "none", "analytic-one", "ema"):
            raise ValidationError(f"unknown baseline mode {self.baseline!r}")
        DivergenceKind.parse(self.divergence)

    def generator(self) -> Generator:
        return make_generator(self.divergence)

    def baseline_state(self) -> BaselineState:
        mode = self.baseline
        if mode == "auto":
            # Forward KL has the analytic pseudo-reward expectation E[p/pi] = 1;
            # everything else tracks batch means.
            mode = (
                "analytic-one"
                if DivergenceKind.parse(self.divergence) == DivergenceKind.FORWARD_KL
                else "ema"
            )
        return BaselineState(mode=mode, alpha=self.baseline_alpha)

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        return self.learning_rate


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """Bias-corrected Adam descent step on ``grad``; mutates state, returns params."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("gradient contains NaN or infinity")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("gradient contains NaN or infinity")
    return params - lr * grad


class _Optimizer:
    def __init__(self, config: TrainConfig, n_params: int):
        self.config = config
        self.state = AdamState.zeros(n_params)

    def step(self, policy, grad: np.ndarray, step: int) -> None:
        lr = self.config.lr_at(step)
        params = policy.get_params()
        if self.config.optimizer == "adam":
            params = adam_step(
                self.state,
                params,
                grad,
                lr,
                self.config.adam_beta1,
                self.config.adam_beta2,
                self.config.adam_eps,
            )
        else:
            params = sgd_step(params, grad, lr)
        policy.set_params(params)


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


@dataclass
class RunRecord:
    """Per-eval metric rows plus the echoed configuration.

    Wall-clock timings live only in ``timings`` so the serialized rows stay
    byte-identical across reruns.
    """

    config_echo: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    error: dict | None = None

    def append(self, row: dict, wall_time: float) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValidationError("rows must be strictly increasing in step")
        self.rows.append(row)
        self.timings.append(wall_time)

    def header(self) -> dict:
        return {"type": "header", "config": self.config_echo}

    def serializable_rows(self):
        for row in self.rows:
            yield {"type": "row", **{k: _json_safe(v) for k, v in row.items()}}
        if self.error is not None:
            yield {"type": "error", **self.error}

    def final_row(self) -> dict:
        return self.rows[-1]


def _divergences_exact(pi_mass: np.ndarray, p_mass: np.ndarray) -> dict:
    out = {}
    for kind in REPORTED_KINDS:
        g = make_generator(kind)
        out[kind.value] = f_divergence_from_masses(g, pi_mass, p_mass).to_float()
    return out


def _divergences_sampled(policy, target: TargetModel, log_z: float, indices: np.ndarray) -> dict:
    """Importance-sampled D_f(pi||p) = E_{x~pi}[f*(phat/pi)] per reported kind.

    The swap through the perspective generator turns each divergence into an
    expectation under the policy; full policy support kills the residual term.
    """
    log_pi = policy.log_probs_of_indices(indices)
    log_score = target.log_scores_of_indices(indices)
    zero = ~np.isfinite(log_score)
    log_ratio = np.where(zero, 0.0, log_score - log_z - log_pi)
    ratio = np.exp(log_ratio)
    out = {}
    for kind in REPORTED_KINDS:
        star = perspective(make_generator(kind))
        vals = np.asarray(star.f(ratio), dtype=np.float64)
        if np.any(zero):
            if not star.f_at_zero.finite:
                out[kind.value] = math.inf
                continue
            vals = np.where(zero, star.f_at_zero.value, vals)
        out[kind.value] = float(vals.mean())
    return out


def evaluate_metrics(
    policy,
    target: TargetModel,
    base,
    budget: int = 16384,
    mode: str = "exact",
    master_seed: int = 0,
    eval_index: int = 0,
    alignment_feature: FeatureFn | None = None,
    log_z: float | None = None,
) -> dict:
    """One metrics row: four divergences, KL from base, alignment moment,
    normalized entropy, and sample diversity.

    Exact mode enumerates; sampled mode draws ``budget`` policy samples from
    an evaluation-only random stream.  Infinite divergences come back as
    float('inf'), never as exceptions.
    """
    if mode not in ("exact", "sampled"):
        raise ValidationError(f"unknown metrics mode {mode!r}")
    if budget < 1:
        raise ValidationError("sample budget must be >= 1")
    if log_z is None:
        log_z = target.exact_log_z
    rng = rng_streams.stream(master_seed, rng_streams.EVAL, eval_index)
    samples = policy.sample(rng, budget)
    row: dict = {}
    if mode == "exact":
        log_pi = policy.all_log_probs()
        pi_mass = np.exp(log_pi)
        p_mass = np.where(
            np.isfinite(target.log_scores), np.exp(target.log_scores - log_z), 0.0
        )
        row.update(_divergences_exact(pi_mass, p_mass))
        log_a = base.all_log_probs()
        row["kl_from_base"] = float(np.dot(pi_mass, log_pi - log_a))
        if alignment_feature is not None:
            row["alignment"] = float(np.dot(pi_mass, alignment_feature.values(policy.space)))
        row["entropy"] = exact_normalized_entropy(policy)
    else:
        indices = policy.space.indices_of(samples)
        row.update(_divergences_sampled(policy, target, log_z, indices))
        log_pi_s = policy.log_probs_of_indices(indices)
        log_a_s = base.all_log_probs()[indices]
        row["kl_from_base"] = float((log_pi_s - log_a_s).mean())
        if alignment_feature is not None:
            vals = alignment_feature.values(policy.space)[indices]
            row["alignment"] = float(vals.mean())
        row["entropy"] = normalized_entropy(samples, policy)
    row["distinct_1"] = distinct_n(samples, 1)
    row["metrics_exact"] = mode == "exact"
    return row


def _constraint_feature(task: ConditionalTask, c, space) -> np.ndarray:
    mat = space.token_matrix()
    return np.fromiter(
        (float(task.constraint(tuple(r), c)) for r in mat.tolist()),
        dtype=np.float64,
        count=mat.shape[0],
    )


def _evaluate_conditional(
    policy: ConditionalPolicy,
    task: ConditionalTask,
    targets: dict,
    base,
    budget: int,
    mode: str,
    master_seed: int,
    eval_index: int,
) -> dict:
    """tau-weighted metrics across contexts; any infinite component stays inf."""
    per_context_budget = max(budget // max(len(task.contexts), 1), 1)
    agg = {key: 0.0 for key in METRIC_KEYS}
    for slot, (c, tau_c) in enumerate(zip(task.contexts, task.context_dist.mass)):
        if tau_c == 0.0:
            continue
        sub_policy = policy.policy_for(c)
        sub_base = base.policy_for(c) if hasattr(base, "policy_for") else base
        sub = evaluate_metrics(
            sub_policy,
            targets[c],
            sub_base,
            budget=per_context_budget,
            mode=mode,
            master_seed=master_seed,
            eval_index=eval_index * 1009 + slot,
        )
        probs = np.exp(sub_policy.all_log_probs())
        sub["alignment"] = float(np.dot(probs, _constraint_feature(task, c, sub_policy.space)))
        for key in METRIC_KEYS:
            value = sub[key]
            if math.isinf(agg[key]) or (isinstance(value, float) and math.isinf(value)):
                agg[key] = math.inf
            else:
                agg[key] += tau_c * value
    agg["metrics_exact"] = mode == "exact"
    return agg


def _gate_support(g: Generator, targets) -> None:
    """Fail fast before step 0 when the divergence cannot score the target."""
    if g.f_prime_at_inf.finite:
        return
    items = targets.items() if isinstance(targets, dict) else [(None, targets)]
    for c, t in items:
        if t.log_scores is not None and not np.all(np.isfinite(t.log_scores)):
            where = f"context {c!r}" if c is not None else "zero-mass target points"
            raise InfinitePseudoRewardError(display_name(g), where)


def _eval_points(config: TrainConfig) -> set:
    points = set(range(0, config.steps + 1, config.eval_interval))
    points.add(config.steps)
    return points


def train(
    config: TrainConfig,
    policy,
    target,
    g: Generator | None = None,
    base=None,
    alignment_feature: FeatureFn | None = None,
):
    """Run the full loop; returns (policy, RunRecord).

    ``target`` is a TargetModel or a ConditionalTask; the latter requires a
    ConditionalPolicy plus an explicit ``base``.  Deterministic for a fixed
    config: all randomness runs through counter-based streams keyed by
    (master seed, purpose, step).
    """
    config.validate()
    if g is None:
        g = config.generator()
    if isinstance(target, ConditionalTask):
        if base is None:
            raise ValidationError("conditional training requires the base policy")
        return _train_conditional(config, policy, target, g, base)
    return _train_unconditional(config, policy, target, g, alignment_feature)


def _train_unconditional(
    config: TrainConfig,
    policy,
    target: TargetModel,
    g: Generator,
    alignment_feature: FeatureFn | None,
):
    record = RunRecord(config_echo=asdict(config))
    _gate_support(g, target)
    exact_log_z = target.exact_log_z
    if config.z_mode == "exact" and exact_log_z is None:
        raise ValidationError("exact z mode requires an enumerable target")
    zest = ZEstimator()
    baseline = config.baseline_state()
    optimizer = _Optimizer(config, policy.n_params)
    last_reward = (None, None)
    eval_points = _eval_points(config)
    start = time.monotonic()

    def emit(step: int) -> None:
        row = {"step": step}
        row.update(
            evaluate_metrics(
                policy,
                target,
                target.base,
                budget=config.eval_budget,
                mode=config.metrics,
                master_seed=config.master_seed,
                eval_index=step,
                alignment_feature=alignment_feature,
                log_z=exact_log_z,
            )
        )
        row["reward_mean"], row["reward_std"] = last_reward
        row["z_hat"] = zest.z_mean if zest.n else None
        row["z_exact"] = math.exp(exact_log_z) if exact_log_z is not None else None
        row["z_source"] = config.z_mode
        record.append(row, time.monotonic() - start)

    step = 0
    try:
        emit(0)
        for step in range(config.steps):
            rng = rng_streams.stream(config.master_seed, rng_streams.TRAIN, step)
            idx = policy.sample_indices(rng, config.batch_size)
            weights = importance_weights(policy, target, idx)
            pre_state = zest
            zest = update_z_batch(zest, weights)
            z_for_batch = pre_state if (config.z_update == "pre" and pre_state.n > 0) else zest
            log_z = exact_log_z if config.z_mode == "exact" else z_for_batch.log_z()
            est = fdpg_gradient_sampled(g, policy, target, idx, baseline, log_z)
            baseline = baseline.update(est.reward_mean)
            last_reward = (est.reward_mean, est.reward_std)
            optimizer.step(policy, est.grad, step)
            if (step + 1) in eval_points:
                emit(step + 1)
    except (
        InfinitePseudoRewardError,
        NonFiniteGradientError,
        EstimatorStateError,
        ValidationError,
    ) as exc:
        record.error = {"step": step, "message": str(exc)}
        raise TrainAbortedError(step, exc) from exc
    return policy, record


def _draw_context_counts(task: ConditionalTask, rng, count: int) -> dict:
    cdf = np.cumsum(task.context_dist.mass)
    picks = np.minimum(np.searchsorted(cdf, rng.random(count), side="right"), len(cdf) - 1)
    counts = np.bincount(picks, minlength=len(task.contexts))
    return {c: int(n) for c, n in zip(task.contexts, counts)}


def _train_conditional(
    config: TrainConfig,
    policy: ConditionalPolicy,
    task: ConditionalTask,
    g: Generator,
    base,
):
    record = RunRecord(config_echo=asdict(config))
    targets = conditional_targets(base, task)
    _gate_support(g, targets)
    zests = {c: ZEstimator() for c in task.contexts}
    baselines = {c: config.baseline_state() for c in task.contexts}
    optimizer = _Optimizer(config, policy.n_params)
    last_reward = (None, None)
    eval_points = _eval_points(config)
    start = time.monotonic()

    def emit(step: int) -> None:
        row = {"step": step}
        row.update(
            _evaluate_conditional(
                policy,
                task,
                targets,
                base,
                budget=config.eval_budget,
                mode=config.metrics,
                master_seed=config.master_seed,
                eval_index=step,
            )
        )
        row["reward_mean"], row["reward_std"] = last_reward
        row["z_hat"] = None
        row["z_exact"] = None
        row["z_source"] = config.z_mode
        record.append(row, time.monotonic() - start)

    step = 0
    try:
        emit(0)
        for step in range(config.steps):
            ctx_rng = rng_streams.stream(config.master_seed, rng_streams.CONTEXT, step)
            counts = _draw_context_counts(task, ctx_rng, config.batch_size)
            train_rng = rng_streams.stream(config.master_seed, rng_streams.TRAIN, step)
            batches: dict = {}
            log_zs: dict = {}
            for c in task.contexts:  # fixed order keeps stream use deterministic
                n_c = counts[c]
                if n_c == 0:
                    continue
                sub_policy = policy.policy_for(c)
                idx = sub_policy.sample_indices(train_rng, n_c)
                batches[c] = idx
                w = importance_weights(sub_policy, targets[c], idx)
                pre = zests[c]
                zests[c] = update_z_batch(pre, w)
                z_state = pre if (config.z_update == "pre" and pre.n > 0) else zests[c]
                if config.z_mode == "exact":
                    log_zs[c] = targets[c].exact_log_z
                else:
                    log_zs[c] = z_state.log_z()
            est, per_context = conditional_fdpg_gradient_sampled(
                g, policy, task, targets, counts, batches, baselines, log_zs
            )
            for c, sub_est in per_context.items():
                baselines[c] = baselines[c].update(sub_est.reward_mean)
            last_reward = (est.reward_mean, est.reward_std)
            optimizer.step(policy, est.grad, step)
            if (step + 1) in eval_points:
                emit(step + 1)
    except (
        InfinitePseudoRewardError,
        NonFiniteGradientError,
        EstimatorStateError,
        ValidationError,
    ) as exc:
        record.error = {"step": step, "message": str(exc)}
        raise TrainAbortedError(step, exc) from exc
    return policy, record
