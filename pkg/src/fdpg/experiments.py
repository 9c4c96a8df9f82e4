"""Experiment declarations: bundled task analogues and the config file format.

Config files are flat, line-oriented ``key = value`` text under ``[section]``
headers (diff-friendly; grammar documented in the README).  Recognized
sections: ``[experiment]``, ``[target]``, ``[train]``, ``[sweep]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .divergence import DivergenceKind, FiniteDistribution
from .errors import ConfigError, ValidationError
from .features import contains_token, count_fraction, majority_of_pair, parse_feature
from .policy import (
    ConditionalPolicy,
    NGramPolicy,
    SequenceSpace,
    TabularPolicy,
    ngram_from,
    tabular_from,
)
from .targets import (
    ConditionalTask,
    FeatureFn,
    MomentSpec,
    TargetModel,
    fit_lambda,
    gdc_binary_target,
    gdc_dist_target,
    reward_from_choice_model,
    rlkl_target,
)
from .trainer import TrainConfig

__all__ = ["ExperimentSpec", "builtin_experiments", "load_config", "parse_config_text"]


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    vocab: int
    length: int
    policy: str = "tabular"  # tabular | ngram:<order>
    base: str = "uniform"
    target_kind: str = "gdc-binary"  # gdc-binary | rlkl | gdc-dist | conditional
    feature: str | None = None
    beta: float | None = None
    choice_model: bool = False
    moments: tuple = ()  # ((feature spec, desired), ...)
    fit_tol: float = 1e-6
    contexts: int = 0
    constraint: str = "prefix-match"
    divergences: tuple = ("js",)
    seeds: tuple = (0,)
    train_overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.vocab < 2 or self.length < 1:
            raise ValidationError("need vocab >= 2 and length >= 1")
        if self.target_kind not in ("gdc-binary", "rlkl", "gdc-dist", "conditional"):
            raise ValidationError(f"unknown target kind {self.target_kind!r}")
        if self.target_kind in ("gdc-binary", "rlkl") and not self.feature:
            raise ValidationError(f"{self.target_kind} target needs a feature")
        if self.target_kind == "rlkl" and (self.beta is None or self.beta <= 0):
            raise ValidationError("rlkl target needs beta > 0")
        if self.target_kind == "gdc-dist" and not self.moments:
            raise ValidationError("gdc-dist target needs moment specs")
        if self.target_kind == "conditional" and not 1 <= self.contexts <= self.vocab:
            raise ValidationError("conditional task needs 1 <= contexts <= vocab")
        if self.policy != "tabular" and not self.policy.startswith("ngram:"):
            raise ValidationError(f"unknown policy family {self.policy!r}")
        if self.base != "uniform":
            raise ValidationError(f"unknown base policy {self.base!r}")
        for d in self.divergences:
            DivergenceKind.parse(d)
        for kind in self.divergences:
            self._check_compatibility(kind)

    def _check_compatibility(self, kind: str) -> None:
        # Hard-constraint targets zero out part of the space; kinds with
        # infinite f'(inf) cannot be trained (or even measured) against them.
        hard = self.target_kind in ("gdc-binary", "conditional")
        if hard and DivergenceKind.parse(kind) in (
            DivergenceKind.REVERSE_KL,
            DivergenceKind.CHI_SQUARED,
        ):
            raise ValidationError(
                f"divergence {kind!r} has an infinite pseudo-reward on the "
                f"zero-mass points of a {self.target_kind} target"
            )

    def space(self) -> SequenceSpace:
        return SequenceSpace(self.vocab, self.length)

    def make_base(self):
        if self.target_kind == "conditional":
            contexts = tuple(range(self.contexts))
            return ConditionalPolicy(
                contexts, [TabularPolicy(self.space()) for _ in contexts]
            )
        return TabularPolicy(self.space())

    def make_policy(self, base):
        if self.target_kind == "conditional":
            if self.policy != "tabular":
                raise ValidationError("conditional tasks use tabular per-context policies")
            return ConditionalPolicy(
                base.contexts, [tabular_from(p) for p in base.policies]
            )
        if self.policy == "tabular":
            return tabular_from(base)
        order = int(self.policy.split(":", 1)[1])
        return ngram_from(base, order)

    def alignment_feature(self) -> FeatureFn | None:
        if self.target_kind in ("gdc-binary", "rlkl"):
            return parse_feature(self.feature)
        if self.target_kind == "gdc-dist":
            return parse_feature(self.moments[0][0])
        return None

    def make_target(self, base):
        if self.target_kind == "gdc-binary":
            return gdc_binary_target(base, parse_feature(self.feature))
        if self.target_kind == "rlkl":
            phi = parse_feature(self.feature)
            reward = reward_from_choice_model(phi) if self.choice_model else phi
            return rlkl_target(base, reward, self.beta)
        if self.target_kind == "gdc-dist":
            specs = [
                MomentSpec(parse_feature(fs), desired) for fs, desired in self.moments
            ]
            lambdas = fit_lambda(base, specs, tol=self.fit_tol)
            return gdc_dist_target(
                base, [(s.feature, lam) for s, lam in zip(specs, lambdas)]
            )
        if self.target_kind == "conditional":
            contexts = tuple(range(self.contexts))
            if self.constraint != "prefix-match":
                raise ValidationError(f"unknown constraint {self.constraint!r}")

            def constraint(tokens, c):
                return 1 if tokens[0] == c else 0

            return ConditionalTask(
                contexts, FiniteDistribution.uniform(contexts), constraint
            )
        raise ValidationError(f"unknown target kind {self.target_kind!r}")

    def train_config(self, divergence: str, seed: int, **extra) -> TrainConfig:
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        overrides = {**self.train_overrides, **extra}
        unknown = set(overrides) - fields
        if unknown:
            raise ValidationError(f"unknown train settings: {sorted(unknown)}")
        return TrainConfig(divergence=divergence, master_seed=seed, **overrides)

    def build(self):
        """Instantiate (base, policy, target-or-task, alignment feature)."""
        self.validate()
        base = self.make_base()
        policy = self.make_policy(base)
        target = self.make_target(base)
        return base, policy, target, self.alignment_feature()

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["moments"] = [list(m) for m in self.moments]
        return d


def builtin_experiments() -> list[ExperimentSpec]:
    """The bundled desk-scale tasks."""
    return [
        ExperimentSpec(
            name="lexical-gdc",
            vocab=8,
            length=6,
            target_kind="gdc-binary",
            feature="contains_token:3",
            divergences=("kl", "tv", "js"),
            seeds=(0, 1, 2),
            train_overrides={"learning_rate": 0.3, "warmup_steps": 50},
        ),
        ExperimentSpec(
            name="lexical-rlkl",
            vocab=8,
            length=6,
            target_kind="rlkl",
            feature="contains_token:3",
            beta=0.1,
            divergences=("kl", "rkl", "tv", "js"),
            seeds=(0, 1, 2),
            train_overrides={"learning_rate": 0.3, "warmup_steps": 50},
        ),
        ExperimentSpec(
            name="dist-balance",
            vocab=8,
            length=6,
            target_kind="gdc-dist",
            moments=(("majority_of_pair:1,2", 0.5), ("contains_token:3", 1.0)),
            divergences=("js",),
            seeds=(0, 1, 2),
            train_overrides={"learning_rate": 0.3, "warmup_steps": 50},
        ),
        ExperimentSpec(
            name="scalar-choice",
            vocab=8,
            length=6,
            target_kind="rlkl",
            feature="count_fraction:3",
            beta=0.1,
            choice_model=True,
            divergences=("kl", "rkl", "tv", "js"),
            seeds=(0, 1, 2),
            train_overrides={"learning_rate": 0.3, "warmup_steps": 50},
        ),
        ExperimentSpec(
            name="conditional-echo",
            vocab=8,
            length=4,
            target_kind="conditional",
            contexts=4,
            divergences=("js",),
            seeds=(0, 1, 2),
            train_overrides={"learning_rate": 0.3, "warmup_steps": 50},
        ),
    ]


def builtin_experiment(name: str) -> ExperimentSpec:
    for spec in builtin_experiments():
        if spec.name == name:
            return spec
    raise ConfigError(
        f"unknown builtin experiment {name!r}; available: "
        + ", ".join(s.name for s in builtin_experiments())
    )


_TRAIN_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce_train_value(key: str, raw: str, where: str):
    typ = _TRAIN_FIELD_TYPES[key]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}", where) from exc


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentSpec:
    """Parse the flat key=value format into an ExperimentSpec."""
    sections: dict[str, dict[str, tuple[str, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        where = f"{origin}:{lineno}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in ("experiment", "target", "train", "sweep"):
                raise ConfigError(f"unknown section [{current}]", where)
            sections.setdefault(current, {})
            continue
        if current is None:
            raise ConfigError("key outside of any [section]", where)
        if "=" not in line:
            raise ConfigError("expected 'key = value'", where)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", where)
        sections[current][key] = (value, where)

    def take(section: str, key: str, default=None, required=False):
        entry = sections.get(section, {}).get(key)
        if entry is None:
            if required:
                raise ConfigError(f"missing required key {key!r}", f"{origin}:[{section}]")
            return default, None
        return entry

    def as_int(section, key, default=None, required=False):
        value, where = take(section, key, default, required)
        if value is default and where is None:
            return default
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"expected integer for {key}, got {value!r}", where)

    name, _ = take("experiment", "name", required=True)
    vocab = as_int("experiment", "vocab", required=True)
    length = as_int("experiment", "length", required=True)
    policy, _ = take("experiment", "policy", "tabular")
    base, _ = take("experiment", "base", "uniform")

    kind, _ = take("target", "kind", required=True)
    feature, _ = take("target", "feature")
    beta_raw, beta_where = take("target", "beta")
    beta = None
    if beta_raw is not None:
        try:
            beta = float(beta_raw)
        except ValueError:
            raise ConfigError(f"expected number for beta, got {beta_raw!r}", beta_where)
    choice_raw, _ = take("target", "choice-model", "false")
    choice_model = str(choice_raw).lower() in ("1", "true", "yes")
    moments_raw, moments_where = take("target", "moments")
    moments: list[tuple[str, float]] = []
    if moments_raw:
        for part in moments_raw.split(";"):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ConfigError(
                    f"moment entry {part!r} must look like feature=desired", moments_where
                )
            fs, desired = part.rsplit("=", 1)
            try:
                moments.append((fs.strip(), float(desired)))
            except ValueError:
                raise ConfigError(f"bad desired moment {desired!r}", moments_where)
    fit_tol_raw, _ = take("target", "fit-tol", "1e-6")
    contexts = as_int("target", "contexts", 0)
    constraint, _ = take("target", "constraint", "prefix-match")

    overrides = {}
    for key, (value, where) in sections.get("train", {}).items():
        field_name = key.replace("-", "_")
        if field_name in ("divergence", "master_seed"):
            raise ConfigError(
                f"{key} belongs to [sweep] (divergences / seeds), not [train]", where
            )
        if field_name not in _TRAIN_FIELD_TYPES:
            raise ConfigError(f"unknown train setting {key!r}", where)
        overrides[field_name] = _coerce_train_value(field_name, value, where)

    divergences_raw, div_where = take("sweep", "divergences", "js")
    divergences = tuple(d.strip() for d in str(divergences_raw).split(",") if d.strip())
    for d in divergences:
        try:
            DivergenceKind.parse(d)
        except ValidationError as exc:
            raise ConfigError(str(exc), div_where or f"{origin}:[sweep]")
    seeds_raw, seeds_where = take("sweep", "seeds", "0")
    try:
        seeds = tuple(int(s) for s in str(seeds_raw).split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad seed list {seeds_raw!r}", seeds_where)

    spec = ExperimentSpec(
        name=name,
        vocab=vocab,
        length=length,
        policy=policy,
        base=base,
        target_kind=kind,
        feature=feature,
        beta=beta,
        choice_model=choice_model,
        moments=tuple(moments),
        fit_tol=float(fit_tol_raw),
        contexts=contexts,
        constraint=constraint,
        divergences=divergences,
        seeds=seeds,
        train_overrides=overrides,
    )
    try:
        spec.validate()
    except ValidationError as exc:
        raise ConfigError(str(exc), origin) from exc
    return spec


def load_config(path) -> ExperimentSpec:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(exc), str(path)) from exc
    return parse_config_text(text, origin=str(path))
