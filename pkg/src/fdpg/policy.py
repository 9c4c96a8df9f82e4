"""Trainable softmax distributions over fixed-length token sequences.

Two families are provided on purpose: ``TabularPolicy`` carries one logit per
sequence and can represent any full-support target, while ``NGramPolicy``
factorizes autoregressively with a bounded context and is deliberately
mis-specified for generic targets when its order is small.
"""

from __future__ import annotations

import functools
import io
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .divergence import FiniteDistribution
from .errors import CapacityError, UnknownContextError, ValidationError

__all__ = [
    "SequenceSpace",
    "SparseGradient",
    "TabularPolicy",
    "NGramPolicy",
    "ConditionalPolicy",
    "normalized_entropy",
    "exact_normalized_entropy",
    "distinct_n",
    "tabular_from",
    "ngram_from",
    "save_policy",
    "load_policy",
]

DEFAULT_ENUMERATION_CAP = 1 << 20


@functools.lru_cache(maxsize=8)
def _cached_token_matrix(vocab_size: int, length: int) -> np.ndarray:
    idx = np.arange(vocab_size**length)
    cols = []
    for pos in range(length):
        power = vocab_size ** (length - 1 - pos)
        cols.append((idx // power) % vocab_size)
    mat = np.stack(cols, axis=1).astype(np.int64)
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True)
class SequenceSpace:
    """All sequences of ``length`` tokens drawn from ``vocab_size`` symbols."""

    vocab_size: int
    length: int
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP

    def __post_init__(self):
        if self.vocab_size < 1 or self.length < 1:
            raise ValidationError("vocab size and length must be positive")

    @property
    def size(self) -> int:
        return self.vocab_size**self.length

    def check_enumerable(self) -> None:
        if self.size > self.enumeration_cap:
            raise CapacityError(
                f"space has {self.size} sequences, above the cap "
                f"{self.enumeration_cap}; use sampled estimators instead"
            )

    def validate(self, tokens: Sequence[int]) -> None:
        if len(tokens) != self.length:
            raise ValidationError(
                f"sequence has length {len(tokens)}, expected {self.length}"
            )
        for t in tokens:
            if not 0 <= int(t) < self.vocab_size:
                raise ValidationError(f"token {t} out of range [0, {self.vocab_size})")

    def index(self, tokens: Sequence[int]) -> int:
        """Lexicographic rank of a sequence; inverse of sequence_at."""
        self.validate(tokens)
        idx = 0
        for t in tokens:
            idx = idx * self.vocab_size + int(t)
        return idx

    def sequence_at(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.size:
            raise ValidationError(f"index {index} out of range")
        out = []
        for _ in range(self.length):
            out.append(index % self.vocab_size)
            index //= self.vocab_size
        return tuple(reversed(out))

    def enumerate(self) -> Iterator[tuple[int, ...]]:
        """Yield every sequence exactly once in lexicographic order."""
        self.check_enumerable()
        for k in range(self.size):
            yield self.sequence_at(k)

    def token_matrix(self) -> np.ndarray:
        """(size, length) int matrix whose k-th row is sequence_at(k)."""
        self.check_enumerable()
        return _cached_token_matrix(self.vocab_size, self.length)

    def indices_of(self, samples: np.ndarray) -> np.ndarray:
        samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
        powers = self.vocab_size ** np.arange(self.length - 1, -1, -1, dtype=np.int64)
        return samples @ powers


@dataclass(frozen=True)
class SparseGradient:
    """Gradient entries as (flat parameter index, value), no duplicate indices."""

    indices: np.ndarray
    values: np.ndarray
    size: int

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.size)
        dense[self.indices] = self.values
        return dense


def _log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _draw_categorical(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """First index where u < cdf per row; robust to u landing past the top."""
    hits = u[:, None] < cdf_rows
    tokens = hits.argmax(axis=1)
    return np.where(hits.any(axis=1), tokens, cdf_rows.shape[1] - 1)


class TabularPolicy:
    """One logit per sequence; the softmax is the full joint distribution."""

    family = "tabular"

    def __init__(self, space: SequenceSpace, logits: np.ndarray | None = None):
        space.check_enumerable()
        self.space = space
        if logits is None:
            logits = np.zeros(space.size)
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (space.size,):
            raise ValidationError(
                f"expected {space.size} logits, got shape {logits.shape}"
            )
        self.logits = logits.copy()

    @property
    def n_params(self) -> int:
        return self.space.size

    def get_params(self) -> np.ndarray:
        return self.logits.reshape(-1)

    def set_params(self, params: np.ndarray) -> None:
        self.logits = np.asarray(params, dtype=np.float64).reshape(self.space.size)

    def all_log_probs(self) -> np.ndarray:
        return _log_softmax(self.logits)

    def log_prob(self, tokens: Sequence[int]) -> float:
        return float(self.all_log_probs()[self.space.index(tokens)])

    def sample_indices(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if count < 1:
            raise ValidationError("count must be >= 1")
        cdf = np.cumsum(np.exp(self.all_log_probs()))
        u = rng.random(count)
        return np.minimum(np.searchsorted(cdf, u, side="right"), self.space.size - 1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """(count, length) token matrix of i.i.d. draws."""
        return self.space.token_matrix()[self.sample_indices(rng, count)]

    def grad_log_prob(self, tokens: Sequence[int]) -> SparseGradient:
        """d log pi(x) / d logits = onehot(x) - softmax(logits)."""
        i = self.space.index(tokens)
        values = -np.exp(self.all_log_probs())
        values[i] += 1.0
        return SparseGradient(np.arange(self.space.size), values, self.space.size)

    def exact_distribution(self) -> FiniteDistribution:
        probs = np.exp(self.all_log_probs())
        return FiniteDistribution(range(self.space.size), probs / probs.sum())

    def log_probs_of_indices(self, indices: np.ndarray) -> np.ndarray:
        return self.all_log_probs()[indices]

    def accumulate_weighted_scores(
        self, indices: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        """sum_i w_i * grad log pi(x_i) as a dense vector, in fixed order."""
        grad = np.zeros(self.space.size)
        np.add.at(grad, indices, weights)
        grad -= float(weights.sum()) * np.exp(self.all_log_probs())
        return grad


class NGramPolicy:
    """Autoregressive policy with one softmax row per padded (n-1)-token context.

    Contexts shorter than n-1 near the sequence start are padded with a BOS
    symbol, so there are (vocab_size+1)**(order-1) rows.  Order 1 is a single
    shared row; any order with n-1 < length-1 cannot represent generic joints.
    """

    family = "ngram"

    def __init__(self, space: SequenceSpace, order: int, logits: np.ndarray | None = None):
        if order < 1:
            raise ValidationError("order must be >= 1")
        self.space = space
        self.order = order
        self.n_rows = (space.vocab_size + 1) ** (order - 1)
        shape = (self.n_rows, space.vocab_size)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValidationError(f"expected logits of shape {shape}, got {logits.shape}")
        self.logits = logits.copy()

    @property
    def n_params(self) -> int:
        return self.n_rows * self.space.vocab_size

    def get_params(self) -> np.ndarray:
        return self.logits.reshape(-1)

    def set_params(self, params: np.ndarray) -> None:
        self.logits = np.asarray(params, dtype=np.float64).reshape(
            self.n_rows, self.space.vocab_size
        )

    def _row_log_softmax(self) -> np.ndarray:
        return _log_softmax(self.logits, axis=1)

    def context_row(self, tokens: Sequence[int], pos: int) -> int:
        """Row index of the BOS-padded context preceding position pos."""
        row = 0
        base = self.space.vocab_size + 1
        for j in range(pos - (self.order - 1), pos):
            row = row * base + (0 if j < 0 else int(tokens[j]) + 1)
        return row

    def context_rows_matrix(self, mat: np.ndarray) -> np.ndarray:
        """(n, length) row indices for every position of every sequence."""
        n, length = mat.shape
        base = self.space.vocab_size + 1
        rows = np.zeros((n, length), dtype=np.int64)
        for pos in range(length):
            acc = np.zeros(n, dtype=np.int64)
            for j in range(pos - (self.order - 1), pos):
                if j >= 0:
                    acc = acc * base + (mat[:, j] + 1)
                else:
                    acc = acc * base
            rows[:, pos] = acc
        return rows

    def log_prob(self, tokens: Sequence[int]) -> float:
        self.space.validate(tokens)
        table = self._row_log_softmax()
        total = 0.0
        for pos, tok in enumerate(tokens):
            total += table[self.context_row(tokens, pos), int(tok)]
        return float(total)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if count < 1:
            raise ValidationError("count must be >= 1")
        cdf = np.cumsum(np.exp(self._row_log_softmax()), axis=1)
        u = rng.random((count, self.space.length))
        out = np.zeros((count, self.space.length), dtype=np.int64)
        base = self.space.vocab_size + 1
        k = self.order - 1
        rows = np.zeros(count, dtype=np.int64)  # all-BOS context
        for pos in range(self.space.length):
            out[:, pos] = _draw_categorical(cdf[rows], u[:, pos])
            if k > 0:
                # Slide the context window: drop the oldest symbol, append the new.
                rows = (rows % base ** (k - 1)) * base + (out[:, pos] + 1)
        return out

    def sample_indices(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.space.indices_of(self.sample(rng, count))

    def grad_log_prob(self, tokens: Sequence[int]) -> SparseGradient:
        self.space.validate(tokens)
        softmax = np.exp(self._row_log_softmax())
        touched: dict[int, np.ndarray] = {}
        for pos, tok in enumerate(tokens):
            row = self.context_row(tokens, pos)
            if row not in touched:
                touched[row] = np.zeros(self.space.vocab_size)
            touched[row][int(tok)] += 1.0
            touched[row] -= softmax[row]
        V = self.space.vocab_size
        indices, values = [], []
        for row in sorted(touched):
            for v in range(V):
                indices.append(row * V + v)
                values.append(touched[row][v])
        return SparseGradient(
            np.asarray(indices, dtype=np.int64),
            np.asarray(values, dtype=np.float64),
            self.n_params,
        )

    def all_log_probs(self) -> np.ndarray:
        self.space.check_enumerable()
        mat = self.space.token_matrix()
        table = self._row_log_softmax()
        rows = self.context_rows_matrix(mat)
        return table[rows, mat].sum(axis=1)

    def log_probs_of_indices(self, indices: np.ndarray) -> np.ndarray:
        return self.all_log_probs()[indices]

    def exact_distribution(self) -> FiniteDistribution:
        probs = np.exp(self.all_log_probs())
        return FiniteDistribution(range(self.space.size), probs / probs.sum())

    def accumulate_weighted_scores_tokens(
        self, mat: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        """sum_i w_i * grad log pi(x_i) over a (n, length) token matrix."""
        V = self.space.vocab_size
        length = mat.shape[1]
        softmax = np.exp(self._row_log_softmax())
        rows = self.context_rows_matrix(mat)
        per_position = np.repeat(weights, length)
        grad = np.zeros(self.n_rows * V)
        np.add.at(grad, (rows * V + mat).reshape(-1), per_position)
        row_weight = np.zeros(self.n_rows)
        np.add.at(row_weight, rows.reshape(-1), per_position)
        grad = grad.reshape(self.n_rows, V) - row_weight[:, None] * softmax
        return grad.reshape(-1)

    def accumulate_weighted_scores(
        self, indices: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        mat = self.space.token_matrix()[indices]
        return self.accumulate_weighted_scores_tokens(mat, weights)


Policy = TabularPolicy | NGramPolicy


class ConditionalPolicy:
    """Independent per-context policies pi(.|c), concatenated parameter-wise."""

    family = "conditional"

    def __init__(self, contexts: Sequence, policies: Sequence[Policy]):
        if len(contexts) != len(policies):
            raise ValidationError("one policy per context required")
        self.contexts = tuple(contexts)
        self.policies = list(policies)
        self._offsets = np.cumsum([0] + [p.n_params for p in self.policies])

    @property
    def n_params(self) -> int:
        return int(self._offsets[-1])

    def policy_for(self, context):
        try:
            return self.policies[self.contexts.index(context)]
        except ValueError:
            raise UnknownContextError(context) from None

    def block(self, context) -> tuple[int, int]:
        i = self.contexts.index(context)
        return int(self._offsets[i]), int(self._offsets[i + 1])

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.get_params() for p in self.policies])

    def set_params(self, params: np.ndarray) -> None:
        for i, p in enumerate(self.policies):
            p.set_params(params[self._offsets[i] : self._offsets[i + 1]])


def normalized_entropy(samples: np.ndarray, policy) -> float:
    """Per-token average negative log-probability over a sample batch."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    if samples.shape[0] == 0:
        raise ValidationError("samples must be non-empty")
    idx = policy.space.indices_of(samples)
    total = float(policy.all_log_probs()[idx].sum())
    n, length = samples.shape
    return -total / (n * length)


def exact_normalized_entropy(policy) -> float:
    """sum_x pi(x) (-log pi(x)) / length on an enumerable space."""
    logp = policy.all_log_probs()
    probs = np.exp(logp)
    return float(-(probs * logp).sum() / policy.space.length)


def distinct_n(samples: np.ndarray, n: int) -> float:
    """Mean fraction of unique n-grams within each sample."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    length = samples.shape[1]
    if n < 1 or n > length:
        raise ValidationError(f"n must be in [1, {length}]")
    windows = length - n + 1
    scores = []
    for row in samples:
        grams = {tuple(row[i : i + n]) for i in range(windows)}
        scores.append(len(grams) / windows)
    return float(np.mean(scores))


def tabular_from(base) -> TabularPolicy:
    """Warm start: a tabular policy equal to the base distribution."""
    return TabularPolicy(base.space, base.all_log_probs())


def ngram_from(base, order: int) -> NGramPolicy:
    """Warm start by exact distillation: the n-gram closest to the base in
    forward KL, i.e. matching the base's position-weighted conditionals."""
    template = NGramPolicy(base.space, order)
    space = base.space
    mat = space.token_matrix()
    rows = template.context_rows_matrix(mat)
    p = np.exp(base.all_log_probs())
    V = space.vocab_size
    acc = np.zeros(template.n_rows * V)
    np.add.at(acc, (rows * V + mat).reshape(-1), np.repeat(p, space.length))
    acc = acc.reshape(template.n_rows, V)
    row_total = acc.sum(axis=1)
    logits = np.zeros_like(acc)
    visited = row_total > 0
    logits[visited] = np.log(acc[visited] / row_total[visited, None])
    return NGramPolicy(space, order, logits)


_CHECKPOINT_MAGIC = "fdpg-policy v1"


def save_policy(policy, path) -> None:
    """Versioned text checkpoint; logits use 17 significant digits."""
    buf = io.StringIO()
    buf.write(_CHECKPOINT_MAGIC + "\n")
    buf.write(f"kind {policy.family}\n")
    buf.write(f"vocab {policy.space.vocab_size}\n")
    buf.write(f"length {policy.space.length}\n")
    if policy.family == "ngram":
        buf.write(f"order {policy.order}\n")
    buf.write("logits\n")
    for v in policy.get_params():
        buf.write(f"{v:.17g}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_policy(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise ValidationError(f"not a policy checkpoint: {path}")
    header = {}
    i = 1
    while lines[i] != "logits":
        key, value = lines[i].split(" ", 1)
        header[key] = value
        i += 1
    params = np.asarray([float(v) for v in lines[i + 1 :]], dtype=np.float64)
    space = SequenceSpace(int(header["vocab"]), int(header["length"]))
    if header["kind"] == "tabular":
        return TabularPolicy(space, params)
    if header["kind"] == "ngram":
        order = int(header["order"])
        rows = (space.vocab_size + 1) ** (order - 1)
        return NGramPolicy(space, order, params.reshape(rows, space.vocab_size))
    raise ValidationError(f"unknown policy kind {header['kind']!r}")
