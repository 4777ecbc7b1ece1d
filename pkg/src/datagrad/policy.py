"""Tabular prompt-conditioned generator policy with exact log-probabilities.

The policy stores one logit row per (prompt, position); a sequence's
probability factorizes over positions, so normalization, score functions and
full-distribution enumeration are all exact.  Sampling at temperature t uses
softmax(logits / t); t = 0 decodes the argmax.  Stored rollout
log-probabilities are always the temperature-1 values (the distribution the
policy gradient differentiates).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticExample, WeightedDataset
from .errors import ConfigError, EmptyBatch, VocabError
from .params import ParamStore  # noqa: F401  (re-exported type surface)


@dataclass
class PolicyParams:
    """Logits indexed (prompt, position, symbol); all float64."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3:
            raise ConfigError("policy logits must be (prompts, positions, symbols)")

    @classmethod
    def uniform(cls, n_prompts: int, seq_len: int, vocab: int) -> "PolicyParams":
        return cls(np.zeros((n_prompts, seq_len, vocab)))

    @property
    def n_prompts(self) -> int:
        return self.logits.shape[0]

    @property
    def seq_len(self) -> int:
        return self.logits.shape[1]

    @property
    def vocab(self) -> int:
        return self.logits.shape[2]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy())


@dataclass(frozen=True)
class PromptSet:
    """Prompt ids split into train and validation; ids index policy rows."""

    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...] = ()
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if set(self.train_ids) & set(self.val_ids):
            raise ConfigError("train and val prompt ids must be disjoint")
        if not self.train_ids:
            raise ConfigError("need at least one train prompt")

    @property
    def n_prompts(self) -> int:
        all_ids = self.train_ids + self.val_ids
        return max(all_ids) + 1


@dataclass
class Rollout:
    """One sampled sequence with its provenance and RL annotations."""

    prompt_id: int
    group: int
    tokens: tuple[int, ...]
    logprob: float
    reward: float = float("nan")
    advantage: float = float("nan")


@dataclass
class RolloutBatch:
    rollouts: list[Rollout] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rollouts)

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])

    def advantages(self) -> np.ndarray:
        return np.array([r.advantage for r in self.rollouts])

    def group_labels(self) -> np.ndarray:
        return np.array([r.group for r in self.rollouts])

    def prompt_labels(self) -> np.ndarray:
        return np.array([r.prompt_id for r in self.rollouts])

    def token_lists(self) -> list[tuple[int, ...]]:
        return [r.tokens for r in self.rollouts]

    def to_dataset(self) -> WeightedDataset:
        examples = [
            SyntheticExample(r.tokens, prompt_id=r.prompt_id, group_id=r.group)
            for r in self.rollouts
        ]
        return WeightedDataset(examples)


# -- distributions ---------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def position_probs(theta: PolicyParams, prompt_id: int, temperature: float = 1.0):
    """(seq_len, vocab) sampling probabilities for one prompt."""
    logits = theta.logits[prompt_id]
    if temperature == 0.0:
        probs = np.zeros_like(logits)
        probs[np.arange(theta.seq_len), logits.argmax(axis=-1)] = 1.0
        return probs
    return np.exp(_log_softmax(logits / temperature))


def logprob(theta: PolicyParams, prompt_id: int, tokens) -> float:
    """Temperature-1 log-probability of the token sequence under the policy."""
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) > theta.seq_len:
        raise VocabError(f"sequence length {len(tokens)} > policy length {theta.seq_len}")
    for t in tokens:
        if not (0 <= t < theta.vocab):
            raise VocabError(f"symbol {t} outside [0, {theta.vocab})")
    logp = _log_softmax(theta.logits[prompt_id, : len(tokens)])
    return float(logp[np.arange(len(tokens)), tokens].sum())


def grad_logprob(theta: PolicyParams, prompt_id: int, tokens) -> np.ndarray:
    """d logprob / d logits: onehot(token) - softmax per covered position."""
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) > theta.seq_len:
        raise VocabError(f"sequence length {len(tokens)} > policy length {theta.seq_len}")
    for t in tokens:
        if not (0 <= t < theta.vocab):
            raise VocabError(f"symbol {t} outside [0, {theta.vocab})")
    out = np.zeros_like(theta.logits)
    probs = np.exp(_log_softmax(theta.logits[prompt_id, : len(tokens)]))
    out[prompt_id, : len(tokens)] = -probs
    out[prompt_id, np.arange(len(tokens)), tokens] += 1.0
    return out


def sample_rollouts(
    theta: PolicyParams,
    prompt_ids,
    n_groups: int,
    n_per_group: int,
    temperature: float,
    rng: np.random.Generator,
) -> RolloutBatch:
    """n_per_group i.i.d. sequences for every (group, prompt) pair.

    Sequences are full length (no end-of-sequence symbol).  Stored logprobs
    are the temperature-1 values regardless of the sampling temperature.
    """
    prompt_ids = list(prompt_ids)
    if not prompt_ids:
        raise ConfigError("empty prompt set")
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    batch = RolloutBatch()
    for q in prompt_ids:
        probs = position_probs(theta, q, temperature)
        cdf = np.cumsum(probs, axis=-1)
        cdf[:, -1] = 1.0
        for g in range(n_groups):
            if temperature == 0.0:
                toks = theta.logits[q].argmax(axis=-1)
                draws = np.tile(toks, (n_per_group, 1))
            else:
                u = rng.random((n_per_group, theta.seq_len))
                draws = np.empty((n_per_group, theta.seq_len), dtype=np.intp)
                for pos in range(theta.seq_len):
                    draws[:, pos] = np.searchsorted(cdf[pos], u[:, pos], side="right")
            for row in draws:
                toks = tuple(int(t) for t in row)
                batch.rollouts.append(
                    Rollout(
                        prompt_id=q,
                        group=g,
                        tokens=toks,
                        logprob=logprob(theta, q, toks),
                    )
                )
    return batch


# -- diagnostics -----------------------------------------------------------------


def bigram_entropy(token_lists) -> float:
    """Shannon entropy (nats) of the pooled adjacent-pair distribution.

    Sequences of length 1 contribute no pairs; a batch with no pairs at all
    has entropy 0 (a point mass is the natural degenerate reading).
    """
    token_lists = list(token_lists)
    if not token_lists:
        raise EmptyBatch("no rollouts")
    counts: dict[tuple[int, int], int] = {}
    for toks in token_lists:
        for a, b in zip(toks[:-1], toks[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    total = sum(counts.values())
    if total == 0:
        return 0.0
    probs = np.array(sorted(counts.values()), dtype=np.float64) / total
    return float(-(probs * np.log(probs)).sum())


def exact_bigram_entropy(theta: PolicyParams, prompt_ids) -> float:
    """Entropy of the policy's true pooled bigram law (uniform over prompts
    and adjacent position pairs), for checking the empirical estimator."""
    prompt_ids = list(prompt_ids)
    if theta.seq_len < 2:
        return 0.0
    law = np.zeros((theta.vocab, theta.vocab))
    for q in prompt_ids:
        probs = position_probs(theta, q, 1.0)
        for pos in range(theta.seq_len - 1):
            law += np.outer(probs[pos], probs[pos + 1])
    law /= law.sum()
    nz = law[law > 0]
    return float(-(nz * np.log(nz)).sum())


def enumerate_sequences(vocab: int, length: int) -> list[tuple[int, ...]]:
    """All vocab^length token tuples in lexicographic order."""
    seqs: list[tuple[int, ...]] = [()]
    for _ in range(length):
        seqs = [s + (t,) for s in seqs for t in range(vocab)]
    return seqs


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"DGPOL\x00"
_CKPT_VERSION = 1


def save_policy(theta: PolicyParams, path: str) -> None:
    """Versioned binary checkpoint: header (P, L, V), float64 LE payload."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack(
                "<IIII", _CKPT_VERSION, theta.n_prompts, theta.seq_len, theta.vocab
            )
        )
        fh.write(np.ascontiguousarray(theta.logits, dtype="<f8").tobytes())


def load_policy(path: str) -> PolicyParams:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a policy checkpoint")
        version, p, l, v = struct.unpack("<IIII", fh.read(16))
        if version != _CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        payload = np.frombuffer(fh.read(8 * p * l * v), dtype="<f8")
        if payload.size != p * l * v:
            raise ConfigError(f"{path}: truncated checkpoint")
        return PolicyParams(payload.reshape(p, l, v).copy())
