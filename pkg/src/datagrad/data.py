"""Synthetic examples and weighted datasets consumed by target-model training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, ShapeError, VocabError


@dataclass(frozen=True)
class SyntheticExample:
    """One generated sequence with its provenance.

    tokens: symbol ids in [0, V); prompt_id/group_id record where the
    rollout came from (-1 when not applicable).
    """

    tokens: tuple[int, ...]
    prompt_id: int = -1
    group_id: int = -1

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise VocabError("example must contain at least one token")
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


@dataclass
class WeightedDataset:
    """Ordered examples with one real weight per example.

    Weights are all 1.0 during actual target-model training; other values
    only appear inside finite-difference oracles.
    """

    examples: list[SyntheticExample]
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.examples))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.examples),):
            raise ShapeError(
                f"{len(self.examples)} examples but weights shape {self.weights.shape}"
            )

    def __len__(self) -> int:
        return len(self.examples)

    def require_nonempty(self) -> None:
        if not self.examples:
            raise EmptyBatch("dataset has no examples")

    def validate_tokens(self, vocab: int, max_len: int | None = None) -> None:
        """Check every symbol id < vocab and lengths within max_len."""
        for i, ex in enumerate(self.examples):
            if max_len is not None and len(ex.tokens) > max_len:
                raise VocabError(
                    f"example {i} has length {len(ex.tokens)} > {max_len}"
                )
            for t in ex.tokens:
                if not (0 <= t < vocab):
                    raise VocabError(f"example {i} has symbol {t} outside [0, {vocab})")

    def with_weights(self, weights: np.ndarray) -> "WeightedDataset":
        return WeightedDataset(self.examples, np.asarray(weights, dtype=np.float64))


def dataset_from_tokens(
    token_lists: list[tuple[int, ...]] | list[list[int]],
    prompt_ids: list[int] | None = None,
    group_ids: list[int] | None = None,
) -> WeightedDataset:
    """Build a unit-weight dataset from raw token sequences."""
    n = len(token_lists)
    prompt_ids = prompt_ids if prompt_ids is not None else [-1] * n
    group_ids = group_ids if group_ids is not None else [-1] * n
    examples = [
        SyntheticExample(tuple(toks), pid, gid)
        for toks, pid, gid in zip(token_lists, prompt_ids, group_ids)
    ]
    return WeightedDataset(examples)
