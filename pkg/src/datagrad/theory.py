"""Enumeration lab: exact policy gradients of the true and surrogate objectives.

With a tiny tabular policy (one prompt) and a tiny dataset size n, the space
of ordered datasets is enumerable, so two quantities are computable exactly
(up to f64):

* the true objective's gradient -- grad of E_{D ~ policy}[score(train(D))],
  via the score-function identity summed over every dataset atom;
* the surrogate gradient that per-example-reward policy updates follow --
  the expectation of sum_i weight_grad_i * grad_logprob(x_i).

Their gap is the quantity whose step-size / step-count scaling the sweep
reports.  Atoms are ordered tuples; the policy factorizes over examples.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import SyntheticExample, WeightedDataset
from .errors import EnumerationBudgetExceeded
from .models import ModelSpec
from .policy import PolicyParams, enumerate_sequences, grad_logprob, logprob
from .training import TrainConfig, metagradient, train


@dataclass
class EnumSetting:
    """An enumerable instance: one prompt, vocab^seq_len sequences, n slots."""

    policy_vocab: int
    seq_len: int
    n_examples: int
    model: ModelSpec
    objective: object
    train: TrainConfig
    atom_budget: int = 200_000

    def n_atoms(self) -> int:
        return (self.policy_vocab ** self.seq_len) ** self.n_examples

    def check_budget(self) -> None:
        if self.n_atoms() > self.atom_budget:
            raise EnumerationBudgetExceeded(
                f"{self.n_atoms()} dataset atoms exceed budget {self.atom_budget}"
            )


@dataclass
class _EnumTables:
    """theta-independent per-atom quantities, computed once per setting."""

    sequences: list[tuple[int, ...]]
    atoms: np.ndarray          # (n_atoms, n) sequence indices
    scores: np.ndarray         # (n_atoms,) objective at the trained model
    weight_grads: np.ndarray   # (n_atoms, n) per-example weight gradients


def _atom_dataset(setting: EnumSetting, seq_indices, sequences) -> WeightedDataset:
    examples = [
        SyntheticExample(sequences[s], prompt_id=0, group_id=0) for s in seq_indices
    ]
    return WeightedDataset(examples)


def build_tables(setting: EnumSetting, phi0) -> _EnumTables:
    """Train on every dataset atom once; record scores and weight gradients."""
    setting.check_budget()
    sequences = enumerate_sequences(setting.policy_vocab, setting.seq_len)
    atoms = np.array(
        list(itertools.product(range(len(sequences)), repeat=setting.n_examples)),
        dtype=np.intp,
    )
    scores = np.zeros(len(atoms))
    weight_grads = np.zeros((len(atoms), setting.n_examples))
    for a, seq_idx in enumerate(atoms):
        data = _atom_dataset(setting, seq_idx, sequences)
        report = metagradient(
            setting.model, data, setting.train, phi0, setting.objective
        )
        scores[a] = report.objective_value
        weight_grads[a] = report.weight_grads
    return _EnumTables(sequences, atoms, scores, weight_grads)


def _policy_tables(theta: PolicyParams, sequences):
    logps = np.array([logprob(theta, 0, s) for s in sequences])
    grads = np.stack([grad_logprob(theta, 0, s).ravel() for s in sequences])
    return logps, grads


def _atom_log_probs(logps: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    return logps[atoms].sum(axis=1)


def exact_objective_value(setting: EnumSetting, theta: PolicyParams, tables=None, phi0=None) -> float:
    """E_{D ~ policy}[score(train(D))] by full enumeration."""
    tables = tables or build_tables(setting, phi0)
    logps, _ = _policy_tables(theta, tables.sequences)
    probs = np.exp(_atom_log_probs(logps, tables.atoms))
    return float(np.sum(probs * tables.scores))


def exact_objective_gradient(
    setting: EnumSetting, theta: PolicyParams, tables=None, phi0=None
) -> np.ndarray:
    """Gradient of the true objective: sum_D pi(D) score_D grad log pi(D)."""
    tables = tables or build_tables(setting, phi0)
    logps, seq_grads = _policy_tables(theta, tables.sequences)
    probs = np.exp(_atom_log_probs(logps, tables.atoms))
    weight = probs * tables.scores
    coef = np.zeros(len(tables.sequences))
    for i in range(setting.n_examples):
        np.add.at(coef, tables.atoms[:, i], weight)
    return coef @ seq_grads


def exact_surrogate_gradient(
    setting: EnumSetting, theta: PolicyParams, tables=None, phi0=None
) -> np.ndarray:
    """Gradient the per-example-reward policy update follows, in expectation:
    sum_D pi(D) sum_i weight_grad_i(D) grad_logprob(x_i)."""
    tables = tables or build_tables(setting, phi0)
    logps, seq_grads = _policy_tables(theta, tables.sequences)
    probs = np.exp(_atom_log_probs(logps, tables.atoms))
    coef = np.zeros(len(tables.sequences))
    for i in range(setting.n_examples):
        np.add.at(coef, tables.atoms[:, i], probs * tables.weight_grads[:, i])
    return coef @ seq_grads


def surrogate_value(
    setting: EnumSetting,
    theta: PolicyParams,
    sampling_theta: PolicyParams,
    phi0,
) -> float:
    """The importance-weighted surrogate at (theta, sampling policy):
    E_{D ~ sampling}[score(train with weights pi_theta(x_i)/sampling(x_i)))].

    Used by finite-difference oracles; trains with genuinely off-1 weights.
    """
    setting.check_budget()
    sequences = enumerate_sequences(setting.policy_vocab, setting.seq_len)
    lp_new = np.array([logprob(theta, 0, s) for s in sequences])
    lp_old = np.array([logprob(sampling_theta, 0, s) for s in sequences])
    ratios = np.exp(lp_new - lp_old)
    total = 0.0
    for seq_idx in itertools.product(range(len(sequences)), repeat=setting.n_examples):
        data = _atom_dataset(setting, seq_idx, sequences)
        w = ratios[list(seq_idx)]
        phi_T, _ = train(setting.model, data, setting.train, phi0, weights=w)
        prob = float(np.exp(lp_old[list(seq_idx)].sum()))
        total += prob * setting.objective.value(phi_T)
    return total


# -- gap sweep -------------------------------------------------------------------


@dataclass
class SweepRow:
    lr: float
    steps: int
    batch_size: int
    gap: float


def gradient_gap_sweep(
    policy_vocab: int,
    seq_len: int,
    model: ModelSpec,
    objective,
    theta: PolicyParams,
    phi0,
    lrs,
    step_counts,
    batch_sizes,
    optimizer: str = "sgd",
    atom_budget: int = 200_000,
) -> list[SweepRow]:
    """Exact gradient-gap norm over an (lr, steps, batch) grid.

    Each grid point trains on sequential minibatches with n = steps * batch,
    the regime the approximation bound speaks about (one fresh batch per
    step).  The gap is the Euclidean norm over flattened policy parameters.
    """
    rows = []
    for steps in step_counts:
        for batch in batch_sizes:
            for lr in lrs:
                cfg = TrainConfig(
                    optimizer=optimizer,
                    lr=float(lr),
                    steps=int(steps),
                    batch_size=int(batch),
                    weight_decay=0.0,
                    batching="sequential-minibatches",
                )
                setting = EnumSetting(
                    policy_vocab=policy_vocab,
                    seq_len=seq_len,
                    n_examples=int(steps) * int(batch),
                    model=model,
                    objective=objective,
                    train=cfg,
                    atom_budget=atom_budget,
                )
                tables = build_tables(setting, phi0)
                g_true = exact_objective_gradient(setting, theta, tables)
                g_sur = exact_surrogate_gradient(setting, theta, tables)
                rows.append(
                    SweepRow(
                        lr=float(lr),
                        steps=int(steps),
                        batch_size=int(batch),
                        gap=float(np.linalg.norm(g_true - g_sur)),
                    )
                )
    return rows


# -- Monte-Carlo consistency -------------------------------------------------------


def mc_surrogate_gradient(
    setting: EnumSetting,
    theta: PolicyParams,
    n_draws: int,
    rng: np.random.Generator,
    tables=None,
    phi0=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean and standard error of the raw-reward score estimator.

    One draw samples a dataset (n i.i.d. sequences), computes per-example
    weight gradients and forms sum_i wg_i * grad_logprob(x_i).  Because the
    atom space is enumerable, draws reduce to a multinomial over atoms with
    the per-atom estimate precomputed; the estimator itself is unchanged.
    """
    tables = tables or build_tables(setting, phi0)
    logps, seq_grads = _policy_tables(theta, tables.sequences)
    probs = np.exp(_atom_log_probs(logps, tables.atoms))
    probs = probs / probs.sum()

    per_atom = np.zeros((len(tables.atoms), seq_grads.shape[1]))
    for i in range(setting.n_examples):
        per_atom += tables.weight_grads[:, i][:, None] * seq_grads[tables.atoms[:, i]]

    counts = rng.multinomial(n_draws, probs)
    mean = counts @ per_atom / n_draws
    second = counts @ (per_atom ** 2) / n_draws
    var = np.maximum(second - mean ** 2, 0.0)
    stderr = np.sqrt(var / n_draws)
    return mean, stderr
