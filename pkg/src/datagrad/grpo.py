"""Outer RL loop: reward assignment, group-relative advantages, clipped update.

Reward modes:

* ``metagrad``       -- per-example data-weight gradients of the downstream
  objective, from one training run over all rollouts (cross-group batching)
  or one run per group.
* ``naive``          -- every rollout in a group gets the group's scalar
  post-training objective value; advantages then use a single all-rollouts
  group (per-group standardization would erase the signal entirely).
* ``edit-distance``  -- mean negative Levenshtein distance to a reference set;
  no target-model training involved.

Advantages standardize rewards within each prompt's rollouts using the
population standard deviation with a 1e-8 floor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import models, policy as policy_mod
from .data import WeightedDataset
from .errors import ConfigError, NumericalBlowup
from .metrics import MetricSpec, decode_patch, metric_value, pixel_accuracy, reward_objective
from .models import ModelSpec
from .params import ParamStore
from .policy import PolicyParams, PromptSet, RolloutBatch, grad_logprob, logprob, sample_rollouts
from .seeding import stream
from .training import TrainConfig, metagradient, train

REWARD_MODES = ("metagrad", "naive", "edit-distance")

ADVANTAGE_SIGMA_FLOOR = 1e-8


@dataclass
class GrpoConfig:
    """Everything one outer-loop run needs."""

    model: ModelSpec
    metric: MetricSpec
    train: TrainConfig
    prompts: PromptSet
    seq_len: int
    outer_steps: int = 100
    n_groups: int = 4
    n_per_group: int = 8
    cross_group_batching: bool = True
    clip_eps: float = 0.2
    policy_lr: float = 0.1
    kl_coef: float = 0.0
    reward_mode: str = "metagrad"
    train_temperature: float = 1.0
    val_temperature: float = 1.0
    val_every: int = 1
    edit_references: tuple[tuple[int, ...], ...] = ()
    seed: int = 0

    def validate(self) -> None:
        self.train.validate()
        if self.outer_steps < 0:
            raise ConfigError("outer_steps must be >= 0")
        if self.n_groups < 1:
            raise ConfigError("need n_groups >= 1")
        if self.n_per_group < 1:
            raise ConfigError("need n_per_group >= 1")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be > 0")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be >= 0")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}")
        if self.reward_mode == "naive" and self.cross_group_batching:
            raise ConfigError("naive rewards are incompatible with cross-group batching")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")


@dataclass
class RunRecord:
    """One outer step's statistics; val_* fields are nan on skipped steps."""

    step: int
    reward_mean: float
    reward_std: float
    reward_min: float
    reward_max: float
    advantage_mean: float
    advantage_std: float
    val_metric_loss: float
    val_pixel_accuracy: float
    val_norm_delta: float
    val_bigram_entropy: float
    seed: int
    wall_time_s: float


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ValidationResult:
    metric_loss: float
    pixel_acc: float
    norm_delta: float
    entropy: float
    decoded: np.ndarray | None


# -- rewards ---------------------------------------------------------------------


def levenshtein(a, b) -> int:
    """Classic edit distance over symbol sequences."""
    a, b = tuple(a), tuple(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, sa in enumerate(a, start=1):
        cur = [i]
        for j, sb in enumerate(b, start=1):
            cur.append(
                min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (sa != sb))
            )
        prev = cur
    return prev[-1]


def _training_order(batch: RolloutBatch) -> list[int]:
    # group-major, prompt-major, stable in sampling order; keeps each group's
    # examples contiguous so sequential minibatches see whole groups
    return sorted(
        range(len(batch)),
        key=lambda i: (batch.rollouts[i].group, batch.rollouts[i].prompt_id),
    )


def _ordered_dataset(batch: RolloutBatch, order: list[int]) -> WeightedDataset:
    sub = RolloutBatch([batch.rollouts[i] for i in order])
    return sub.to_dataset()


def assign_rewards(
    batch: RolloutBatch,
    mode: str,
    model: ModelSpec,
    train_config: TrainConfig,
    metric: MetricSpec,
    phi0: ParamStore,
    edit_references: tuple[tuple[int, ...], ...] = (),
    cross_group_batching: bool = True,
) -> np.ndarray:
    """Per-rollout rewards under the chosen mode; see module docstring."""
    if mode not in REWARD_MODES:
        raise ConfigError(f"unknown reward mode {mode!r}")
    n = len(batch)
    rewards = np.zeros(n)

    if mode == "edit-distance":
        refs = edit_references or _references_from_metric(metric)
        for i, r in enumerate(batch.rollouts):
            rewards[i] = -float(np.mean([levenshtein(r.tokens, ref) for ref in refs]))
        return rewards

    objective = reward_objective(metric, model, phi0)
    order = _training_order(batch)
    groups = sorted({batch.rollouts[i].group for i in order})

    if mode == "metagrad" and cross_group_batching:
        data = _ordered_dataset(batch, order)
        tau = metagradient(model, data, train_config, phi0, objective).weight_grads
        rewards[np.asarray(order)] = tau
        return rewards

    for g in groups:
        members = [i for i in order if batch.rollouts[i].group == g]
        data = _ordered_dataset(batch, members)
        if mode == "metagrad":
            tau = metagradient(model, data, train_config, phi0, objective).weight_grads
            rewards[np.asarray(members)] = tau
        else:  # naive: identical oriented scalar for the whole group
            phi_T, _ = train(model, data, train_config, phi0)
            rewards[np.asarray(members)] = objective.value(phi_T)
    return rewards


def _references_from_metric(metric: MetricSpec) -> tuple[tuple[int, ...], ...]:
    if metric.kind == "target-string":
        return (metric.target_tokens,)
    if metric.kind == "heldout-loss":
        return tuple(ex.tokens for ex in metric.eval_data.examples)
    raise ConfigError(
        "edit-distance rewards need explicit references for this metric kind"
    )


def compute_advantages(rewards: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Standardize rewards within each group label: (r - mean) / max(sigma, 1e-8)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    groups = np.asarray(groups)
    if rewards.shape != groups.shape:
        raise ConfigError("rewards and groups must align")
    out = np.zeros_like(rewards)
    for g in np.unique(groups):
        mask = groups == g
        r = rewards[mask]
        sigma = float(r.std())  # population std
        out[mask] = (r - r.mean()) / max(sigma, ADVANTAGE_SIGMA_FLOOR)
    return out


# -- policy update ---------------------------------------------------------------


def grpo_update(
    theta: PolicyParams,
    batch: RolloutBatch,
    advantages: np.ndarray,
    clip_eps: float,
    policy_lr: float,
    kl_coef: float = 0.0,
    theta_ref: PolicyParams | None = None,
) -> PolicyParams:
    """One ascent step on the clipped-ratio surrogate (sequence-level mean).

    ratio = exp(logprob_theta - logprob_sampled); the min(unclipped, clipped)
    branch rule zeroes the gradient where the clipped branch is active and
    saturated.  kl_coef > 0 subtracts an exact KL(theta || theta_ref) penalty
    over the covered (prompt, position) rows; kl_coef = 0 drops the term.
    """
    if len(batch) != len(advantages):
        raise ConfigError("one advantage per rollout required")
    surrogate = 0.0
    grad = np.zeros_like(theta.logits)
    for r, adv in zip(batch.rollouts, advantages):
        lp_new = logprob(theta, r.prompt_id, r.tokens)
        ratio = float(np.exp(lp_new - r.logprob))
        unclipped = ratio * adv
        clipped = float(np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)) * adv
        surrogate += min(unclipped, clipped)
        if unclipped <= clipped:
            grad += unclipped * grad_logprob(theta, r.prompt_id, r.tokens)
    n = len(batch)
    surrogate /= n
    grad /= n

    if kl_coef > 0.0:
        if theta_ref is None:
            raise ConfigError("kl_coef > 0 requires a reference policy")
        prompts = sorted({r.prompt_id for r in batch.rollouts})
        kl_val, kl_grad = _kl_penalty(theta, theta_ref, prompts)
        surrogate -= kl_coef * kl_val
        grad -= kl_coef * kl_grad

    if not np.isfinite(surrogate) or not np.all(np.isfinite(grad)):
        raise NumericalBlowup("non-finite policy surrogate")
    return PolicyParams(theta.logits + policy_lr * grad)


def _kl_penalty(theta: PolicyParams, ref: PolicyParams, prompts):
    """Exact mean KL(theta || ref) over the given prompts' position rows."""
    total = 0.0
    grad = np.zeros_like(theta.logits)
    rows = 0
    for q in prompts:
        p = policy_mod.position_probs(theta, q, 1.0)
        r = policy_mod.position_probs(ref, q, 1.0)
        log_ratio = np.log(p) - np.log(r)
        kl_rows = (p * log_ratio).sum(axis=-1)
        total += float(kl_rows.sum())
        grad[q] = p * (log_ratio - kl_rows[:, None])
        rows += p.shape[0]
    return total / rows, grad / rows


# -- outer loop ------------------------------------------------------------------


def validate_policy(
    theta: PolicyParams,
    cfg: GrpoConfig,
    phi0: ParamStore,
    rng: np.random.Generator,
) -> ValidationResult:
    """Fresh rollouts, fresh target-model training from phi0, metric readout.

    Uses the validation prompt split when present; a tabular policy cannot
    generalize across prompt rows, so presets without transferable prompt
    structure validate on fresh samples from the training rows instead.
    """
    prompt_ids = cfg.prompts.val_ids or cfg.prompts.train_ids
    n_needed = _validation_size(cfg)
    per_prompt = -(-n_needed // len(prompt_ids))  # ceil
    batch = sample_rollouts(
        theta, prompt_ids, 1, per_prompt, cfg.val_temperature, rng
    )
    rollouts = batch.rollouts[:n_needed]
    data = RolloutBatch(rollouts).to_dataset()
    phi_T, _ = train(cfg.model, data, cfg.train, phi0)

    loss_val = metric_value(cfg.metric, cfg.model, phi_T, phi0)
    pixel_acc = float("nan")
    decoded = None
    if cfg.metric.kind == "patch-pattern":
        p = cfg.metric.patch
        decoded = decode_patch(phi_T, phi0, p.tensor, p.row, p.col, p.rows, p.cols)
        pixel_acc = pixel_accuracy(decoded, p.pattern)
    norm_delta = float("nan")
    if cfg.metric.kind == "l2-norm":
        before = float(np.linalg.norm(phi0[cfg.metric.tensor]))
        norm_delta = before - loss_val
    entropy = policy_mod.bigram_entropy([r.tokens for r in rollouts])
    return ValidationResult(loss_val, pixel_acc, norm_delta, entropy, decoded)


def _validation_size(cfg: GrpoConfig) -> int:
    if cfg.train.batching == "sequential-minibatches":
        return cfg.train.steps * cfg.train.batch_size
    return cfg.n_groups * cfg.n_per_group * len(cfg.prompts.train_ids)


def run_dpg(
    cfg: GrpoConfig,
    theta_init: PolicyParams | None = None,
    on_validate=None,
) -> tuple[PolicyParams, RunLog]:
    """outer_steps of sample -> reward -> advantage -> update, with validation.

    The target model resets to its seeded initialization on every reward
    computation and every validation (the learning algorithm is stateless).
    on_validate(step, ValidationResult) fires after each validated step.
    """
    cfg.validate()
    theta = (
        theta_init.copy()
        if theta_init is not None
        else PolicyParams.uniform(cfg.prompts.n_prompts, cfg.seq_len, cfg.model.vocab)
    )
    if theta.vocab != cfg.model.vocab:
        raise ConfigError("policy vocab must match the target model vocab")
    theta_ref = theta.copy() if cfg.kl_coef > 0 else None
    phi0 = models.init_params(cfg.model)
    log = RunLog()

    for step in range(1, cfg.outer_steps + 1):
        t0 = time.perf_counter()
        try:
            rollout_rng = stream(cfg.seed, "rollouts", step)
            batch = sample_rollouts(
                theta,
                cfg.prompts.train_ids,
                cfg.n_groups,
                cfg.n_per_group,
                cfg.train_temperature,
                rollout_rng,
            )
            rewards = assign_rewards(
                batch,
                cfg.reward_mode,
                cfg.model,
                cfg.train,
                cfg.metric,
                phi0,
                edit_references=cfg.edit_references,
                cross_group_batching=cfg.cross_group_batching,
            )
            for r, rew in zip(batch.rollouts, rewards):
                r.reward = float(rew)
            labels = (
                np.zeros(len(batch), dtype=int)
                if cfg.reward_mode == "naive"
                else batch.prompt_labels()
            )
            advantages = compute_advantages(rewards, labels)
            for r, adv in zip(batch.rollouts, advantages):
                r.advantage = float(adv)
            theta = grpo_update(
                theta,
                batch,
                advantages,
                cfg.clip_eps,
                cfg.policy_lr,
                cfg.kl_coef,
                theta_ref=theta_ref,
            )

            val = None
            if step % cfg.val_every == 0 or step == cfg.outer_steps:
                val = validate_policy(theta, cfg, phi0, stream(cfg.seed, "val", step))
                if on_validate is not None:
                    on_validate(step, val)
        except NumericalBlowup as exc:
            raise NumericalBlowup(f"outer step {step}: {exc}", step=step) from exc

        log.records.append(
            RunRecord(
                step=step,
                reward_mean=float(rewards.mean()),
                reward_std=float(rewards.std()),
                reward_min=float(rewards.min()),
                reward_max=float(rewards.max()),
                advantage_mean=float(advantages.mean()),
                advantage_std=float(advantages.std()),
                val_metric_loss=val.metric_loss if val else float("nan"),
                val_pixel_accuracy=val.pixel_acc if val else float("nan"),
                val_norm_delta=val.norm_delta if val else float("nan"),
                val_bigram_entropy=val.entropy if val else float("nan"),
                seed=cfg.seed,
                wall_time_s=time.perf_counter() - t0,
            )
        )
    return theta, log
