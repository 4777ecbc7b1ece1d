"""Differentiable downstream metrics and their decoding companions.

Every metric kind is stored as a loss (lower is better); the reward side
wraps it via ``reward_objective`` so that policy rewards always mean
"higher is better".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .data import WeightedDataset
from .errors import ConfigError, RegionError, ShapeError
from .models import ModelSpec
from .params import ParamStore

METRIC_KINDS = ("patch-pattern", "l2-norm", "heldout-loss", "target-string")


@dataclass
class PatchPatternSpec:
    """A +-1 pattern to press into a sub-matrix of a named tensor.

    The patch is (tensor, row, col, rows, cols); pattern must be exactly
    that shape with entries in {-1, +1}.  sharpness is the logistic scale.
    """

    pattern: np.ndarray
    tensor: str = "lm_head"
    row: int = 0
    col: int = 0
    sharpness: float = 20.0

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.pattern.ndim != 2:
            raise ShapeError("pattern must be a matrix")
        if not np.all(np.abs(self.pattern) == 1.0):
            raise ConfigError("pattern entries must be exactly -1 or +1")
        if not self.sharpness > 0:
            raise ConfigError("sharpness must be > 0")

    @property
    def rows(self) -> int:
        return self.pattern.shape[0]

    @property
    def cols(self) -> int:
        return self.pattern.shape[1]


@dataclass
class MetricSpec:
    """Which downstream quantity to optimize; all kinds are minimized."""

    kind: str
    patch: PatchPatternSpec | None = None
    tensor: str = "lm_head"
    eval_data: WeightedDataset | None = None
    target_tokens: tuple[int, ...] = field(default_factory=tuple)

    orientation = "minimize"

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ConfigError(f"unknown metric kind {self.kind!r}")
        if self.kind == "patch-pattern" and self.patch is None:
            raise ConfigError("patch-pattern metric needs a PatchPatternSpec")
        if self.kind == "heldout-loss" and self.eval_data is None:
            raise ConfigError("heldout-loss metric needs eval_data")
        if self.kind == "target-string" and not self.target_tokens:
            raise ConfigError("target-string metric needs target_tokens")


# -- patch machinery -------------------------------------------------------------


def _patch_view(phi: ParamStore, tensor: str, row: int, col: int, rows: int, cols: int):
    mat = phi[tensor]
    if mat.ndim != 2:
        raise RegionError(f"{tensor} is not a matrix")
    if row < 0 or col < 0 or row + rows > mat.shape[0] or col + cols > mat.shape[1]:
        raise RegionError(
            f"patch {rows}x{cols} at ({row},{col}) outside {tensor} shape {mat.shape}"
        )
    return mat[row : row + rows, col : col + cols]


def patch_pattern_metric(
    phi_after: ParamStore, phi_init: ParamStore, spec: PatchPatternSpec
) -> float:
    """mean over pixels of log(1 + exp(-s * Y * (P_after - P_init)))."""
    delta = _patch_view(
        phi_after, spec.tensor, spec.row, spec.col, spec.rows, spec.cols
    ) - _patch_view(phi_init, spec.tensor, spec.row, spec.col, spec.rows, spec.cols)
    margins = spec.sharpness * spec.pattern * delta
    return float(np.mean(np.logaddexp(0.0, -margins)))


def decode_patch(
    phi_after: ParamStore,
    phi_init: ParamStore,
    tensor: str,
    row: int,
    col: int,
    rows: int,
    cols: int,
) -> np.ndarray:
    """Entrywise sign of the weight update in the patch; sign(0) = 0."""
    delta = _patch_view(phi_after, tensor, row, col, rows, cols) - _patch_view(
        phi_init, tensor, row, col, rows, cols
    )
    return np.sign(delta)


def pixel_accuracy(decoded: np.ndarray, pattern: np.ndarray) -> float:
    """Fraction of entries where decoded equals the +-1 pattern; 0 never matches."""
    decoded = np.asarray(decoded)
    pattern = np.asarray(pattern)
    if decoded.shape != pattern.shape:
        raise ShapeError(f"decoded {decoded.shape} vs pattern {pattern.shape}")
    return float(np.mean(decoded == pattern))


def l2_metric(phi: ParamStore, tensor: str) -> float:
    """Frobenius norm of the named tensor."""
    return float(np.linalg.norm(phi[tensor]))


def heldout_loss_metric(
    spec: ModelSpec, phi: ParamStore, eval_data: WeightedDataset
) -> float:
    """Mean causal loss of the target model on a unit-weight evaluation set."""
    eval_data.require_nonempty()
    if not np.all(eval_data.weights == 1.0):
        raise ConfigError("evaluation weights must all be 1")
    return models.loss(spec, phi, eval_data)


def _target_string_data(metric: MetricSpec) -> WeightedDataset:
    from .data import dataset_from_tokens

    return dataset_from_tokens([metric.target_tokens])


def metric_value(
    metric: MetricSpec,
    model: ModelSpec,
    phi_after: ParamStore,
    phi_init: ParamStore,
) -> float:
    """Evaluate the metric's loss at phi_after (lower is better for every kind)."""
    if metric.kind == "patch-pattern":
        return patch_pattern_metric(phi_after, phi_init, metric.patch)
    if metric.kind == "l2-norm":
        return l2_metric(phi_after, metric.tensor)
    if metric.kind == "heldout-loss":
        return heldout_loss_metric(model, phi_after, metric.eval_data)
    return heldout_loss_metric(model, phi_after, _target_string_data(metric))


def metric_grad(
    metric: MetricSpec,
    model: ModelSpec,
    phi_after: ParamStore,
    phi_init: ParamStore,
) -> ParamStore:
    """Gradient of the metric loss at phi_after; zero outside its support."""
    out = ParamStore.zeros_like(phi_after)
    if metric.kind == "patch-pattern":
        p = metric.patch
        delta = _patch_view(phi_after, p.tensor, p.row, p.col, p.rows, p.cols) - _patch_view(
            phi_init, p.tensor, p.row, p.col, p.rows, p.cols
        )
        margins = p.sharpness * p.pattern * delta
        # d/d delta of log(1+exp(-m)) = -s*Y*sigmoid(-m), averaged over pixels
        sig = np.where(
            margins >= 0,
            np.exp(-np.abs(margins)) / (1.0 + np.exp(-np.abs(margins))),
            1.0 / (1.0 + np.exp(-np.abs(margins))),
        )
        block = -(p.sharpness * p.pattern * sig) / p.pattern.size
        out[p.tensor][p.row : p.row + p.rows, p.col : p.col + p.cols] = block
        return out
    if metric.kind == "l2-norm":
        w = phi_after[metric.tensor]
        norm = float(np.linalg.norm(w))
        if norm > 0.0:
            out[metric.tensor][...] = w / norm
        return out
    eval_data = (
        metric.eval_data if metric.kind == "heldout-loss" else _target_string_data(metric)
    )
    return models.grad(model, phi_after, eval_data)


class RewardObjective:
    """Maximize -metric_loss; the terminal objective fed to the reverse pass."""

    def __init__(self, metric: MetricSpec, model: ModelSpec, phi_init: ParamStore):
        self.metric = metric
        self.model = model
        self.phi_init = phi_init

    def value(self, phi: ParamStore) -> float:
        return -metric_value(self.metric, self.model, phi, self.phi_init)

    def grad(self, phi: ParamStore) -> ParamStore:
        return -1.0 * metric_grad(self.metric, self.model, phi, self.phi_init)


def reward_objective(
    metric: MetricSpec, model: ModelSpec, phi_init: ParamStore
) -> RewardObjective:
    return RewardObjective(metric, model, phi_init)
