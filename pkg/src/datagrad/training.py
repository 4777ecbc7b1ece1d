"""Weighted target-model training and exact data-weight gradients.

``train`` runs T steps of per-example-weighted SGD or Adam and records the
full trajectory.  ``metagradient`` replays that trajectory backwards,
propagating adjoints through every optimizer step (including Adam's moments,
bias corrections and the sqrt denominator), and returns the exact gradient of
a terminal objective with respect to each example's loss weight at w = 1.

Sign conventions: the supplied objective is the quantity being maximized, so
a positive weight gradient means upweighting that example helps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .data import WeightedDataset
from .errors import ConfigError, NumericalBlowup, ShapeError
from .models import ModelSpec
from .params import ParamStore

BATCHING_MODES = ("single-batch-repeated", "sequential-minibatches")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the inner learning algorithm.

    batch_size=None means "the whole dataset every step" and is only valid
    with single-batch-repeated batching; sequential-minibatches requires
    len(dataset) == steps * batch_size exactly.
    """

    optimizer: str = "adam"
    lr: float = 1e-2
    steps: int = 1
    batch_size: int | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    eps_root: float = 1e-9
    weight_decay: float = 1e-4
    batching: str = "single-batch-repeated"

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not (self.eps > 0 and self.eps_root > 0):
            raise ConfigError("eps and eps_root must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batching not in BATCHING_MODES:
            raise ConfigError(f"unknown batching {self.batching!r}")
        if self.batching == "sequential-minibatches" and self.batch_size is None:
            raise ConfigError("sequential-minibatches needs an explicit batch_size")


@dataclass
class OptimizerState:
    """Adam moment estimates plus the 0-based step counter."""

    m: ParamStore
    v: ParamStore
    t: int = 0

    @classmethod
    def zeros(cls, phi: ParamStore) -> "OptimizerState":
        return cls(ParamStore.zeros_like(phi), ParamStore.zeros_like(phi), 0)


@dataclass
class Trajectory:
    """Everything the reverse pass needs: snapshots and per-step records.

    phis has length T+1; ms/vs mirror it for Adam (empty for SGD);
    batches[t] and grads[t] are step t's example indices and raw weighted
    batch gradient.
    """

    optimizer: str
    phis: list[ParamStore] = field(default_factory=list)
    ms: list[ParamStore] = field(default_factory=list)
    vs: list[ParamStore] = field(default_factory=list)
    batches: list[np.ndarray] = field(default_factory=list)
    grads: list[ParamStore] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.batches)


@dataclass
class MetagradReport:
    """Per-example weight gradients plus the objective value they explain."""

    weight_grads: np.ndarray
    objective_value: float
    optimizer: str
    steps: int
    lr: float


# -- optimizer steps -----------------------------------------------------------


def sgd_step(phi: ParamStore, g: ParamStore, lr: float, weight_decay: float = 0.0):
    """phi' = phi - lr*g - lr*weight_decay*phi (decoupled decay)."""
    phi._check_compatible(g)
    return phi - lr * g - (lr * weight_decay) * phi


def adam_step(
    phi: ParamStore, state: OptimizerState, g: ParamStore, config: TrainConfig
) -> tuple[ParamStore, OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay.

    Uses m_hat / (sqrt(v_hat + eps_root) + eps); eps_root regularizes the
    square root itself so the update stays differentiable at v = 0.
    """
    phi._check_compatible(g)
    b1, b2 = config.beta1, config.beta2
    t = state.t
    m = ParamStore(
        {k: b1 * state.m[k] + (1 - b1) * g[k] for k in phi.entries}
    )
    v = ParamStore(
        {k: b2 * state.v[k] + (1 - b2) * g[k] * g[k] for k in phi.entries}
    )
    bc1 = 1.0 - b1 ** (t + 1)
    bc2 = 1.0 - b2 ** (t + 1)
    new_phi = {}
    for k in phi.entries:
        m_hat = m[k] / bc1
        v_hat = v[k] / bc2
        update = m_hat / (np.sqrt(v_hat + config.eps_root) + config.eps)
        new_phi[k] = (
            phi[k] - config.lr * update - config.lr * config.weight_decay * phi[k]
        )
    return ParamStore(new_phi), OptimizerState(m, v, t + 1)


# -- batch schedule ------------------------------------------------------------


def _batch_schedule(config: TrainConfig, n: int) -> list[np.ndarray]:
    if config.batching == "single-batch-repeated":
        if config.batch_size is not None and config.batch_size != n:
            raise ConfigError(
                f"single-batch-repeated batch_size {config.batch_size} != dataset size {n}"
            )
        return [np.arange(n) for _ in range(config.steps)]
    b = config.batch_size
    if n != config.steps * b:
        raise ConfigError(
            f"sequential-minibatches needs len(dataset) == steps*batch_size "
            f"({config.steps}*{b} != {n})"
        )
    return [np.arange(t * b, (t + 1) * b) for t in range(config.steps)]


# -- forward training ----------------------------------------------------------


def train(
    spec: ModelSpec,
    data: WeightedDataset,
    config: TrainConfig,
    phi0: ParamStore,
    weights: np.ndarray | None = None,
) -> tuple[ParamStore, Trajectory]:
    """Run T optimizer steps on the weighted loss; returns (phi_T, trajectory).

    weights overrides data.weights (used by finite-difference oracles);
    training itself always runs at all-ones weights.
    """
    config.validate()
    data.require_nonempty()
    w = data.weights if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(data),):
        raise ShapeError(f"weights shape {w.shape} != ({len(data)},)")
    if not np.all(np.isfinite(w)):
        raise ConfigError("weights must be finite")

    kernel = models.make_kernel(spec, data)
    schedule = _batch_schedule(config, len(data))
    adam = config.optimizer == "adam"

    traj = Trajectory(optimizer=config.optimizer)
    phi = phi0.copy()
    state = OptimizerState.zeros(phi) if adam else None
    traj.phis.append(phi)
    if adam:
        traj.ms.append(state.m)
        traj.vs.append(state.v)

    for t, idx in enumerate(schedule):
        g = kernel.grad(phi, w, idx)
        traj.batches.append(idx)
        traj.grads.append(g)
        if adam:
            phi, state = adam_step(phi, state, g, config)
            traj.ms.append(state.m)
            traj.vs.append(state.v)
        else:
            phi = sgd_step(phi, g, config.lr, config.weight_decay)
        if not phi.all_finite():
            raise NumericalBlowup(f"non-finite parameters after step {t}", step=t)
        traj.phis.append(phi)
    return phi, traj


def replay_step(
    spec: ModelSpec,
    data: WeightedDataset,
    config: TrainConfig,
    traj: Trajectory,
    t: int,
    weights: np.ndarray | None = None,
) -> ParamStore:
    """Recompute snapshot t+1 from snapshot t; bit-identical to train."""
    w = data.weights if weights is None else np.asarray(weights, dtype=np.float64)
    kernel = models.make_kernel(spec, data)
    idx = traj.batches[t]
    phi = traj.phis[t]
    g = kernel.grad(phi, w, idx)
    if config.optimizer == "adam":
        state = OptimizerState(traj.ms[t], traj.vs[t], t)
        phi_next, _ = adam_step(phi, state, g, config)
        return phi_next
    return sgd_step(phi, g, config.lr, config.weight_decay)


# -- reverse pass --------------------------------------------------------------


def metagradient(
    spec: ModelSpec,
    data: WeightedDataset,
    config: TrainConfig,
    phi0: ParamStore,
    objective,
) -> MetagradReport:
    """Exact d objective(phi_T) / d w_i at w = 1 via a reverse trajectory pass.

    objective must expose value(phi) -> float and grad(phi) -> ParamStore.
    The adjoint on phi is pushed backwards through each step; the Hessian of
    the step's minibatch loss transports it across the raw gradient, and each
    example in the minibatch picks up (1/B) <dloss_i, gradient adjoint>.
    """
    config.validate()
    phi_T, traj = train(spec, data, config, phi0)
    kernel = models.make_kernel(spec, data)
    n = len(data)
    w = data.weights

    tau = np.zeros(n)
    phi_bar = objective.grad(phi_T)
    value = float(objective.value(phi_T))
    decay_keep = 1.0 - config.lr * config.weight_decay

    if config.optimizer == "adam":
        m_bar = ParamStore.zeros_like(phi_T)
        v_bar = ParamStore.zeros_like(phi_T)

    for t in reversed(range(traj.steps)):
        idx = traj.batches[t]
        phi_t = traj.phis[t]
        g_t = traj.grads[t]
        if config.optimizer == "sgd":
            g_bar = (-config.lr) * phi_bar
        else:
            b1, b2 = config.beta1, config.beta2
            bc1 = 1.0 - b1 ** (t + 1)
            bc2 = 1.0 - b2 ** (t + 1)
            m_tot, v_tot, g_bar_entries = {}, {}, {}
            for k in phi_t.entries:
                m_next = traj.ms[t + 1][k]
                v_next = traj.vs[t + 1][k]
                root = np.sqrt(v_next / bc2 + config.eps_root)
                denom = root + config.eps
                u = (m_next / bc1) / denom
                u_bar = -config.lr * phi_bar[k]
                m_tot[k] = m_bar[k] + u_bar / (bc1 * denom)
                v_tot[k] = v_bar[k] + u_bar * (-u / denom) / (2.0 * root * bc2)
                g_bar_entries[k] = (1 - b1) * m_tot[k] + 2.0 * (1 - b2) * g_t[k] * v_tot[k]
            g_bar = ParamStore(g_bar_entries)
            m_bar = ParamStore({k: config.beta1 * m_tot[k] for k in m_tot})
            v_bar = ParamStore({k: config.beta2 * v_tot[k] for k in v_tot})

        tau[idx] += kernel.grad_dots(phi_t, idx, g_bar) / len(idx)
        phi_bar = decay_keep * phi_bar + kernel.hvp(phi_t, w, idx, g_bar)
        if not phi_bar.all_finite():
            raise NumericalBlowup(f"non-finite adjoint at step {t}", step=t)

    if not np.all(np.isfinite(tau)):
        raise NumericalBlowup("non-finite weight gradient")
    return MetagradReport(
        weight_grads=tau,
        objective_value=value,
        optimizer=config.optimizer,
        steps=config.steps,
        lr=config.lr,
    )


def influence_dot_oracle(
    spec: ModelSpec,
    data: WeightedDataset,
    lr: float,
    batch_size: int,
    phi0: ParamStore,
    objective,
) -> np.ndarray:
    """Closed form for the single-SGD-step case with no weight decay:

        tau_i = -(lr / B) * <grad objective(phi_1), dloss(phi_0, x_i)>

    with phi_1 the one-step full-batch SGD iterate from phi_0.
    """
    config = TrainConfig(
        optimizer="sgd", lr=lr, steps=1, batch_size=None, weight_decay=0.0
    )
    phi_1, _ = train(spec, data, config, phi0)
    obj_grad = objective.grad(phi_1)
    kernel = models.make_kernel(spec, data)
    dots = kernel.grad_dots(phi0, np.arange(len(data)), obj_grad)
    return -(lr / batch_size) * dots


# -- trajectory dump (debugging aid, not consumed anywhere) ---------------------

_TRAJ_MAGIC = b"DGTRJ\x00"
_TRAJ_VERSION = 1


def save_trajectory(traj: Trajectory, path: str) -> None:
    """Versioned binary dump: JSON header, then little-endian float64 payload."""
    names = traj.phis[0].names()
    header = {
        "optimizer": traj.optimizer,
        "steps": traj.steps,
        "names": names,
        "shapes": {k: list(v) for k, v in traj.phis[0].dims.items()},
        "batches": [b.tolist() for b in traj.batches],
        "has_moments": bool(traj.ms),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    def emit(store: ParamStore):
        return b"".join(
            np.ascontiguousarray(store[k], dtype="<f8").tobytes() for k in names
        )

    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<II", _TRAJ_VERSION, len(blob)))
        fh.write(blob)
        for phi in traj.phis:
            fh.write(emit(phi))
        for series in (traj.ms, traj.vs):
            for store in series:
                fh.write(emit(store))
        for g in traj.grads:
            fh.write(emit(g))


def load_trajectory(path: str) -> Trajectory:
    with open(path, "rb") as fh:
        if fh.read(len(_TRAJ_MAGIC)) != _TRAJ_MAGIC:
            raise ConfigError(f"{path}: not a trajectory dump")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _TRAJ_VERSION:
            raise ConfigError(f"{path}: unsupported trajectory version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        names = header["names"]
        shapes = {k: tuple(header["shapes"][k]) for k in names}
        per_store = sum(int(np.prod(s)) for s in shapes.values())

        def read_store() -> ParamStore:
            flat = np.frombuffer(fh.read(8 * per_store), dtype="<f8")
            out, pos = {}, 0
            for k in names:
                sz = int(np.prod(shapes[k]))
                out[k] = flat[pos : pos + sz].reshape(shapes[k]).copy()
                pos += sz
            return ParamStore(out)

        steps = header["steps"]
        traj = Trajectory(optimizer=header["optimizer"])
        traj.phis = [read_store() for _ in range(steps + 1)]
        if header["has_moments"]:
            traj.ms = [read_store() for _ in range(steps + 1)]
            traj.vs = [read_store() for _ in range(steps + 1)]
        traj.grads = [read_store() for _ in range(steps)]
        traj.batches = [np.asarray(b, dtype=np.intp) for b in header["batches"]]
        return traj
