"""Independent finite-difference and enumeration oracles used across the tests.

These deliberately re-derive quantities from scratch (central differences,
brute-force enumeration) instead of calling the package's own fast paths.
"""

from __future__ import annotations

import numpy as np

from datagrad import models, training
from datagrad.params import ParamStore


def rel_err_max(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute deviation relative to the oracle's max magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def fd_param_grad(fn, phi: ParamStore, step: float = 1e-5) -> ParamStore:
    """Coordinatewise central differences of a scalar function of parameters."""
    flat = phi.flatten()
    out = np.zeros_like(flat)
    for j in range(flat.size):
        plus = flat.copy()
        plus[j] += step
        minus = flat.copy()
        minus[j] -= step
        out[j] = (fn(phi.unflatten(plus)) - fn(phi.unflatten(minus))) / (2 * step)
    return phi.unflatten(out)


def fd_weight_grads(
    spec, data, config, phi0, objective, step: float = 1e-4, richardson: bool = False
):
    """Central differences of objective(train(w, D)) in each weight at w = 1.

    richardson=True combines central differences at step and step/2 to cancel
    the O(step^2) truncation term (needed when the optimizer dynamics are stiff).
    """
    n = len(data)

    def central(h: float) -> np.ndarray:
        out = np.zeros(n)
        base = np.ones(n)
        for i in range(n):
            w_plus = base.copy()
            w_plus[i] += h
            w_minus = base.copy()
            w_minus[i] -= h
            phi_p, _ = training.train(spec, data, config, phi0, weights=w_plus)
            phi_m, _ = training.train(spec, data, config, phi0, weights=w_minus)
            out[i] = (objective.value(phi_p) - objective.value(phi_m)) / (2 * h)
        return out

    if richardson:
        return (4.0 * central(step / 2) - central(step)) / 3.0
    return central(step)


class QuadraticObjective:
    """Maximized objective -(theta - center)^2 over the probe's parameter."""

    def __init__(self, center: float | np.ndarray = 1.0):
        self.center = center

    def value(self, phi: ParamStore) -> float:
        d = phi["theta"] - self.center
        return float(-(d @ d))

    def grad(self, phi: ParamStore) -> ParamStore:
        return ParamStore({"theta": -2.0 * (phi["theta"] - self.center)})


class LinearObjective:
    """Maximized objective <direction, flatten(phi)>; constant gradient."""

    def __init__(self, template: ParamStore, direction: np.ndarray):
        self.template = template
        self.direction = np.asarray(direction, dtype=np.float64)

    def value(self, phi: ParamStore) -> float:
        return float(self.direction @ phi.flatten())

    def grad(self, phi: ParamStore) -> ParamStore:
        return self.template.unflatten(self.direction)


class NegLossObjective:
    """Maximize the negative model loss on a fixed evaluation set."""

    def __init__(self, spec, eval_data):
        self.spec = spec
        self.eval_data = eval_data

    def value(self, phi: ParamStore) -> float:
        return -models.loss(self.spec, phi, self.eval_data)

    def grad(self, phi: ParamStore) -> ParamStore:
        return -1.0 * models.grad(self.spec, phi, self.eval_data)


def random_lm_instance(rng, vocab=None, dim=None, n_examples=None, family="log-linear-lm"):
    """A random small LM spec, init params and dataset for oracle sweeps."""
    from datagrad.data import dataset_from_tokens

    vocab = vocab or int(rng.integers(3, 11))
    dim = dim or int(rng.integers(2, 9))
    hidden = int(rng.integers(2, 6))
    n = n_examples or int(rng.integers(2, 17))
    spec = models.ModelSpec(
        family=family,
        vocab=vocab,
        dim=dim,
        hidden=hidden,
        init_seed=int(rng.integers(0, 2**31)),
    )
    lengths = rng.integers(1, 7, size=n)
    token_lists = [tuple(rng.integers(0, vocab, size=l).tolist()) for l in lengths]
    data = dataset_from_tokens(token_lists)
    phi0 = models.init_params(spec)
    return spec, phi0, data
