"""Target-model families: per-example losses, gradients and Hessian-vector products.

Three families, all with hand-written exact derivatives (no autodiff):

* ``quadratic-probe``  -- scalar/vector probe with loss 0.5*||theta - t(x)||^2,
  where t(x) is the token-mean of fixed per-symbol values spread over [-1, 1].
  Its Hessian is the identity, which makes it the oracle family.
* ``log-linear-lm``    -- causal LM with fixed symbol embeddings and a single
  trainable ``lm_head`` matrix (V, d); linear in parameters, so the softmax
  cross-entropy Hessian is exact and cheap.
* ``mlp-lm``           -- one hidden tanh layer between the fixed embeddings and
  ``lm_head``; HVPs are computed forward-over-reverse on the written-out
  gradient.

Per-example loss is the token mean of the positionwise cross-entropies; batch
loss is ``(1/B) * sum_i w_i * loss_i``, exactly linear in each weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import WeightedDataset
from .errors import EmptyBatch, InvalidStep, ShapeError
from .params import ParamStore

FAMILIES = ("quadratic-probe", "log-linear-lm", "mlp-lm")


@dataclass(frozen=True)
class ModelSpec:
    """Which target-model family to instantiate and at what size.

    vocab is the symbol count V; dim is the embedding/parameter width d;
    hidden is the MLP hidden width (ignored by the other families);
    init_seed drives both the fixed embeddings and init_params.
    """

    family: str
    vocab: int
    dim: int
    hidden: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown family {self.family!r}")
        if self.vocab < 1 or self.dim < 1:
            raise ShapeError("vocab and dim must be >= 1")
        if self.family == "mlp-lm" and self.hidden < 1:
            raise ShapeError("mlp-lm needs hidden >= 1")


# -- fixed per-family inputs ---------------------------------------------------


@lru_cache(maxsize=64)
def embedding_table(spec: ModelSpec) -> np.ndarray:
    """Fixed (V+1, d) context embeddings; row V is the start-of-sequence context.

    Deterministic in spec.init_seed and read-only (shared across calls).
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.init_seed & 0xFFFFFFFF, 0x45_4D42])
    )
    table = rng.standard_normal((spec.vocab + 1, spec.dim)) / np.sqrt(spec.dim)
    table.setflags(write=False)
    return table


def symbol_values(vocab: int) -> np.ndarray:
    """Per-symbol target values for the quadratic probe, evenly on [-1, 1]."""
    if vocab == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(vocab) / (vocab - 1)


def init_params(spec: ModelSpec) -> ParamStore:
    """Seeded initial parameters with the family's canonical blocks."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.init_seed & 0xFFFFFFFF, 0x50_4152])
    )
    if spec.family == "quadratic-probe":
        return ParamStore({"theta": rng.standard_normal(spec.dim)})
    if spec.family == "log-linear-lm":
        return ParamStore(
            {"lm_head": rng.standard_normal((spec.vocab, spec.dim)) / np.sqrt(spec.dim)}
        )
    return ParamStore(
        {
            "w_in": rng.standard_normal((spec.hidden, spec.dim)) / np.sqrt(spec.dim),
            "w_out": rng.standard_normal((spec.dim, spec.hidden)) / np.sqrt(spec.hidden),
            "lm_head": rng.standard_normal((spec.vocab, spec.dim)) / np.sqrt(spec.dim),
        }
    )


def _check_params(spec: ModelSpec, phi: ParamStore) -> None:
    expected = init_params(spec).dims
    if phi.dims != expected:
        raise ShapeError(f"params {phi.dims} do not match family layout {expected}")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _ce_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    return lse - shifted[np.arange(len(targets)), targets]


# -- batch kernels -------------------------------------------------------------
#
# A kernel binds (spec, examples) once and serves weighted-batch quantities for
# arbitrary index subsets.  All kernel outputs share the convention
#   batch_quantity = (1/B) * sum_{i in idx} w_i * per_example_quantity_i
# with B = len(idx).


class _QuadraticKernel:
    def __init__(self, spec: ModelSpec, data: WeightedDataset):
        self.spec = spec
        vals = symbol_values(spec.vocab)
        self.targets = np.array(
            [vals[list(ex.tokens)].mean() for ex in data.examples]
        )

    def _theta(self, phi: ParamStore) -> np.ndarray:
        return phi["theta"]

    def loss(self, phi, w, idx) -> float:
        theta = self._theta(phi)
        t = self.targets[idx]
        per_ex = 0.5 * ((theta[None, :] - t[:, None]) ** 2).sum(axis=1)
        return float(np.sum(w[idx] * per_ex) / len(idx))

    def grad(self, phi, w, idx) -> ParamStore:
        theta = self._theta(phi)
        ws = w[idx]
        b = len(idx)
        g = (ws.sum() / b) * theta - (np.sum(ws * self.targets[idx]) / b) * np.ones_like(
            theta
        )
        return ParamStore({"theta": g})

    def per_example_grad(self, phi, i) -> ParamStore:
        theta = self._theta(phi)
        return ParamStore({"theta": theta - self.targets[i]})

    def hvp(self, phi, w, idx, v: ParamStore) -> ParamStore:
        scale = float(np.sum(w[idx]) / len(idx))
        return ParamStore({"theta": scale * v["theta"]})

    def grad_dots(self, phi, idx, vec: ParamStore) -> np.ndarray:
        theta = self._theta(phi)
        v = vec["theta"]
        return float(theta @ v) - self.targets[idx] * float(v.sum())


class _LogLinearKernel:
    """Positions of all examples stacked into one design matrix.

    ctx:     (N, d) context embeddings (BOS for position 0, previous token after)
    tgt:     (N,)  predicted symbol per position
    ex_of:   (N,)  owning example index
    inv_len: (N,)  1 / (token count of the owning example)
    spans:   per-example (start, end) into the position axis
    """

    def __init__(self, spec: ModelSpec, data: WeightedDataset):
        self.spec = spec
        table = embedding_table(spec)
        bos = spec.vocab
        ctx_rows, tgt, ex_of, inv_len = [], [], [], []
        spans = []
        pos = 0
        for i, ex in enumerate(data.examples):
            toks = ex.tokens
            ctx_ids = (bos,) + toks[:-1]
            ctx_rows.append(table[list(ctx_ids)])
            tgt.extend(toks)
            ex_of.extend([i] * len(toks))
            inv_len.extend([1.0 / len(toks)] * len(toks))
            spans.append((pos, pos + len(toks)))
            pos += len(toks)
        self.ctx = np.concatenate(ctx_rows, axis=0)
        self.tgt = np.asarray(tgt, dtype=np.intp)
        self.ex_of = np.asarray(ex_of, dtype=np.intp)
        self.inv_len = np.asarray(inv_len)
        self.spans = spans

    def _positions(self, idx: np.ndarray) -> np.ndarray:
        # contiguous example runs (the training fast path) become one arange
        lo, hi = self.spans[idx[0]][0], self.spans[idx[-1]][1]
        if len(idx) == idx[-1] - idx[0] + 1 and np.all(np.diff(idx) == 1):
            return np.arange(lo, hi)
        return np.concatenate(
            [np.arange(*self.spans[i]) for i in idx]
        )

    def _head(self, phi: ParamStore) -> np.ndarray:
        return phi["lm_head"]

    def _pos_coef(self, w, idx, pos) -> np.ndarray:
        # per-position weight w_i / (L_i * B)
        return w[self.ex_of[pos]] * self.inv_len[pos] / len(idx)

    def loss(self, phi, w, idx) -> float:
        pos = self._positions(idx)
        logits = self.ctx[pos] @ self._head(phi).T
        ce = _ce_rows(logits, self.tgt[pos])
        return float(np.sum(self._pos_coef(w, idx, pos) * ce))

    def grad(self, phi, w, idx) -> ParamStore:
        pos = self._positions(idx)
        x = self.ctx[pos]
        resid = _softmax_rows(x @ self._head(phi).T)
        resid[np.arange(len(pos)), self.tgt[pos]] -= 1.0
        resid *= self._pos_coef(w, idx, pos)[:, None]
        return ParamStore({"lm_head": resid.T @ x})

    def per_example_grad(self, phi, i) -> ParamStore:
        pos = np.arange(*self.spans[i])
        x = self.ctx[pos]
        resid = _softmax_rows(x @ self._head(phi).T)
        resid[np.arange(len(pos)), self.tgt[pos]] -= 1.0
        return ParamStore({"lm_head": (resid.T @ x) * self.inv_len[pos[0]]})

    def hvp(self, phi, w, idx, v: ParamStore) -> ParamStore:
        pos = self._positions(idx)
        x = self.ctx[pos]
        p = _softmax_rows(x @ self._head(phi).T)
        a = x @ v["lm_head"].T
        pa = p * a
        s = pa - p * pa.sum(axis=1, keepdims=True)
        s *= self._pos_coef(w, idx, pos)[:, None]
        return ParamStore({"lm_head": s.T @ x})

    def grad_dots(self, phi, idx, vec: ParamStore) -> np.ndarray:
        pos = self._positions(idx)
        x = self.ctx[pos]
        resid = _softmax_rows(x @ self._head(phi).T)
        resid[np.arange(len(pos)), self.tgt[pos]] -= 1.0
        per_pos = np.einsum("na,na->n", resid, x @ vec["lm_head"].T)
        per_pos *= self.inv_len[pos]
        if np.all(np.diff(idx) == 1):
            local = self.ex_of[pos] - idx[0]
        else:
            remap = {int(e): j for j, e in enumerate(idx)}
            local = np.array([remap[int(e)] for e in self.ex_of[pos]], dtype=np.intp)
        return np.bincount(local, weights=per_pos, minlength=len(idx))


class _MlpKernel:
    """One-hidden-layer tanh LM; exact derivatives written out by hand."""

    def __init__(self, spec: ModelSpec, data: WeightedDataset):
        self.spec = spec
        table = embedding_table(spec)
        bos = spec.vocab
        self.ctx = [
            table[list((bos,) + ex.tokens[:-1])] for ex in data.examples
        ]
        self.tgt = [np.asarray(ex.tokens, dtype=np.intp) for ex in data.examples]

    def _forward(self, phi, i):
        c = self.ctx[i]
        z = c @ phi["w_in"].T
        a = np.tanh(z)
        f = a @ phi["w_out"].T
        logits = f @ phi["lm_head"].T
        return c, a, f, logits

    def _example_loss(self, phi, i) -> float:
        _, _, _, logits = self._forward(phi, i)
        return float(_ce_rows(logits, self.tgt[i]).mean())

    def _example_grad(self, phi, i) -> ParamStore:
        c, a, f, logits = self._forward(phi, i)
        n = len(self.tgt[i])
        r = _softmax_rows(logits)
        r[np.arange(n), self.tgt[i]] -= 1.0
        r /= n
        gf = r @ phi["lm_head"]
        ga = gf @ phi["w_out"]
        gz = (1.0 - a * a) * ga
        return ParamStore(
            {"w_in": gz.T @ c, "w_out": gf.T @ a, "lm_head": r.T @ f}
        )

    def _example_hvp(self, phi, i, v: ParamStore) -> ParamStore:
        # forward-over-reverse: propagate the directional tangent through the
        # forward pass and then through the hand-written backward pass
        c, a, f, logits = self._forward(phi, i)
        n = len(self.tgt[i])
        dz = c @ v["w_in"].T
        da = (1.0 - a * a) * dz
        df = a @ v["w_out"].T + da @ phi["w_out"].T
        dl = f @ v["lm_head"].T + df @ phi["lm_head"].T
        p = _softmax_rows(logits)
        dp = p * dl - p * (p * dl).sum(axis=1, keepdims=True)

        r = p.copy()
        r[np.arange(n), self.tgt[i]] -= 1.0
        r /= n
        dr = dp / n
        gf = r @ phi["lm_head"]
        dgf = dr @ phi["lm_head"] + r @ v["lm_head"]
        ga = gf @ phi["w_out"]
        dga = dgf @ phi["w_out"] + gf @ v["w_out"]
        gz = (1.0 - a * a) * ga
        dgz = (1.0 - a * a) * dga - 2.0 * a * da * ga
        return ParamStore(
            {
                "w_in": dgz.T @ c,
                "w_out": dgf.T @ a + gf.T @ da,
                "lm_head": dr.T @ f + r.T @ df,
            }
        )

    def loss(self, phi, w, idx) -> float:
        b = len(idx)
        return float(sum(w[i] * self._example_loss(phi, i) for i in idx) / b)

    def grad(self, phi, w, idx) -> ParamStore:
        b = len(idx)
        acc = None
        for i in idx:
            g = self._example_grad(phi, i) * (w[i] / b)
            acc = g if acc is None else acc + g
        return acc

    def per_example_grad(self, phi, i) -> ParamStore:
        return self._example_grad(phi, i)

    def hvp(self, phi, w, idx, v: ParamStore) -> ParamStore:
        b = len(idx)
        acc = None
        for i in idx:
            h = self._example_hvp(phi, i, v) * (w[i] / b)
            acc = h if acc is None else acc + h
        return acc

    def grad_dots(self, phi, idx, vec: ParamStore) -> np.ndarray:
        return np.array(
            [self._example_grad(phi, i).dot(vec) for i in idx]
        )


_KERNELS = {
    "quadratic-probe": _QuadraticKernel,
    "log-linear-lm": _LogLinearKernel,
    "mlp-lm": _MlpKernel,
}


def make_kernel(spec: ModelSpec, data: WeightedDataset):
    """Bind a family kernel to a dataset (validates tokens against vocab)."""
    data.require_nonempty()
    data.validate_tokens(spec.vocab)
    return _KERNELS[spec.family](spec, data)


# -- public operations ---------------------------------------------------------


def _all_idx(data: WeightedDataset) -> np.ndarray:
    return np.arange(len(data))


def loss(spec: ModelSpec, phi: ParamStore, data: WeightedDataset) -> float:
    """Weighted batch loss (1/B) sum_i w_i * loss_i over the whole dataset."""
    _check_params(spec, phi)
    k = make_kernel(spec, data)
    return k.loss(phi, data.weights, _all_idx(data))


def grad(spec: ModelSpec, phi: ParamStore, data: WeightedDataset) -> ParamStore:
    """Parameter gradient of the weighted batch loss."""
    _check_params(spec, phi)
    k = make_kernel(spec, data)
    return k.grad(phi, data.weights, _all_idx(data))


def per_example_grads(
    spec: ModelSpec, phi: ParamStore, data: WeightedDataset
) -> list[ParamStore]:
    """Unweighted per-example loss gradients; their weighted mean equals grad."""
    _check_params(spec, phi)
    k = make_kernel(spec, data)
    return [k.per_example_grad(phi, i) for i in range(len(data))]


def hvp(
    spec: ModelSpec, phi: ParamStore, data: WeightedDataset, v: ParamStore
) -> ParamStore:
    """Hessian-vector product of the weighted batch loss at phi."""
    _check_params(spec, phi)
    phi._check_compatible(v)
    k = make_kernel(spec, data)
    return k.hvp(phi, data.weights, _all_idx(data), v)


def fd_check(
    spec: ModelSpec,
    phi: ParamStore,
    data: WeightedDataset,
    step: float,
    n_probes: int = 6,
    seed: int = 0,
) -> float:
    """Worst relative error of grad and hvp against central differences.

    Probes random unit directions u: compares <grad, u> with the centered
    difference of loss, and hvp(u) with the centered difference of grad.
    Reports the max relative error and never raises on mismatch.
    """
    if not step > 0:
        raise InvalidStep(f"step must be > 0, got {step}")
    _check_params(spec, phi)
    k = make_kernel(spec, data)
    w = data.weights
    idx = _all_idx(data)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xFD]))

    g = k.grad(phi, w, idx)
    flat = phi.flatten()
    worst = 0.0
    for _ in range(n_probes):
        u = rng.standard_normal(flat.size)
        u /= np.linalg.norm(u)
        u_store = phi.unflatten(u)
        plus = phi.unflatten(flat + step * u)
        minus = phi.unflatten(flat - step * u)

        fd_dir = (k.loss(plus, w, idx) - k.loss(minus, w, idx)) / (2 * step)
        exact_dir = g.dot(u_store)
        # u is unit length, so the gradient norm bounds the directional value
        # and is the right scale even when the probe is near-orthogonal to g
        scale = max(g.norm(), abs(fd_dir), 1e-12)
        worst = max(worst, abs(fd_dir - exact_dir) / scale)

        fd_h = (k.grad(plus, w, idx) - k.grad(minus, w, idx)) * (1.0 / (2 * step))
        exact_h = k.hvp(phi, w, idx, u_store)
        hscale = max(fd_h.norm(), exact_h.norm(), 1e-12)
        worst = max(worst, (fd_h - exact_h).norm() / hscale)
    return worst
