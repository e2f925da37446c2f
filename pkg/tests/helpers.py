"""Finite-difference oracles shared by the test modules."""

from __future__ import annotations

from typing import Callable, Sequence

import itertools

import numpy as np

import gashis.tensor as T
from gashis.attention import MHSA
from gashis.tensor import Tensor

STEP = 1e-5
REL_TOL = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], i: int, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(arrays)
        x[idx] = old - h
        down = f(arrays)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check_gradients(
    build: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    seed: int,
    wrt: Sequence[int] | None = None,
) -> list[float]:
    """Compare autograd with central differences of ``sum(build(x) * R)`` for a fixed random ``R``.

    Returns one relative error per checked input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = build([Tensor(a, dtype="fp64") for a in arrays])
    weights = np.random.default_rng(10_000 + seed).normal(size=probe.shape)

    def scalar(arrs: list[np.ndarray]) -> float:
        out = build([Tensor(a, dtype="fp64") for a in arrs])
        return float((out.data * weights).sum())

    leaves = [Tensor(a.copy(), requires_grad=True, dtype="fp64") for a in arrays]
    out = build(leaves)
    (out * Tensor(weights, dtype="fp64")).sum().backward()
    errors = []
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        errors.append(rel_error(analytic, numeric_grad(scalar, arrays, i)))
    return errors


def _unit_direction(point: Sequence[np.ndarray], seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(20_000 + seed)
    direction = [rng.normal(size=p.shape) for p in point]
    norm = np.sqrt(sum((d**2).sum() for d in direction))
    return [d / norm for d in direction]


def directional_derivative(
    loss_of: Callable[[list[np.ndarray]], float],
    point: Sequence[np.ndarray],
    direction: Sequence[np.ndarray],
    steps: Sequence[float] = (1e-5, 1e-6, 1e-7, 1e-8),
    agree: float = 1e-5,
) -> float:
    """Central difference along ``direction``, shrinking the step until two estimates agree.

    A piecewise-smooth loss (ReLU, max pooling) can have a kink within one
    step of the point; the estimate straddling it differs from the one at the
    next smaller step, so the first agreeing pair is used.
    """
    estimates = []
    for h in steps:
        up = loss_of([p + h * d for p, d in zip(point, direction)])
        down = loss_of([p - h * d for p, d in zip(point, direction)])
        estimates.append((up - down) / (2 * h))
        if len(estimates) > 1:
            a, b = estimates[-2:]
            if abs(a - b) <= agree * max(abs(a), abs(b), 1e-12):
                return b
    return estimates[-1]


def directional_check(
    loss_of: Callable[[list[np.ndarray]], float],
    grads: Sequence[np.ndarray],
    point: Sequence[np.ndarray],
    seed: int,
) -> float:
    """Relative error between ``<grad, v>`` and the finite-difference derivative along a random unit ``v``."""
    direction = _unit_direction(point, seed)
    analytic = float(sum((g * d).sum() for g, d in zip(grads, direction)))
    numeric = directional_derivative(loss_of, point, direction)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


# ---------------------------------------------------------------------------------
# one entry per differentiable op: (name, builder, input factory)
# ---------------------------------------------------------------------------------

def _normal(*shapes):
    return lambda rng: [rng.normal(size=s) for s in shapes]


def _positive(*shapes):
    return lambda rng: [rng.uniform(0.5, 2.0, size=s) for s in shapes]


def _away_from_zero(shape):
    def make(rng):
        x = rng.uniform(0.05, 1.5, size=shape)
        return [x * rng.choice([-1.0, 1.0], size=shape)]

    return make


def _distinct(shape):
    # well separated values so no max-pool window has a near tie
    def make(rng):
        n = int(np.prod(shape))
        return [(rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape)]

    return make


def _bn(training: bool):
    def build(t):
        c = t[0].shape[1]
        rm = np.linspace(-0.2, 0.2, c)
        rv = np.linspace(0.5, 1.5, c)
        return T.batchnorm(t[0], t[1], t[2], rm.copy(), rv.copy(), training)

    return build


def _bn_inputs(shape):
    def make(rng):
        c = shape[1]
        return [rng.normal(size=shape), rng.uniform(0.5, 1.5, c), rng.normal(size=c)]

    return make


def _dropout(t):
    return T.dropout(t[0], 0.3, np.random.default_rng(7), training=True)


LABELS = np.array([0, 2, 1, 2])

GRAD_CASES = [
    ("add", lambda t: t[0] + t[1], _normal((2, 3), (2, 3))),
    ("add_scalar", lambda t: t[0] + 1.5, _normal((2, 3))),
    ("sub", lambda t: t[0] - t[1], _normal((3, 2), (3, 2))),
    ("neg", lambda t: -t[0], _normal((4,))),
    ("mul", lambda t: t[0] * t[1], _normal((2, 3), (2, 3))),
    ("div", lambda t: t[0] / t[1], lambda rng: [rng.normal(size=(2, 3)), rng.uniform(0.5, 2.0, (2, 3))]),
    ("power_cube", lambda t: t[0] ** 3, _normal((2, 3))),
    ("power_rsqrt", lambda t: t[0] ** -0.5, _positive((2, 3))),
    ("exp", lambda t: t[0].exp(), _normal((2, 3))),
    ("log", lambda t: t[0].log(), _positive((2, 3))),
    ("sum_axis", lambda t: T.tsum(t[0], axis=1, keepdims=True), _normal((2, 3, 2))),
    ("sum_all", lambda t: T.tsum(t[0]), _normal((2, 3))),
    ("mean", lambda t: T.mean(t[0], axis=(0, 2)), _normal((2, 3, 2))),
    ("reshape", lambda t: t[0].reshape(3, 4), _normal((2, 6))),
    ("transpose", lambda t: t[0].transpose(2, 0, 1), _normal((2, 3, 4))),
    ("getitem_slice", lambda t: t[0][:, 1:3], _normal((3, 4))),
    ("getitem_fancy", lambda t: t[0][np.array([0, 2, 0]), np.array([1, 1, 3])], _normal((3, 4))),
    ("concat", lambda t: T.concat([t[0], t[1], t[2]], axis=1), _normal((2, 1, 3), (2, 2, 3), (2, 3, 3))),
    ("matmul", lambda t: t[0] @ t[1], _normal((3, 4), (4, 2))),
    ("matmul_batched", lambda t: T.matmul(t[0], t[1]), _normal((2, 3, 4), (2, 4, 2))),
    ("einsum_bmm", lambda t: T.einsum("bij,bjk->bik", t[0], t[1]), _normal((2, 3, 2), (2, 2, 3))),
    ("einsum_table", lambda t: T.einsum("bhnd,ld->bhnl", t[0], t[1]), _normal((1, 2, 3, 2), (5, 2))),
    ("conv_valid", lambda t: T.conv2d(t[0], t[1]), _normal((2, 2, 5, 5), (3, 2, 3, 3))),
    ("conv_same", lambda t: T.conv2d(t[0], t[1], 1, "same"), _normal((1, 2, 4, 5), (2, 2, 3, 3))),
    ("conv_stride2", lambda t: T.conv2d(t[0], t[1], 2, 1), _normal((1, 2, 6, 5), (2, 2, 3, 3))),
    ("conv_1x1", lambda t: T.conv2d(t[0], t[1]), _normal((2, 3, 3, 3), (2, 3, 1, 1))),
    ("conv_1x3_same", lambda t: T.conv2d(t[0], t[1], 1, "same"), _normal((1, 2, 4, 4), (2, 2, 1, 3))),
    ("maxpool", lambda t: T.pool2d(t[0], "max", 2, 2), _distinct((1, 2, 4, 4))),
    ("maxpool_same", lambda t: T.pool2d(t[0], "max", 3, 2, "same"), _distinct((1, 2, 5, 5))),
    ("avgpool_same", lambda t: T.pool2d(t[0], "avg", 3, 1, "same"), _normal((1, 2, 4, 4))),
    ("global_avg_pool", lambda t: T.global_avg_pool(t[0]), _normal((2, 3, 3, 2))),
    ("dense", lambda t: T.dense(t[0], t[1], t[2]), _normal((3, 4), (4, 2), (2,))),
    ("add_bias", lambda t: T.add_bias(t[0], t[1], axis=1), _normal((2, 3, 2, 2), (3,))),
    ("relu", lambda t: T.relu(t[0]), _away_from_zero((3, 4))),
    ("gelu", lambda t: T.gelu(t[0]), _normal((3, 4))),
    ("softmax", lambda t: T.softmax(t[0]), _normal((3, 4))),
    ("log_softmax", lambda t: T.log_softmax(t[0]), _normal((3, 4))),
    ("nll_loss", lambda t: T.nll_loss(T.softmax(t[0]), LABELS), _normal((4, 3))),
    ("cross_entropy", lambda t: T.cross_entropy(t[0], LABELS), _normal((4, 3))),
    ("batchnorm_train", _bn(True), _bn_inputs((3, 2, 2, 2))),
    ("batchnorm_eval", _bn(False), _bn_inputs((3, 2, 2, 2))),
    ("batchnorm_2d", _bn(True), _bn_inputs((4, 3))),
    ("standardize", lambda t: T.standardize(t[0]), _normal((2, 2, 3, 3))),
    ("dropout", _dropout, _normal((3, 4))),
]

GRAD_SEEDS = range(20)


def op_gradient_errors(name: str, seed: int) -> list[float]:
    build, make = next((b, m) for n, b, m in GRAD_CASES if n == name)
    return check_gradients(build, make(np.random.default_rng(seed)), seed)


# ---------------------------------------------------------------------------------
# attention oracle
# ---------------------------------------------------------------------------------

def naive_attention(layer: MHSA, x: np.ndarray) -> np.ndarray:
    """Loop over heads, query pixels and key pixels; scores are q.k + q.(r_h[a-i] + r_w[b-j])."""
    B, C, H, W = x.shape
    d = layer.head_dim
    wq, wk, wv, wo = (p.data for p in (layer.w_q, layer.w_k, layer.w_v, layer.w_o))
    eh, ew = layer.extent
    rh, rw = layer.rel_h.data, layer.rel_w.data
    scale = 1.0 if layer.eq1_literal else d**-0.5
    out = np.zeros((B, C, H, W))
    for b in range(B):
        heads = np.zeros((H, W, C))
        for h in range(layer.heads):
            sl = slice(h * d, (h + 1) * d)
            for i, j in itertools.product(range(H), range(W)):
                q = (x[b, :, i, j] @ wq)[sl] * scale
                scores = np.zeros((H, W))
                for a, c in itertools.product(range(H), range(W)):
                    k = (x[b, :, a, c] @ wk)[sl]
                    scores[a, c] = q @ k + q @ (rh[eh - 1 + a - i] + rw[ew - 1 + c - j])
                p = np.exp(scores - scores.max())
                p /= p.sum()
                y = np.zeros(d)
                for a, c in itertools.product(range(H), range(W)):
                    y += p[a, c] * (x[b, :, a, c] @ wv)[sl]
                heads[i, j, sl] = y
        out[b] = (heads @ wo).transpose(2, 0, 1)
    return out


def make_layer(dim=8, heads=2, extent=3, seed=0, literal=True):
    rng = np.random.default_rng(seed)
    layer = MHSA(dim, heads, extent, rng=rng, dtype="fp64", eq1_literal=literal)
    # larger tables so the position term matters
    layer.rel_h.data = rng.normal(0, 0.5, layer.rel_h.shape)
    layer.rel_w.data = rng.normal(0, 0.5, layer.rel_w.shape)
    return layer


# ---------------------------------------------------------------------------------
# architecture tables
# ---------------------------------------------------------------------------------

# (label, channels, height, width) for every row of the architecture table
GIM_TABLE = [
    ("Conv(7,7)", 64, 112, 112),
    ("Batch Norm", 64, 112, 112),
    ("ReLU Layer", 64, 112, 112),
    ("Max Pooling", 64, 56, 56),
    ("Stage c2", 256, 56, 56),
    ("Stage c3", 512, 28, 28),
    ("Stage c4", 1024, 14, 14),
    ("Stage c5", 2048, 7, 7),
]
LIM_TABLE = [
    ("Conv(3,3)", 32, 111, 111),
    ("Conv(3,3)", 32, 109, 109),
    ("Conv(3,3)", 64, 109, 109),
    ("Max Pooling", 64, 54, 54),
    ("Conv(1,1)", 80, 54, 54),
    ("Conv(3,3)", 192, 52, 52),
    ("Max Pooling", 192, 25, 25),
    ("Inception A", 256, 25, 25),
    ("Inception B", 288, 25, 25),
    ("Inception C", 768, 12, 12),
    ("Inception D", 1024, 5, 5),
    ("Inception E", 2048, 5, 5),
]


def as_rows(table):
    return [(label, (c, h, w)) for label, c, h, w in table]


# ---------------------------------------------------------------------------------
# linear stand-in for attacks
# ---------------------------------------------------------------------------------

class Linear:
    """Logits ``x.flatten() @ W + b`` as a plain callable."""

    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def __call__(self, x: Tensor) -> Tensor:
        flat = x.reshape(x.shape[0], -1)
        return T.dense(flat, Tensor(self.w, dtype="fp64"), Tensor(self.b, dtype="fp64"))


def random_linear(shape=(1, 3, 4, 4), k=3, seed=0):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape[1:]))
    x = rng.uniform(0, 1, shape)
    return Linear(rng.normal(size=(d, k)), rng.normal(size=k)), x
