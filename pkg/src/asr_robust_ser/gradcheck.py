"""Finite-difference suite over every differentiable operation in the package.

Each case draws a fresh random point, builds a scalar objective from the op
(a fixed random projection of its output), and compares the taped gradient
with central differences. ReLU inputs are kept away from the kink.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fusion as F
from . import numkernel as nk
from . import trainer as T
from .attention import MHAParams, multihead
from .numkernel import Tensor

Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _probe(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar <out, w> so every output coordinate feeds the gradient."""
    return nk.sum_all(nk.mul(out, Tensor(w)))


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.normal(size=shape)
    return Tensor(np.sign(x) * (np.abs(x) + 0.05))


def _mats(rng, d, n=4) -> list[Tensor]:
    return [Tensor(rng.normal(size=(d, d)) / math.sqrt(d)) for _ in range(n)]


def _unary(op, shape, away=False) -> Case:
    def case(rng):
        x = _away_from_zero(rng, *shape) if away else _t(rng, *shape)
        w = rng.normal(size=op(x).shape)
        return (lambda x: _probe(op(x), w)), [x]

    return case


def _binary(op, sa, sb) -> Case:
    def case(rng):
        a, b = _t(rng, *sa), _t(rng, *sb)
        w = rng.normal(size=op(a, b).shape)
        return (lambda a, b: _probe(op(a, b), w)), [a, b]

    return case


def _masked_mean(rng):
    x = _t(rng, 2, 4, 3)
    mask = np.array([[True, True, False, False], [True, True, True, True]])
    w = rng.normal(size=(2, 3))
    return (lambda x: _probe(nk.masked_mean(x, mask), w)), [x]


def _split(rng):
    x = _t(rng, 5, 3)
    w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))

    def f(x):
        a, b = nk.split(x, [2, 3], axis=0)
        return nk.add(_probe(a, w1), _probe(b, w2))

    return f, [x]


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    w = rng.normal(size=(6, 3))
    return (lambda a, b: _probe(nk.concat([a, b], axis=0), w)), [a, b]


def _scale_tensor(rng):
    x, s = _t(rng, 3, 2), _t(rng, 1)
    w = rng.normal(size=(3, 2))
    return (lambda x, s: _probe(nk.scale(x, s), w)), [x, s]


def _take(rng):
    x = _t(rng, 5)
    return (lambda x: nk.sum_all(nk.square(nk.take(x, 3)))), [x]


def _gather(rng):
    x = _t(rng, 4, 3)
    labels = rng.integers(0, 3, 4)
    w = rng.normal(size=4)
    return (lambda x: _probe(nk.gather_rows(x, labels), w)), [x]


def _multihead(rng, d=8, heads=2):
    q, kv = _t(rng, 3, d), _t(rng, 4, d)
    mats = _mats(rng, d)
    w = rng.normal(size=(3, d))
    return (lambda q, kv, *m: _probe(multihead(q, kv, MHAParams(*m, heads=heads)), w)), [q, kv] + mats


def _multihead_masked(rng, d=4, heads=2):
    q, kv = _t(rng, 2, 3, d), _t(rng, 2, 4, d)
    mask = np.array([[True, True, True, False], [True, True, True, True]])
    mats = _mats(rng, d)
    w = rng.normal(size=(2, 3, d))
    return (lambda q, kv, *m: _probe(multihead(q, kv, MHAParams(*m, heads=heads), key_mask=mask), w)), [q, kv] + mats


D = 4


def _pair(rng):
    return _t(rng, 3, D), _t(rng, 2, D)


def _fusion_simple(fn) -> Case:
    def case(rng):
        A, Tx = _pair(rng)
        w = rng.normal(size=fn(A, Tx).values.shape)
        return (lambda a, t: _probe(fn(a, t).values, w)), [A, Tx]

    return case


def _late(rng):
    a, b = _t(rng, 4), _t(rng, 4)
    w = rng.normal(size=4)
    return (lambda a, b: _probe(F.late_fusion(a, b), w)), [a, b]


def _cross(rng):
    A, Tx = _pair(rng)
    mats = _mats(rng, D)
    w = rng.normal(size=2 * D)

    def f(a, t, *m):
        return _probe(F.cross_attention_fusion(a, t, MHAParams(*m, heads=2)).values, w)

    return f, [A, Tx] + mats


def _nl_gate(rng):
    A, Tx = _pair(rng)
    mats = _mats(rng, D, 8)
    biases = [_t(rng, D), _t(rng, D)]
    w = rng.normal(size=2 * D)

    def f(a, t, *p):
        params = F.NLGateParams(MHAParams(*p[:4], heads=2), MHAParams(*p[4:8], heads=2), p[8], p[9])
        return _probe(F.nl_gate_fusion(a, t, params).values, w)

    return f, [A, Tx] + mats + biases


def _misa(rng):
    A, Tx = _pair(rng)
    projs = [Tensor(rng.normal(size=(D, 3)) / 2) for _ in range(3)]
    w = rng.normal(size=12)

    def f(a, t, *p):
        out = F.misa_fusion(a, t, F.MISAParams(*p))
        total = _probe(out.values, w)
        for name, value in out.aux_losses.items():
            total = nk.add(total, nk.scale(value, out.info["weights"][name]))
        return total

    return f, [A, Tx] + projs


def _gated(branch: int) -> Case:
    def case(rng):
        A, Tx = _pair(rng)
        w1 = rng.normal(size=2)
        w1[branch] = abs(w1[branch]) + abs(w1[1 - branch]) + 0.1  # keep the chosen branch
        w2 = _t(rng, 3)
        mats = _mats(rng, D, 8)
        w = rng.normal(size=D)

        def f(a, t, g1, g2, *m):
            params = F.ModalityGateParams(g1, g2, MHAParams(*m[:4], heads=2), MHAParams(*m[4:], heads=2))
            return _probe(F.modality_gated_fusion(a, t, params, branch=branch).values, w)

        return f, [A, Tx, Tensor(w1), w2] + mats

    return case


def _backbone(kind: str) -> Case:
    def case(rng):
        out_dim = 4 if kind == "classification" else 3
        p = T.BackboneParams.init(nk.CounterRNG(int(rng.integers(1 << 30))), 5, out_dim, hidden=(6, 5))
        while True:
            x = rng.normal(size=(3, 5))
            h1 = x @ p.dense1.weight.data + p.dense1.bias.data
            h2 = np.maximum(h1, 0) @ p.dense2.weight.data + p.dense2.bias.data
            if np.min(np.abs(h1)) > 1e-3 and np.min(np.abs(h2)) > 1e-3:
                break
        labels = rng.integers(0, out_dim, 3) if kind == "classification" else rng.normal(size=(3, out_dim))

        def f(x, *q):
            b = T.BackboneParams(T.Dense(*q[0:2]), T.Dense(*q[2:4]), T.Dense(*q[4:6]))
            return T.loss(T.backbone_forward(x, b), labels, kind)

        return f, [Tensor(x)] + [Tensor(t.data) for t in p.parameters()]

    return case


CASES: dict[str, Case] = {
    "matmul": _binary(nk.matmul, (3, 4), (4, 2)),
    "matmul_batched": _binary(nk.matmul, (2, 3, 4), (2, 4, 2)),
    "matmul_shared": _binary(nk.matmul, (2, 3, 4), (4, 2)),
    "add": _binary(nk.add, (3, 2), (3, 2)),
    "sub": _binary(nk.sub, (3, 2), (3, 2)),
    "mul": _binary(nk.mul, (3, 2), (3, 2)),
    "scale": _unary(lambda x: nk.scale(x, -1.7), (3, 2)),
    "scale_tensor": _scale_tensor,
    "add_bias": _binary(nk.add_bias, (2, 3, 4), (4,)),
    "add_constant": _unary(lambda x: nk.add_constant(x, np.arange(6.0).reshape(2, 3)), (2, 3)),
    "relu": _unary(nk.relu, (3, 4), away=True),
    "sigmoid": _unary(nk.sigmoid, (3, 4)),
    "softmax": _unary(lambda x: nk.softmax(x, axis=-1), (3, 4)),
    "softmax_axis0": _unary(lambda x: nk.softmax(x, axis=0), (3, 4)),
    "log_softmax": _unary(lambda x: nk.log_softmax(x, axis=-1), (3, 4)),
    "concat": _concat,
    "split": _split,
    "mean_pool": _unary(lambda x: nk.mean_pool(x, axis=0), (4, 3)),
    "masked_mean": _masked_mean,
    "sum_all": _unary(lambda x: nk.scale(nk.sum_all(x), 1.0), (3, 3)),
    "square": _unary(nk.square, (3, 3)),
    "reshape": _unary(lambda x: nk.reshape(x, (3, 4)), (2, 6)),
    "transpose": _unary(lambda x: nk.transpose(x, (1, 2, 0)), (2, 3, 4)),
    "take": _take,
    "gather_rows": _gather,
    "outer_augmented": _binary(nk.outer_augmented, (2, 3), (2, 2)),
    "multihead": _multihead,
    "multihead_masked": _multihead_masked,
    "fusion_early": _fusion_simple(F.early_fusion),
    "fusion_late": _late,
    "fusion_cross_attention": _cross,
    "fusion_tensor": _fusion_simple(F.tensor_fusion),
    "fusion_nl_gate": _nl_gate,
    "fusion_misa": _misa,
    "fusion_modality_gated_audio": _gated(0),
    "fusion_modality_gated_text": _gated(1),
    "backbone_cross_entropy": _backbone("classification"),
    "backbone_mse": _backbone("regression"),
}


@dataclass
class CaseResult:
    name: str
    max_error: float
    points: int
    seconds: float


def run_suite(points: int = 10, seed: int = 0, eps: float = 1e-5, names=None) -> list[CaseResult]:
    """Worst relative error per case over ``points`` random draws."""
    results = []
    for name in names or CASES:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(points):
            f, args = CASES[name](rng)
            worst = max(worst, nk.finite_diff_check(f, args, eps))
        results.append(CaseResult(name, worst, points, time.perf_counter() - start))
    return results
