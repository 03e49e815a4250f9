"""Finite-difference gradient checks for every op and the composite model parts."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _projected(fn: Callable, out_shape, rng) -> Callable:
    proj = rng.standard_normal(out_shape)
    return lambda *xs: T.sum_(T.mul(fn(*xs), proj))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """One scalar-valued case per op kind: (function, inputs)."""
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    rm, rv = rng.random(4), rng.random(4) + 0.5
    raw = {
        "add": (T.add, [_rand(rng, 3, 4), _rand(rng, 4)]),
        "sub": (T.sub, [_rand(rng, 3, 4), _rand(rng, 3, 1)]),
        "mul": (T.mul, [_rand(rng, 2, 3, 4), _rand(rng, 3, 4)]),
        "relu": (T.relu, [_rand(rng, 4, 5)]),
        "softplus": (T.softplus, [_rand(rng, 4, 5)]),
        "matmul": (T.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)]),
        "linear": (T.linear, [_rand(rng, 2, 3, 4), _rand(rng, 4, 3), _rand(rng, 3)]),
        "conv_time": (lambda x, w, b: T.conv_time(x, w, b, stride=2, dilation=2, padding=2),
                      [_rand(rng, 2, 7, 3, 2), _rand(rng, 3, 2, 4), _rand(rng, 4)]),
        "max_pool_time": (lambda x: T.max_pool_time(x, 3, 2, 1), [_rand(rng, 2, 7, 3, 2)]),
        "softmax": (lambda x: T.softmax(x, mask=mask), [_rand(rng, 3, 5)]),
        "log_softmax": (T.log_softmax, [_rand(rng, 3, 5)]),
        "layer_norm": (T.layer_norm, [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)]),
        "batch_norm": (lambda x, g, b: T.batch_norm(x, g, b, rm.copy(), rv.copy(), True),
                       [_rand(rng, 2, 3, 4), _rand(rng, 4), _rand(rng, 4)]),
        "sum": (lambda x: T.sum_(x, axis=0), [_rand(rng, 3, 4)]),
        "mean": (lambda x: T.mean(x, axis=(1, 2)), [_rand(rng, 2, 3, 4)]),
        "reshape": (lambda x: T.reshape(x, (6, 2)), [_rand(rng, 3, 4)]),
        "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [_rand(rng, 2, 3, 4)]),
        "getitem": (lambda x: x[:, [0, 2, 2]], [_rand(rng, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [_rand(rng, 2, 3), _rand(rng, 2, 2)]),
    }
    cases = {}
    for name, (fn, xs) in raw.items():
        out_shape = fn(*xs).shape
        cases[name] = (_projected(fn, out_shape, rng), xs)
    return cases


def _gcn_case(rng):
    from .backbone import GcnBackbone, GcnConfig
    model = GcnBackbone(GcnConfig(2, 6, (2,), (2,), data_bn=False), rng).eval()
    x = _rand(rng, 2, 4, 17, 3)
    proj = rng.standard_normal((2, 2, 17, 12))
    params = [model.blocks[0].gcn.A, model.blocks[0].gcn.conv.weight, model.blocks[1].tcn.transform.weight,
              model.blocks[1].res_conv.bias]
    return (lambda x, *ps: T.sum_(T.mul(model(x), proj))), [x] + params


def _interaction_case(rng):
    from .interaction import Encoder, EncoderConfig, STEmbedding, mix_pool
    from .nn import LayerNorm
    dim = 6
    emb = STEmbedding(dim, rng, scale=1.0)
    ln = LayerNorm(dim)
    enc = Encoder(dim, EncoderConfig(depth=1, heads=2), rng)
    x = _rand(rng, 2, 3, 17, dim)
    bbox, nt = rng.random((2, 4)), rng.random(2)
    mask = np.ones((1, 18), bool)
    mask[0, 13:] = False
    proj = rng.standard_normal((1, 18, dim))

    def f(x, *ps):
        tok = ln(mix_pool(x) + T.reshape(emb(bbox, nt), (2, 1, dim)))
        return T.sum_(T.mul(enc(T.reshape(tok, (1, 18, dim)), mask), proj))

    blk = enc.blocks[0]
    return f, [x, emb.proj.weight, blk.q.weight, blk.out.weight, blk.ffn1.weight, blk.norm1.gamma]


def _loss_cases(rng):
    from .heads import binary_cross_entropy, cross_entropy
    y = rng.integers(0, 4, 3)
    t = rng.integers(0, 2, (3, 4))
    return {
        "loss_ce": (lambda z: cross_entropy(z, y), [_rand(rng, 3, 4)]),
        "loss_bce": (lambda z: binary_cross_entropy(z, t), [_rand(rng, 3, 4)]),
    }


def all_cases(seed: int = 0) -> dict[str, tuple[Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    cases["gcn_2block"] = _gcn_case(rng)
    cases["pool_embed_encoder"] = _interaction_case(rng)
    cases.update(_loss_cases(rng))
    return cases


def run_all(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per case, computed in float64."""
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        return {name: grad_check(fn, xs, eps) for name, (fn, xs) in all_cases(seed).items()}
    finally:
        T.set_default_dtype(prev)
