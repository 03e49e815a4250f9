"""Spatial-temporal GCN backbone in the ST-GCN++ style.

Each block is a graph convolution (learned per-partition channel maps mixed by
a learnable adjacency initialized from the normalized skeleton graph)
followed by a multi-branch temporal convolution.  Features are channels-last,
``(N, T, V, C)``; sequences never interact inside the backbone.

FLOPs are reported as multiply-accumulate counts of convolutions, linear maps
and adjacency mixing; normalization, activations, pooling and residual
additions are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import COCO_EDGES
from .nn import BatchNorm, Module, Parameter, TemporalConv

MSTCN_BRANCHES = ((3, 1), (3, 2), (3, 3), (3, 4), "max", "1x1")


@dataclass
class AdjacencyGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]  # (child, parent)
    A: np.ndarray  # (3, V, V): self, centripetal, centrifugal; out[w] = sum_v A[k, v, w] x[v]


def _sym_normalize(a: np.ndarray) -> np.ndarray:
    rows, cols = a.sum(axis=1), a.sum(axis=0)
    dr = np.where(rows > 0, 1.0 / np.sqrt(np.where(rows > 0, rows, 1.0)), 0.0)
    dc = np.where(cols > 0, 1.0 / np.sqrt(np.where(cols > 0, cols, 1.0)), 0.0)
    return dr[:, None] * a * dc[None, :]


def build_graph(num_joints: int = 17, edges: Sequence[tuple[int, int]] = COCO_EDGES) -> AdjacencyGraph:
    """Three-partition spatial graph; ``edges`` are (child, parent) pairs toward the root."""
    v = num_joints
    inward = np.zeros((v, v))
    for child, parent in edges:
        if not (0 <= child < v and 0 <= parent < v):
            raise ValueError(f"edge ({child}, {parent}) outside {v} joints")
        inward[child, parent] = 1.0  # the parent gathers from its children
    outward = inward.T.copy()
    A = np.stack([np.eye(v), _sym_normalize(inward), _sym_normalize(outward)])
    return AdjacencyGraph(v, tuple(map(tuple, edges)), A)


@dataclass
class GcnConfig:
    num_stages: int = 6
    base_channels: int = 64
    inflate_stages: tuple[int, ...] = (6,)
    down_stages: tuple[int, ...] = (6,)
    in_channels: int = 3
    num_joints: int = 17
    tcn: str = "mstcn"  # "mstcn" (multi-branch) or "unit" (one kernel-`tcn_kernel` conv)
    tcn_kernel: int = 9
    data_bn: bool = True

    def __post_init__(self):
        self.inflate_stages = tuple(self.inflate_stages)
        self.down_stages = tuple(self.down_stages)
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        for s in self.inflate_stages + self.down_stages:
            if not 1 <= s <= self.num_stages:
                raise ValueError(f"stage index {s} outside [1, {self.num_stages}]")
        if self.tcn not in ("mstcn", "unit"):
            raise ValueError(f"unknown tcn type {self.tcn!r}")
        if self.tcn == "mstcn" and self.base_channels < len(MSTCN_BRANCHES):
            raise ValueError("mstcn needs at least 6 channels")

    @property
    def out_channels(self) -> int:
        return self.base_channels * 2 ** len(self.inflate_stages)

    def stage_plan(self) -> list[tuple[int, int, int]]:
        """(in_channels, out_channels, stride) per block."""
        plan, c = [], self.base_channels
        for i in range(1, self.num_stages + 1):
            cin = self.in_channels if i == 1 else c
            if i in self.inflate_stages:
                c *= 2
            plan.append((cin, c, 2 if i in self.down_stages else 1))
        return plan

    def out_length(self, t: int) -> int:
        for _ in self.down_stages:
            t = (t + 1) // 2
        return t

    def to_dict(self) -> dict:
        return asdict(self)


VARIANTS = {
    "s": GcnConfig(6, 64, (6,), (6,)),
    "l": GcnConfig(10, 64, (5, 8), (5, 8)),
}


class GraphConv(Module):
    def __init__(self, cin: int, cout: int, graph: AdjacencyGraph, rng):
        super().__init__()
        k, v = graph.A.shape[:2]
        self.k, self.v, self.cin, self.cout = k, v, cin, cout
        self.A = Parameter(graph.A.copy())
        from .nn import Linear
        self.conv = Linear(cin, k * cout, rng)
        self.bn = BatchNorm(cout)
        if cin != cout:
            self.down_conv = Linear(cin, cout, rng)
            self.down_bn = BatchNorm(cout)
        else:
            self.down_conv = None

    def forward(self, x):
        n, t, v, _ = x.shape
        y = self.conv(x)  # (N, T, V, K*C)
        y = T.reshape(y, (n * t, v, self.k, self.cout))
        y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (n * t, self.k * v, self.cout))
        a = T.reshape(T.transpose(self.A, (2, 0, 1)), (v, self.k * v))
        mixed = T.reshape(T.matmul(a, y), (n, t, v, self.cout))
        res = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return T.relu(self.bn(mixed) + res)

    def macs(self, n: int, t: int) -> int:
        rows = n * t * self.v
        total = rows * self.cin * self.k * self.cout + n * t * self.v * self.k * self.v * self.cout
        if self.down_conv is not None:
            total += rows * self.cin * self.cout
        return total


class MultiScaleTCN(Module):
    """Six-branch temporal block: four dilated 3-tap convs, a max-pool and a 1x1 path."""

    def __init__(self, channels: int, stride: int, rng):
        super().__init__()
        nb = len(MSTCN_BRANCHES)
        mid = channels // nb
        rem = channels - mid * (nb - 1)
        self.stride = stride
        self.branches = []
        for i, cfg in enumerate(MSTCN_BRANCHES):
            bc = rem if i == 0 else mid
            if cfg == "1x1":
                self.branches.append(_Branch(TemporalConv(channels, bc, rng, 1, stride), None, None))
            elif cfg == "max":
                self.branches.append(_Branch(TemporalConv(channels, bc, rng), BatchNorm(bc), "max"))
            else:
                kernel, dil = cfg
                self.branches.append(_Branch(TemporalConv(channels, bc, rng), BatchNorm(bc),
                                             TemporalConv(bc, bc, rng, kernel, stride, dil)))
        self.transform_bn = BatchNorm(channels)
        self.transform = TemporalConv(channels, channels, rng)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        outs = [b(x, self.stride) for b in self.branches]
        feat = T.concat(outs, axis=-1)
        feat = self.transform(T.relu(self.transform_bn(feat)))
        return self.bn(feat)


class _Branch(Module):
    def __init__(self, reduce: TemporalConv, bn, temporal):
        super().__init__()
        self.reduce, self.bn_, self.temporal = reduce, bn, temporal

    def forward(self, x, stride):
        y = self.reduce(x)
        if self.bn_ is None:
            return y
        y = T.relu(self.bn_(y))
        if self.temporal == "max":
            return T.max_pool_time(y, 3, stride, 1)
        return self.temporal(y)


class UnitTCN(Module):
    def __init__(self, channels: int, stride: int, rng, kernel: int = 9):
        super().__init__()
        self.conv = TemporalConv(channels, channels, rng, kernel, stride)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        return self.bn(self.conv(x))


class GcnBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, graph: AdjacencyGraph, rng,
                 residual: bool = True, tcn: str = "mstcn", tcn_kernel: int = 9):
        super().__init__()
        self.cin, self.cout, self.stride = cin, cout, stride
        self.gcn = GraphConv(cin, cout, graph, rng)
        self.tcn = MultiScaleTCN(cout, stride, rng) if tcn == "mstcn" else UnitTCN(cout, stride, rng, tcn_kernel)
        self.residual = residual
        if residual and (cin != cout or stride != 1):
            self.res_conv = TemporalConv(cin, cout, rng, 1, stride)
            self.res_bn = BatchNorm(cout)
        else:
            self.res_conv = None

    def forward(self, x):
        y = self.tcn(self.gcn(x))
        if self.residual:
            res = x if self.res_conv is None else self.res_bn(self.res_conv(x))
            y = y + res
        return T.relu(y)


class GcnBackbone(Module):
    def __init__(self, config: GcnConfig, rng: np.random.Generator, graph: AdjacencyGraph | None = None):
        super().__init__()
        self.config = config
        self.graph = graph or build_graph(config.num_joints)
        if self.graph.num_joints != config.num_joints:
            raise ValueError("graph and config disagree on the joint count")
        self.data_bn = BatchNorm(config.num_joints * config.in_channels) if config.data_bn else None
        self.blocks = [
            GcnBlock(cin, cout, stride, self.graph, rng, residual=i > 0, tcn=config.tcn,
                     tcn_kernel=config.tcn_kernel)
            for i, (cin, cout, stride) in enumerate(config.stage_plan())
        ]

    def forward(self, x):
        """``(N, T, V, C_in)`` -> ``(N, T_f, V, C_out)``."""
        x = T.as_tensor(x)
        n, t, v, c = x.shape
        if (v, c) != (self.config.num_joints, self.config.in_channels):
            raise ValueError(f"backbone expects (N, T, {self.config.num_joints}, "
                             f"{self.config.in_channels}), got {x.shape}")
        if self.data_bn is not None:
            x = T.reshape(self.data_bn(T.reshape(x, (n, t, v * c))), (n, t, v, c))
        for block in self.blocks:
            x = block(x)
        return x


def _conv_macs(conv: TemporalConv, n: int, t_in: int, v: int) -> tuple[int, int]:
    t_out = conv.out_length(t_in)
    cin, cout = conv.weight.shape[1], conv.weight.shape[2]
    return n * t_out * v * cin * cout * conv.kernel, t_out


def block_macs(block: GcnBlock, n: int, t: int, v: int) -> tuple[int, int]:
    total = block.gcn.macs(n, t)
    tcn = block.tcn
    if isinstance(tcn, MultiScaleTCN):
        t_out = t
        for b in tcn.branches:
            m, t_red = _conv_macs(b.reduce, n, t, v)
            total += m
            if isinstance(b.temporal, TemporalConv):
                m, t_out = _conv_macs(b.temporal, n, t_red, v)
                total += m
            elif b.temporal is None:
                t_out = t_red
        m, _ = _conv_macs(tcn.transform, n, t_out, v)
        total += m
    else:
        m, t_out = _conv_macs(tcn.conv, n, t, v)
        total += m
    if block.res_conv is not None:
        total += _conv_macs(block.res_conv, n, t, v)[0]
    return total, t_out


def count_parameters(config: GcnConfig) -> int:
    """Closed-form parameter count of :class:`GcnBackbone` for ``config``."""
    v, k = config.num_joints, 3

    def bn(c):
        return 2 * c

    def conv(cin, cout, kernel=1):
        return kernel * cin * cout + cout

    total = bn(v * config.in_channels) if config.data_bn else 0
    for i, (cin, cout, stride) in enumerate(config.stage_plan()):
        total += k * v * v + conv(cin, k * cout) + bn(cout)
        if cin != cout:
            total += conv(cin, cout) + bn(cout)
        if config.tcn == "mstcn":
            nb = len(MSTCN_BRANCHES)
            mid = cout // nb
            rem = cout - mid * (nb - 1)
            for j, cfg in enumerate(MSTCN_BRANCHES):
                bc = rem if j == 0 else mid
                total += conv(cout, bc)
                if cfg == "max":
                    total += bn(bc)
                elif cfg != "1x1":
                    total += bn(bc) + conv(bc, bc, cfg[0])
            total += bn(cout) + conv(cout, cout) + bn(cout)
        else:
            total += conv(cout, cout, config.tcn_kernel) + bn(cout)
        if i > 0 and (cin != cout or stride != 1):
            total += conv(cin, cout) + bn(cout)
    return total


def count_macs(config: GcnConfig, T_len: int, M: int = 1) -> int:
    """Closed-form multiply-accumulates of one forward pass over M sequences."""
    v, k = config.num_joints, 3
    total, t = 0, T_len
    for i, (cin, cout, stride) in enumerate(config.stage_plan()):
        rows = M * t * v
        total += rows * cin * k * cout + M * t * v * k * v * cout
        if cin != cout:
            total += rows * cin * cout
        t_out = (t - 1) // stride + 1
        if config.tcn == "mstcn":
            nb = len(MSTCN_BRANCHES)
            mid = cout // nb
            rem = cout - mid * (nb - 1)
            for j, cfg in enumerate(MSTCN_BRANCHES):
                bc = rem if j == 0 else mid
                if cfg == "1x1":
                    total += M * t_out * v * cout * bc
                else:
                    total += rows * cout * bc
                    if cfg != "max":
                        total += M * t_out * v * bc * bc * cfg[0]
            total += M * t_out * v * cout * cout
        else:
            total += M * t_out * v * cout * cout * config.tcn_kernel
        if i > 0 and (cin != cout or stride != 1):
            total += M * t_out * v * cin * cout
        t = t_out
    return total


def model_stats(config: GcnConfig, T_len: int, M: int = 1) -> dict:
    """Parameter count and FLOPs (multiply-accumulates) for M sequences of length T."""
    return {"param_count": count_parameters(config), "flops": count_macs(config, T_len, M),
            "T_out": config.out_length(T_len), "C_out": config.out_channels}
