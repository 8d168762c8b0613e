"""Feature pyramid necks: top-down lateral fusion followed by a bottom-up path.

Two bottom-up variants share the top-down half:

* ``pafpn``: ``N_i = fuse(concat(down(N_{i-1}), P_i))``
* ``dfpn``: ``N_i = fuse(concat(down(P_{i-1}), P_i, down(N_j) for every j < i))``

``down`` is repeated 2x2 max-pooling and ``fuse`` a 3x3 conv + leaky that
brings the concatenated width back to ``out_channels``.  The wiring of each
node is recorded in a text manifest so structural properties can be checked
without running the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import NeckConfig
from .nn import Conv, ParamStore
from .tensor import (
    ShapeError,
    add,
    concat_channels,
    concat_channels_backward,
    downsample_times,
    downsample_times_backward,
    upsample_nearest2x,
    upsample_nearest2x_backward,
)


@dataclass
class NeckNode:
    output: str
    layer: str  # parameter prefix, or "-" for parameter-free nodes
    inputs: list[tuple[str, int]]  # (source map, number of 2x downsamplings)
    op: str
    in_channels: int
    out_channels: int

    def line(self) -> str:
        srcs = ",".join(s if d == 0 else f"down{d}({s})" for s, d in self.inputs)
        return f"{self.output} {self.layer} {srcs} {self.op} {self.in_channels}->{self.out_channels}"


@dataclass
class PyramidMaps:
    P: dict[int, np.ndarray]
    N: dict[int, np.ndarray]


def plan_nodes(config: NeckConfig, in_channels: dict[int, int], dense: bool = True) -> list[NeckNode]:
    """Wiring of the neck in evaluation order."""
    levels = list(config.levels)
    oc = config.out_channels
    nodes = [NeckNode(f"L{i}", f"neck.lateral{i}", [(f"C{i}", 0)], "conv1x1", in_channels[i], oc)
             for i in levels]
    top = levels[-1]
    nodes.append(NeckNode(f"P{top}", "-", [(f"L{top}", 0)], "identity", oc, oc))
    for i in reversed(levels[:-1]):
        src = f"L{i + 1}" if config.literal_topdown else f"P{i + 1}"
        nodes.append(NeckNode(f"P{i}", "-", [(f"L{i}", 0), (f"up({src})", 0)], "add", oc, oc))
    bottom = levels[0]
    nodes.append(NeckNode(f"N{bottom}", "-", [(f"P{bottom}", 0)], "identity", oc, oc))
    for i in levels[1:]:
        if config.kind == "pafpn":
            inputs = [(f"N{i - 1}", 1), (f"P{i}", 0)]
        else:
            inputs = [(f"P{i - 1}", 1), (f"P{i}", 0)]
            if dense:
                inputs += [(f"N{j}", i - j) for j in levels if j < i]
        nodes.append(NeckNode(f"N{i}", f"neck.fuse{i}", inputs, "concat+conv3x3",
                              oc * len(inputs), oc))
    return nodes


class Neck:
    def __init__(self, config: NeckConfig, in_channels: dict[int, int], store: ParamStore,
                 dense: bool = True):
        self.config = config
        self.nodes = plan_nodes(config, in_channels, dense)
        self.layers: dict[str, Conv] = {}
        for node in self.nodes:
            if node.op == "conv1x1":
                self.layers[node.output] = Conv(store, node.layer, node.in_channels,
                                                node.out_channels, 1, act=False, stage="neck")
            elif node.op == "concat+conv3x3":
                self.layers[node.output] = Conv(store, node.layer, node.in_channels,
                                                node.out_channels, 3, stage="neck")

    def manifest(self) -> list[str]:
        return [n.line() for n in self.nodes]

    def _fetch(self, maps, src, times):
        if src.startswith("up("):
            return upsample_nearest2x(maps[src[3:-1]])
        x = maps[src]
        return downsample_times(x, times) if times else x

    def forward(self, C: dict[int, np.ndarray]) -> PyramidMaps:
        missing = [i for i in self.config.levels if i not in C]
        if missing:
            raise ShapeError(f"neck needs backbone levels {missing}")
        maps = {f"C{i}": C[i] for i in self.config.levels}
        self.concat_sizes = {}
        for node in self.nodes:
            xs = [self._fetch(maps, s, d) for s, d in node.inputs]
            if node.op == "conv1x1":
                out = self.layers[node.output].forward(xs[0])
            elif node.op == "identity":
                out = xs[0]
            elif node.op == "add":
                out = add(*xs)
            else:
                self.concat_sizes[node.output] = [x.shape[1] for x in xs]
                out = self.layers[node.output].forward(concat_channels(xs))
            maps[node.output] = out
        self.maps = maps
        levels = self.config.levels
        return PyramidMaps({i: maps[f"P{i}"] for i in levels}, {i: maps[f"N{i}"] for i in levels})

    def backward(self, dN: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        grads: dict[str, np.ndarray] = {}

        def push(name, g):
            grads[name] = g if name not in grads else grads[name] + g

        for i, g in dN.items():
            push(f"N{i}", g)
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            if node.op == "conv1x1":
                g_in = [self.layers[node.output].backward(g)]
            elif node.op in ("identity", "add"):
                g_in = [g] * len(node.inputs)
            else:
                dcat = self.layers[node.output].backward(g)
                g_in = concat_channels_backward(self.concat_sizes[node.output], dcat)
            for (src, times), gi in zip(node.inputs, g_in):
                if src.startswith("up("):
                    push(src[3:-1], upsample_nearest2x_backward(gi))
                elif times:
                    push(src, downsample_times_backward(self.maps[src], times, gi))
                else:
                    push(src, gi)
        return {i: grads[f"C{i}"] for i in self.config.levels if f"C{i}" in grads}


def build_neck(config: NeckConfig, in_channels: dict[int, int], store: ParamStore,
               dense: bool = True) -> Neck:
    return Neck(config, in_channels, store, dense)


def manifest_graph(lines: list[str]) -> dict[str, set[str]]:
    """Parse neck manifest lines into ``output -> direct source maps``."""
    graph = {}
    for line in lines:
        output, _, srcs, _, _ = line.split()
        names = set()
        for s in srcs.split(","):
            if "(" in s:
                s = s[s.index("(") + 1 : -1]
            names.add(s)
        graph[output] = names
    return graph


def reaches(graph: dict[str, set[str]], src: str, dst: str) -> bool:
    stack, seen = [dst], set()
    while stack:
        node = stack.pop()
        if node == src:
            return True
        if node in seen:
            continue
        seen.add(node)
        stack.extend(graph.get(node, ()))
    return False
