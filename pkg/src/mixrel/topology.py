"""Layered mixnet graph and the public routing policy.

Node ids are small integers: gateways are ``0 .. W_G-1``, then layer 1,
layer 2, ... each holding ``W`` consecutive ids.  Gateways act both as entry
(hop 0) and exit (hop nu) points, so the graph is a ring
gateways -> layer 1 -> ... -> layer L -> gateways.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate

from .errors import NoSuccessors
from .group import Group, lite_group
from .hashing import DOM_KEYGEN, K_BITS

Edge = tuple[int, int]


@dataclass(frozen=True)
class Topology:
    L: int
    W: int
    W_G: int
    group: Group = field(default_factory=lite_group, repr=False)
    public_keys: tuple = field(default=(), repr=False)
    secret_keys: tuple = field(default=(), repr=False)
    # optional routing weights per node, indexed like node ids; None = uniform
    weights: tuple | None = field(default=None, repr=False)
    burned: frozenset = frozenset()

    def __post_init__(self):
        if self.L < 1 or self.W < 1 or self.W_G < 1:
            raise ValueError("topology dimensions must be positive")
        succ, pred = {}, {}
        for n in range(self.n_nodes):
            raw = self._raw_successors(n)
            succ[n] = tuple(m for m in raw if (n, m) not in self.burned)
        for n in range(self.n_nodes):
            pred[n] = []
        for n, ms in succ.items():
            for m in ms:
                pred[m].append(n)
        object.__setattr__(self, "_succ", succ)
        object.__setattr__(self, "_pred", {n: tuple(v) for n, v in pred.items()})
        cum = {}
        if self.weights is not None:
            for n, ms in succ.items():
                cum[n] = list(accumulate(self.weights[m] for m in ms))
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def generate(cls, L: int, W: int, W_G: int, group: Group | None = None,
                 seed: bytes = b"topology", **kw) -> "Topology":
        """Build a topology with node keys derived from ``seed``."""
        group = group or lite_group()
        n = W_G + L * W
        xs, ys = [], []
        for i in range(n):
            x = group.scalar_from_bytes(
                hashlib.sha512(bytes([DOM_KEYGEN]) + b"node" + seed + i.to_bytes(4, "big")).digest())
            xs.append(x)
            ys.append(group.base_exp(x))
        return cls(L, W, W_G, group, tuple(ys), tuple(xs), **kw)

    def with_burned(self, edges) -> "Topology":
        return Topology(self.L, self.W, self.W_G, self.group, self.public_keys,
                        self.secret_keys, self.weights, frozenset(self.burned | set(edges)))

    # -- structure ------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.W_G + self.L * self.W

    @property
    def gateways(self) -> range:
        return range(self.W_G)

    def layer_nodes(self, layer: int) -> range:
        """Ids in ``layer``; layer 0 means the gateways."""
        if layer == 0:
            return self.gateways
        if not 1 <= layer <= self.L:
            raise ValueError("no such layer")
        start = self.W_G + (layer - 1) * self.W
        return range(start, start + self.W)

    @property
    def mix_nodes(self) -> range:
        return range(self.W_G, self.n_nodes)

    def layer_of(self, node: int) -> int:
        if node < self.W_G:
            return 0
        return (node - self.W_G) // self.W + 1

    def is_gateway(self, node: int) -> bool:
        return node < self.W_G

    def _raw_successors(self, node: int) -> range:
        layer = self.layer_of(node)
        return self.layer_nodes(layer + 1 if layer < self.L else 0)

    def raw_successors(self, node: int) -> range:
        """Successors ignoring burned edges."""
        return self._raw_successors(node)

    def raw_predecessors(self, node: int) -> range:
        layer = self.layer_of(node)
        return self.layer_nodes(layer - 1 if layer > 0 else self.L)

    def successors(self, node: int) -> tuple:
        return self._succ[node]

    def predecessors(self, node: int) -> tuple:
        return self._pred[node]

    def edges(self):
        for n in range(self.n_nodes):
            for m in self._succ[n]:
                yield (n, m)

    def label(self, node: int) -> str:
        layer = self.layer_of(node)
        if layer == 0:
            return f"g{node}"
        return f"L{layer}.{node - self.layer_nodes(layer).start}"


def routing(topo: Topology, node: int, r) -> int:
    """Map k-bit randomness ``r`` to a successor of ``node``.

    Uniform policy: index = floor(r * n / 2^k).  Weighted policy: inverse
    CDF over the successors' weights.
    """
    succ = topo._succ[node]
    if not succ:
        raise NoSuccessors(f"node {node} has no successors")
    if not isinstance(r, int):
        r = int.from_bytes(r, "big")
    if topo.weights is None:
        return succ[(r * len(succ)) >> K_BITS]
    cum = topo._cum[node]
    u = r / (1 << K_BITS) * cum[-1]
    return succ[min(bisect_right(cum, u), len(succ) - 1)]
