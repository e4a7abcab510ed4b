"""Link and node reliability estimates.

Link: rho_hat = s* / (s* + d*) with a Wald error bound, the Laplace rule of
succession at the boundary, or an exact Clopper-Pearson interval.

Node: rho_hat_j = sum_k (s*_jk + beta_jk d*_jk) / sum_i (s*_ij + beta_ij d*_ij)
where beta_e is the share of edge e's drops blamed on the receiving node.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from math import sqrt

from scipy import special, stats

from .epoch import CLIENT, EpochTally
from .errors import EmptyInput
from .topology import Topology

DEFAULT_Z = 2.576
DEFAULT_TAU = 0.99


class Method(str, Enum):
    WALD = "WALD"
    CLOPPER_PEARSON = "CLOPPER_PEARSON"
    LAPLACE = "LAPLACE"


class Scheme(str, Enum):
    NAIVE = "naive"
    SYMMETRIC = "symmetric"
    THRESHOLD = "threshold"


class Label(str, Enum):
    RELIABLE = "RELIABLE"
    UNRELIABLE = "UNRELIABLE"


@dataclass(frozen=True)
class LinkEstimate:
    rho_hat: float
    epsilon: float
    method: Method
    n: int
    lower: float | None = None
    upper: float | None = None


def _beta_quantile(q: float, a: float, b: float, tol: float = 1e-9) -> float:
    """x with I_x(a, b) = q, by bisection on the regularized incomplete beta."""
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if special.betainc(a, b, mid) < q:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def clopper_pearson(s: int, n: int, Z: float = DEFAULT_Z) -> tuple[float, float]:
    """Exact two-sided interval at the confidence level matching ``Z``."""
    alpha = 2 * stats.norm.sf(Z)
    lo = 0.0 if s == 0 else _beta_quantile(alpha / 2, s, n - s + 1)
    hi = 1.0 if s == n else _beta_quantile(1 - alpha / 2, s + 1, n - s)
    return lo, hi


def link_estimate(s_star: int, d_star: int, Z: float = DEFAULT_Z,
                  method: Method | str = Method.WALD) -> LinkEstimate:
    method = Method(method) if not isinstance(method, Method) else method
    n = s_star + d_star
    if n == 0:
        return LinkEstimate(1.0, 1.0, Method.LAPLACE, 0)
    rho = s_star / n
    if method is Method.CLOPPER_PEARSON:
        lo, hi = clopper_pearson(s_star, n, Z)
        return LinkEstimate(rho, min(1.0, max(rho - lo, hi - rho)), method, n, lo, hi)
    if s_star == 0 or d_star == 0 or method is Method.LAPLACE:
        return LinkEstimate(rho, min(1.0, 1 / (n + 2)), Method.LAPLACE, n)
    return LinkEstimate(rho, min(1.0, Z * sqrt(rho * (1 - rho) / n)), Method.WALD, n)


def weighted_median(values) -> float:
    """Smallest v whose cumulative weight reaches half the total."""
    items = sorted((float(v), float(w)) for v, w in values)
    if not items:
        raise EmptyInput("weighted median of nothing")
    if any(w <= 0 for _, w in items):
        raise ValueError("weights must be positive")
    total = sum(w for _, w in items)
    half = total / 2
    cum = 0.0
    for v, w in items:
        cum += w
        if cum >= half - 1e-12 * total:
            return v
    return items[-1][0]


def assign_beta(median_out_i: float, median_in_j: float, tau_bar: float = DEFAULT_TAU,
                in_samples_j: int = 1, scheme: Scheme | str = Scheme.THRESHOLD) -> float:
    scheme = Scheme(scheme)
    if scheme is Scheme.NAIVE:
        return 1.0
    if scheme is Scheme.SYMMETRIC:
        return 0.5
    if in_samples_j == 0:
        return 1.0
    if median_in_j < tau_bar and median_out_i >= tau_bar:
        return 1.0
    if median_in_j >= tau_bar and median_out_i < tau_bar:
        return 0.0
    return 0.5


@dataclass
class NodeScore:
    node: int
    rho_hat: float
    median_in: float
    median_out: float
    label_in: Label
    label_out: Label

    @property
    def rho_clamped(self) -> float:
        return min(1.0, max(0.0, self.rho_hat))


@dataclass
class ScoreResult:
    nodes: dict = field(default_factory=dict)   # node -> NodeScore
    betas: dict = field(default_factory=dict)   # edge -> beta
    links: dict = field(default_factory=dict)   # edge -> LinkEstimate

    def rho(self, node: int) -> float:
        return self.nodes[node].rho_hat


def _edge_weights(tally: EpochTally, topo: Topology):
    """Weights of the far endpoint when medians are taken at a node."""
    out_g = {g: sum(tally.s_star(g, i) for i in topo.layer_nodes(1)) for g in topo.gateways}
    in_g = {g: sum(tally.s_star(k, g) for k in topo.layer_nodes(topo.L)) for g in topo.gateways}
    tot_out, tot_in = sum(out_g.values()), sum(in_g.values())
    w_out = {g: (v / tot_out if tot_out else 1 / topo.W_G) for g, v in out_g.items()}
    w_in = {g: (v / tot_in if tot_in else 1 / topo.W_G) for g, v in in_g.items()}
    return w_out, w_in


def node_scores(tally: EpochTally, topo: Topology, scheme: Scheme | str = Scheme.THRESHOLD,
                tau_bar: float = DEFAULT_TAU, Z: float = DEFAULT_Z,
                burned=None) -> ScoreResult:
    """Score every node from the epoch's link tallies.

    Medians skip edges without samples and burned edges (no evidence about
    either endpoint); a node with no evidence gets median 1.0.  Burned edges
    count as all-drop traffic of average volume with blame split evenly.
    """
    scheme = Scheme(scheme)
    burned = set(topo.burned if burned is None else burned)
    res = ScoreResult()
    mix_edges = [(i, j) for i in range(topo.n_nodes) for j in topo.raw_successors(i)]
    for e in mix_edges:
        t = tally.links.get(e)
        res.links[e] = link_estimate(t.s_star if t else 0, t.d_star if t else 0, Z)
    w_out_g, w_in_g = _edge_weights(tally, topo)
    inv_w = 1 / topo.W

    def weight(node: int, incoming: bool) -> float:
        if topo.is_gateway(node):
            return w_out_g[node] if incoming else w_in_g[node]
        return inv_w

    def median(node: int, incoming: bool) -> float:
        pairs = []
        if incoming:
            edges = [(i, node) for i in topo.raw_predecessors(node)]
        else:
            edges = [(node, k) for k in topo.raw_successors(node)]
        for e in edges:
            if e in burned:
                continue
            est = res.links[e]
            if est.n == 0:
                continue
            far = e[0] if incoming else e[1]
            w = weight(far, incoming)
            if w > 0:
                pairs.append((est.rho_hat, w))
        return weighted_median(pairs) if pairs else 1.0

    med_in = {n: median(n, True) for n in range(topo.n_nodes)}
    med_out = {n: median(n, False) for n in range(topo.n_nodes)}
    in_samples = {n: sum(tally.s_star(i, n) for i in topo.raw_predecessors(n))
                  for n in range(topo.n_nodes)}

    # average volume of a non-burned edge per layer transition, for burned edges
    vol = {}
    for layer in range(topo.L + 1):
        src = topo.layer_nodes(layer)
        tot, cnt = 0, 0
        for i in src:
            for j in topo.raw_successors(i):
                if (i, j) not in burned:
                    t = tally.links.get((i, j))
                    tot += t.samples if t else 0
                    cnt += 1
        vol[layer] = tot / cnt if cnt else 0.0

    num = {n: 0.0 for n in range(topo.n_nodes)}
    den = {n: 0.0 for n in range(topo.n_nodes)}
    for (i, j) in mix_edges:
        if (i, j) in burned:
            d = vol[topo.layer_of(i)]
            res.betas[(i, j)] = 0.5
            num[i] += 0.5 * d
            den[j] += 0.5 * d
            continue
        t = tally.links.get((i, j))
        s, d = (t.s_star, t.d_star) if t else (0, 0)
        b = assign_beta(med_out[i], med_in[j], tau_bar, in_samples[j], scheme)
        res.betas[(i, j)] = b
        num[i] += s + b * d
        den[j] += s + b * d
    for g in topo.gateways:
        # lossless client legs
        den[g] += tally.s_star(CLIENT, g)
        num[g] += tally.s_star(g, CLIENT)
    for n in range(topo.n_nodes):
        rho = num[n] / den[n] if den[n] > 0 else 0.0
        res.nodes[n] = NodeScore(
            n, rho, med_in[n], med_out[n],
            Label.RELIABLE if med_in[n] >= tau_bar else Label.UNRELIABLE,
            Label.RELIABLE if med_out[n] >= tau_bar else Label.UNRELIABLE)
    return res


def write_node_scores_csv(path, scores: ScoreResult, epoch: int = 0, mode: str = "w") -> None:
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["epoch", "node", "rho_hat", "rho_hat_clamped", "median_in", "median_out",
                        "label_in", "label_out"])
        for n in sorted(scores.nodes):
            s = scores.nodes[n]
            w.writerow([epoch, n, f"{s.rho_hat:.6f}", f"{s.rho_clamped:.6f}", f"{s.median_in:.6f}",
                        f"{s.median_out:.6f}", s.label_in.value, s.label_out.value])


def write_link_estimates_csv(path, scores: ScoreResult, epoch: int = 0, mode: str = "w") -> None:
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["epoch", "src", "dst", "rho_hat", "epsilon", "method", "n", "beta"])
        for e in sorted(scores.links):
            est = scores.links[e]
            w.writerow([epoch, e[0], e[1], f"{est.rho_hat:.6f}", f"{est.epsilon:.6f}",
                        est.method.value, est.n, scores.betas.get(e, "")])
