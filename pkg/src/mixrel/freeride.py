"""Free-riding detection, route-bias tests and blocklist bookkeeping.

A node j counts every packet it stores from predecessor i (t~_ij).  After
the epoch the opened measurements on (i, j) give the legitimate volume
s^_ij = s*_ij / p_lot.  Injected traffic shows up as a deficit of
measurements: the edge is flagged when s^ falls below t'(1 - eps/p_lot),
with t' = t~ - h^ discounting excess that i itself received from a flagged
predecessor and disclaimed.  Checks run layer by layer so every node knows
its predecessors' disclaimers before checking them.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum

from scipy import special, stats

from .epoch import EpochTally
from .errors import DegenerateCounters
from .topology import Topology

DEFAULT_Z = 2.576


def fr_sampling_error(t_total: float, p_lot: float, Z: float = DEFAULT_Z) -> float:
    """Largest expected deviation of the measurement fraction on t packets."""
    if t_total <= 0:
        return math.inf
    return Z * math.sqrt(p_lot * (1 - p_lot) / t_total)


def detect_edge(t_total: float, s_hat: float, h_hat: float, p_lot: float,
                Z: float = DEFAULT_Z) -> tuple[bool, float, float]:
    """(flag, f^ injected by the predecessor, f^ total excess) for one edge."""
    t_prime = t_total - h_hat
    if t_prime <= 0:
        return False, 0.0, max(0.0, h_hat)
    eps = fr_sampling_error(t_prime, p_lot, Z)
    flag = s_hat < t_prime * (1 - eps / p_lot)
    f_inj = max(0.0, t_total - s_hat - h_hat) if flag else 0.0
    return flag, f_inj, f_inj + h_hat


def flag_probability(legit: int, injected: float, p_lot: float, Z: float = DEFAULT_Z,
                     h_hat: float = 0.0) -> float:
    """Exact P(flag) when the measurement count is Binomial(legit, p_lot)."""
    t_prime = legit + injected - h_hat
    if t_prime <= 0:
        return 0.0
    eps = fr_sampling_error(t_prime, p_lot, Z)
    # flag iff m / p < t'(1 - eps/p)  <=>  m < t'(p - eps)
    bound = t_prime * (p_lot - eps)
    m_max = math.ceil(bound) - 1  # largest integer strictly below the bound
    if m_max < 0:
        return 0.0
    return float(stats.binom.cdf(m_max, legit, p_lot))


def forwarded_excess(node: int, carriers, t_triples: dict, s_triples: dict, p_lot: float,
                     successors, totals: dict | None = None) -> dict:
    """h^_(i,k) for each successor k of ``node``, summed over predecessors with f^ > 0.

    Per-successor excess is clamped at zero.  With ``totals`` (g -> f^_(g,i))
    each carrier's split is rescaled to sum to its f^_(g,i): the clamped
    per-successor noise would otherwise inflate h^ at every layer it passes.
    """
    out = {k: 0.0 for k in successors}
    for g in carriers:
        part = {}
        for k in successors:
            t = t_triples.get((g, node, k), 0)
            s_hat = s_triples.get((g, node, k), 0) / p_lot
            part[k] = max(0.0, t - s_hat)
        if totals is not None:
            mass = sum(part.values())
            scale = totals.get(g, 0.0) / mass if mass > 0 else 0.0
            part = {k: v * scale for k, v in part.items()}
        for k, v in part.items():
            out[k] += v
    return out


@dataclass
class EdgeCheck:
    pred: int
    t_total: int
    s_hat: float
    h_hat: float
    epsilon: float
    flag: bool
    f_hat_injected: float
    f_hat_total: float


@dataclass
class FreeRideReport:
    node: int
    incoming: dict = field(default_factory=dict)   # pred -> EdgeCheck
    h_hat: dict = field(default_factory=dict)      # succ -> forwarded excess

    @property
    def flagged(self) -> set:
        return {i for i, c in self.incoming.items() if c.flag}

    @property
    def all_clear(self) -> bool:
        return not self.flagged


def layer_sweep(tally: EpochTally, t_edges: dict, t_triples: dict, topo: Topology,
                p_lot: float, Z: float = DEFAULT_Z) -> dict:
    """Run every node's checks in layer order and return their reports.

    ``t_edges[(i, j)]`` is j's count of packets stored from i, and
    ``t_triples[(g, i, j)]`` is i's count of packets from g forwarded to j.
    Layer 1 checks the gateways, each later layer checks the one before,
    and the exit gateways check layer L.
    """
    s_triples = tally.triples
    reports = {}
    disclaimed = {}  # (i, j) -> h^ broadcast by i
    order = [topo.layer_nodes(layer) for layer in range(1, topo.L + 1)] + [topo.gateways]
    for nodes in order:
        for j in nodes:
            rep = FreeRideReport(j)
            for i in topo.predecessors(j):
                t = t_edges.get((i, j), 0)
                h = disclaimed.get((i, j), 0.0)
                s_hat = tally.s_star(i, j) / p_lot
                flag, f_inj, f_tot = detect_edge(t, s_hat, h, p_lot, Z)
                eps = fr_sampling_error(t - h, p_lot, Z)
                rep.incoming[i] = EdgeCheck(i, t, s_hat, h, eps, flag, f_inj, f_tot)
            if not topo.is_gateway(j):
                succ = topo.successors(j)
                # excess passes on from flagged predecessors and from those
                # whose own traffic carried disclaimed excess
                totals = {i: c.f_hat_total for i, c in rep.incoming.items() if c.f_hat_total > 0}
                rep.h_hat = forwarded_excess(j, sorted(totals), t_triples, s_triples, p_lot, succ,
                                             totals)
                for k, h in rep.h_hat.items():
                    disclaimed[(j, k)] = h
            reports[j] = rep
    return reports


# -- route bias ---------------------------------------------------------------


class BiasVerdict(str, Enum):
    UNBIASED = "UNBIASED"
    BIASED = "BIASED"


@dataclass(frozen=True)
class BiasTestResult:
    chi2: float
    df: int
    critical: float
    verdict: BiasVerdict


def wilson_hilferty(df: int, p: float) -> float:
    z = stats.norm.isf(p)
    a = 2 / (9 * df)
    return df * (1 - a + z * math.sqrt(a)) ** 3


def chi2_critical(df: int, p: float, method: str = "exact") -> float:
    """Upper-tail critical value of chi^2(df) at significance p.

    ``exact`` uses the inverse CDF.  ``wilson-hilferty`` uses the cube-root
    normal approximation for df >= 10 and bisection on the regularized upper
    incomplete gamma below that.
    """
    if method == "exact":
        return float(stats.chi2.isf(p, df))
    if method != "wilson-hilferty":
        raise ValueError(f"unknown method {method!r}")
    if df >= 10:
        return wilson_hilferty(df, p)
    lo, hi = 0.0, max(10.0, 10.0 * df)
    while special.gammaincc(df / 2, hi / 2) > p:
        hi *= 2
    while hi - lo > 1e-10 * max(1.0, hi):
        mid = (lo + hi) / 2
        if special.gammaincc(df / 2, mid / 2) > p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def chi_square_bias(counters, p: float = 0.01, method: str = "exact") -> BiasTestResult:
    counters = [float(c) for c in counters]
    n = len(counters)
    if n < 2:
        raise DegenerateCounters("need at least two successors")
    mean = sum(counters) / n
    if mean <= 0:
        raise DegenerateCounters("no traffic to test")
    chi2 = sum((c - mean) ** 2 for c in counters) / mean
    crit = chi2_critical(n - 1, p, method)
    return BiasTestResult(chi2, n - 1, crit, BiasVerdict.BIASED if chi2 > crit else BiasVerdict.UNBIASED)


def bias_scan(t_triples: dict, topo: Topology, p: float = 0.01, method: str = "exact") -> dict:
    """chi^2 test for every (predecessor g, node i) pair with traffic."""
    per = defaultdict(dict)
    for (g, i, j), c in t_triples.items():
        per[(g, i)][j] = c
    out = {}
    for (g, i), row in sorted(per.items()):
        counts = [row.get(j, 0) for j in topo.successors(i)]
        if len(counts) < 2 or sum(counts) == 0:
            continue
        out[(g, i)] = chi_square_bias(counts, p, method)
    return out


# -- blocklist ----------------------------------------------------------------


@dataclass
class Blocklist:
    burned: set = field(default_factory=set)
    strikes: Counter = field(default_factory=Counter)
    expelled: set = field(default_factory=set)
    threshold_fraction: float = 0.5
    threshold_epochs: int = 2
    peer_limit: int | None = None
    weights: dict | None = None  # optional per-node weights (e.g. stake)
    events: list = field(default_factory=list)
    epoch: int = 0

    def copy(self) -> "Blocklist":
        return Blocklist(set(self.burned), Counter(self.strikes), set(self.expelled),
                         self.threshold_fraction, self.threshold_epochs, self.peer_limit,
                         self.weights, list(self.events), self.epoch)

    def _w(self, node: int) -> float:
        return 1.0 if self.weights is None else self.weights.get(node, 0.0)


def blocklist_update(blocklist: Blocklist, reports: dict, topo: Topology) -> Blocklist:
    """Burn flagged edges, count strikes and expel.

    A node is expelled once it has been flagged by at least
    ``threshold_fraction`` of its current successors (by weight) in
    ``threshold_epochs`` epochs.  A node that has blocklisted more than
    ``peer_limit`` distinct predecessors is expelled as well.
    """
    bl = blocklist.copy()
    bl.epoch += 1
    flagged_by = defaultdict(set)
    for j, rep in reports.items():
        for i in rep.flagged:
            flagged_by[i].add(j)
            if (i, j) not in bl.burned:
                bl.burned.add((i, j))
                bl.events.append((bl.epoch, "burn", i, j))
    for i, judges in sorted(flagged_by.items()):
        current = [k for k in topo.raw_successors(i) if (i, k) not in blocklist.burned]
        total = sum(bl._w(k) for k in current)
        got = sum(bl._w(k) for k in judges if k in current)
        if total > 0 and got >= bl.threshold_fraction * total:
            bl.strikes[i] += 1
            bl.events.append((bl.epoch, "strike", i, bl.strikes[i]))
            if bl.strikes[i] >= bl.threshold_epochs and i not in bl.expelled:
                bl.expelled.add(i)
                bl.events.append((bl.epoch, "expel", i, "flagged"))
    if bl.peer_limit is not None:
        blocked = defaultdict(set)
        for i, j in bl.burned:
            blocked[j].add(i)
        for j, preds in sorted(blocked.items()):
            if len(preds) > bl.peer_limit and j not in bl.expelled:
                bl.expelled.add(j)
                bl.events.append((bl.epoch, "expel", j, "peer-limit"))
    return bl


# -- CSV ----------------------------------------------------------------------


def write_freeride_csv(path, reports: dict, epoch: int = 0, mode: str = "w") -> None:
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["epoch", "node", "edge", "flag", "f_hat_injected", "f_hat_total", "h_hat"])
        for j in sorted(reports):
            for i, c in sorted(reports[j].incoming.items()):
                w.writerow([epoch, j, f"{i}->{j}", int(c.flag), f"{c.f_hat_injected:.3f}",
                            f"{c.f_hat_total:.3f}", f"{c.h_hat:.3f}"])


def write_bias_csv(path, results: dict, epoch: int = 0, mode: str = "w") -> None:
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["epoch", "node", "predecessor", "chi2", "critical", "verdict"])
        for (g, i), r in sorted(results.items()):
            w.writerow([epoch, i, g, f"{r.chi2:.4f}", f"{r.critical:.4f}", r.verdict.value])


def write_blocklist_csv(path, blocklist: Blocklist) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "event", "node", "detail"])
        for ep, kind, node, detail in blocklist.events:
            w.writerow([ep, kind, node, detail])
