"""Experiment setups: the unreliable profile, attack placements, free riders."""

from __future__ import annotations

import math
import warnings
from dataclasses import replace

import numpy as np

from ..errors import ConfigInvalid, LayerTooSmall, PlacementInfeasible
from .config import (NodeBehavior, SimConfig, adversarial, free_rider, offline_toggle,
                     random_drop, throughput_cap)

CAP_FRACTIONS = (1.0, 0.5, 0.25, 0.125)
DROP_PROFILES = (("in", 0.01), ("out", 0.01), ("in", 0.20), ("out", 0.20))
PLACEMENTS = ("targets-before", "targets-after", "targets-around", "adversaries-around")


def _layer_ids(cfg: SimConfig, layer: int) -> list:
    if layer == 0:
        return list(range(cfg.W_G))
    start = cfg.W_G + (layer - 1) * cfg.W
    return list(range(start, start + cfg.W))


def _perm(seed: int, tag: int, layer: int, ids: list) -> list:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x50, tag, layer)))
    return [ids[i] for i in rng.permutation(len(ids))]


def _nearest(x: float) -> int:
    return int(math.floor(x + 0.5))


def profile_counts(width: int, offline_share: float = 0.4) -> tuple[int, int, int, int]:
    """(offline, capped, droppers, reliable) nodes in a layer of ``width``."""
    off = _nearest(offline_share * width)
    cap = _nearest(0.05 * width)
    drop = _nearest(0.05 * width)
    return off, cap, drop, width - off - cap - drop


def assign_unreliable_profile(cfg: SimConfig, enabled: bool = True, offline_share: float = 0.4,
                              include_gateways: bool = True, strict: bool = False) -> SimConfig:
    """Give every layer the mixed unreliable profile.

    Per layer: ``offline_share`` of the nodes toggle offline (90 min on /
    10 min off on average), 5% cap their throughput at 1, 1/2, 1/4 or 1/8
    of the mean incoming rate, 5% drop packets at random (1% or 20%, in or
    out), and the rest are reliable.  Counts are rounded to the nearest
    integer, so narrow layers keep the proportions only approximately; the
    cap and drop variants rotate across layers so that every variant
    appears when there are fewer than four such nodes per layer.
    """
    if not enabled:
        return replace(cfg, behaviors={})
    layers = ([0] if include_gateways else []) + list(range(1, cfg.L + 1))
    behaviors = {}
    slot = 0
    for layer in layers:
        ids = _layer_ids(cfg, layer)
        if len(ids) < 10:
            msg = f"layer {layer} has {len(ids)} < 10 nodes; using nearest-integer counts"
            if strict:
                raise LayerTooSmall(msg)
            warnings.warn(msg, stacklevel=2)
        off, cap, drop, _ = profile_counts(len(ids), offline_share)
        order = _perm(cfg.seed, 1, layer, ids)
        for n in order[:off]:
            behaviors[n] = offline_toggle(90.0, 10.0)
        for i, n in enumerate(order[off:off + cap]):
            behaviors[n] = throughput_cap(CAP_FRACTIONS[(slot + i) % 4])
        for i, n in enumerate(order[off + cap:off + cap + drop]):
            d, r = DROP_PROFILES[(slot + i) % 4]
            behaviors[n] = random_drop(d, r)
        slot += max(cap, drop, 1)
    return replace(cfg, behaviors=behaviors)


# -- adversarial ----------------------------------------------------------------


def adversarial_scenario(cfg: SimConfig, n_adv: int, n_targets: int,
                         placement: str = "targets-after", center: int = 2) -> SimConfig:
    """Place |A| adversaries and |T| targets in adjacent layers.

    ``targets-before`` / ``targets-after``: all adversaries in layer
    ``center``, all targets in the layer before / after it.
    ``targets-around``: adversaries in ``center``, targets split evenly
    between the layers before and after.  ``adversaries-around``: targets
    in ``center``, adversaries split evenly before and after.  Adversaries
    drop every packet on edges shared with targets and nothing else.
    Existing behaviors of the chosen nodes are replaced.
    """
    if placement not in PLACEMENTS:
        raise PlacementInfeasible(f"unknown placement {placement!r}")
    if n_adv < 1 or n_targets < 1:
        raise PlacementInfeasible("need at least one adversary and one target")
    L = cfg.L
    before, after = (center - 1) % (L + 1), (center + 1) % (L + 1)
    if before == after:
        raise PlacementInfeasible("need at least two layers around the center")

    def pick(layer: int, k: int, tag: int, taken=()) -> list:
        free = [n for n in _perm(cfg.seed, tag, layer, _layer_ids(cfg, layer)) if n not in taken]
        if k > len(free):
            raise PlacementInfeasible(f"layer {layer} cannot hold {k} more nodes")
        return sorted(free[:k])

    def halves(k: int, what: str) -> tuple[int, int]:
        if k < 2 or k % 2:
            raise PlacementInfeasible(f"splitting {what} needs an even count >= 2")
        return k // 2, k // 2

    if placement in ("targets-before", "targets-after", "targets-around"):
        adv = pick(center, n_adv, 2)
        if placement == "targets-before":
            tgt = pick(before, n_targets, 3)
        elif placement == "targets-after":
            tgt = pick(after, n_targets, 3)
        else:
            a, b = halves(n_targets, "targets")
            tgt = pick(before, a, 3) + pick(after, b, 3)
    else:
        a, b = halves(n_adv, "adversaries")
        adv = pick(before, a, 2) + pick(after, b, 2)
        tgt = pick(center, n_targets, 3)
    behaviors = dict(cfg.behaviors)
    for n in tgt:
        behaviors[n] = NodeBehavior()
    layer_of = _layer_map(cfg)
    for n in adv:
        la = layer_of[n]
        near = [t for t in tgt if layer_of[t] in ((la - 1) % (L + 1), (la + 1) % (L + 1))]
        behaviors[n] = adversarial(near, "both", 1.0)
    return replace(cfg, behaviors=behaviors)


def _layer_map(cfg: SimConfig) -> dict:
    out = {}
    for layer in range(cfg.L + 1):
        for n in _layer_ids(cfg, layer):
            out[n] = layer
    return out


def feasible_placements(n_adv: int, n_targets: int, width: int) -> list:
    """Placements of the enumeration that fit layers of ``width``."""
    out = []
    if n_adv <= width and n_targets <= width:
        out += ["targets-before", "targets-after"]
        if n_targets >= 2 and n_targets % 2 == 0:
            out.append("targets-around")
    if n_adv >= 2 and n_adv % 2 == 0 and n_adv // 2 <= width and n_targets <= width:
        out.append("adversaries-around")
    return out


def attack_sets(cfg: SimConfig) -> tuple[set, set]:
    """(adversaries, targets) named by a config's behaviors."""
    adv = {n for n, b in cfg.behaviors.items() if b.kind == "adversarial"}
    tgt = set()
    for n in adv:
        tgt |= set(cfg.behaviors[n].targets)
    return adv, tgt


def attack_edges(cfg: SimConfig) -> set:
    """Edges on which the adversaries drop everything."""
    layer_of = _layer_map(cfg)
    L = cfg.L
    edges = set()
    for n, b in cfg.behaviors.items():
        if b.kind != "adversarial":
            continue
        for t in b.targets:
            if layer_of[t] == (layer_of[n] - 1) % (L + 1) and b.direction in ("in", "both"):
                edges.add((t, n))
            if layer_of[t] == (layer_of[n] + 1) % (L + 1) and b.direction in ("out", "both"):
                edges.add((n, t))
    return edges


def attack_costs(scores, adversaries, targets) -> tuple[float, float]:
    """(c_A, c_T): total reliability each group lost, |S| - sum of rho_hat."""
    rho = _rho_lookup(scores)
    c_a = len(adversaries) - sum(rho(n) for n in adversaries)
    c_t = len(targets) - sum(rho(n) for n in targets)
    return c_a, c_t


def _rho_lookup(scores):
    if hasattr(scores, "nodes"):
        return lambda n: scores.nodes[n].rho_hat
    return lambda n: float(scores[n])


# -- free riding ------------------------------------------------------------------


def free_rider_mix(rate: float, variant: int = 0) -> NodeBehavior:
    """A free rider injecting ``rate`` relative to the packets it receives.

    Rates up to 10% alternate between pure substitution (even ``variant``)
    and pure addition (odd); higher rates split evenly between the two.
    """
    if not 0 < rate <= 1:
        raise ConfigInvalid("free riding rate must lie in (0, 1]")
    if rate > 0.10:
        return free_rider(rate / 2, rate / 2)
    return free_rider(rate, 0.0) if variant % 2 == 0 else free_rider(0.0, rate)


def freeride_scenario(cfg: SimConfig, rates: dict, layer: int | None = None) -> SimConfig:
    """Make free riders of the first nodes (in a seeded order) of ``layer``.

    ``rates`` maps an injection rate to how many riders use it.  ``layer``
    defaults to the last mix layer, whose successors are the exit gateways,
    so that unflagged excess does not propagate into other honest checks.
    """
    layer = cfg.L if layer is None else layer
    order = _perm(cfg.seed, 4, layer, _layer_ids(cfg, layer))
    need = sum(rates.values())
    if need > len(order):
        raise PlacementInfeasible(f"{need} free riders do not fit in layer {layer}")
    behaviors = dict(cfg.behaviors)
    i = 0
    for rate, count in sorted(rates.items()):
        for v in range(count):
            behaviors[order[i]] = free_rider_mix(rate, v)
            i += 1
    return replace(cfg, behaviors=behaviors)


def free_riders(cfg: SimConfig) -> dict:
    """node -> overall injection rate."""
    return {n: b.substitute_rate + b.add_rate for n, b in cfg.behaviors.items()
            if b.kind == "free_rider"}
