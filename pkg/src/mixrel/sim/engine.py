"""Single-threaded discrete-event simulation of one epoch.

Clients emit Poisson traffic through credentials at their gateway.  Every
packet walks gateway -> layer 1 -> ... -> layer L -> exit gateway, spending
a link transmission time on each edge plus an exponential mixing delay at
mix nodes (a fixed processing time at gateways).  Nodes apply their
behavior on arrival (before storing the tag: an in-edge drop) and on
departure (after storing: an out-edge drop).

At the end of the epoch every node commits to its stored tags and the
gateways open their measurement packets, which yields the same transcript
an honest deployment would publish.  Ground truth is kept alongside.

Randomness comes from numpy streams keyed by (purpose, entity), so adding
a node does not perturb the draws of the others.
"""

from __future__ import annotations

import hashlib
import heapq
import time as _time
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..commitment import BloomCommitment, MerkleCommitment
from ..epoch import CLIENT, CredentialRecord, EpochTranscript, honest_no_skipping_responses
from ..group import by_name
from ..hashing import DOM_SIM
from ..packet import (Credential, PacketParams, build_onion, derive_walk, draw_packet,
                      encode_packet, expected_alpha, open_measurement, process_packet)
from ..topology import Topology, routing
from ..vrf import vrf_keygen
from .config import SimConfig

# stream purposes
_CLIENT, _DELAY, _COIN, _OFFLINE, _INJECT = range(5)

_GROUPS = {"real": "ed25519", "lite": "mirror", "fast": "lite"}


def group_for_mode(mode: str):
    return by_name(_GROUPS[mode])


def _derive(seed: int, *parts) -> bytes:
    data = b"".join(int(p).to_bytes(8, "big", signed=True) for p in parts)
    return hashlib.sha256(bytes([DOM_SIM]) + seed.to_bytes(16, "big", signed=True) + data).digest()


class _Stream:
    """Buffered uniforms and exponentials from one numpy generator."""

    __slots__ = ("rng", "_u", "_ui", "_e", "_ei")
    BLOCK = 2048

    def __init__(self, seed: int, purpose: int, entity: int):
        ss = np.random.SeedSequence(seed, spawn_key=(purpose, entity + 1))
        self.rng = np.random.default_rng(ss)
        self._u, self._ui = [], 0
        self._e, self._ei = [], 0

    def uniform(self) -> float:
        if self._ui == len(self._u):
            self._u, self._ui = self.rng.random(self.BLOCK).tolist(), 0
        self._ui += 1
        return self._u[self._ui - 1]

    def exponential(self) -> float:
        if self._ei == len(self._e):
            self._e, self._ei = self.rng.standard_exponential(self.BLOCK).tolist(), 0
        self._ei += 1
        return self._e[self._ei - 1]

    def randbytes(self, n: int) -> bytes:
        return self.rng.bytes(n)


class _Offline:
    """Alternating on/off intervals starting from the stationary state."""

    def __init__(self, stream: _Stream, mean_on: float, mean_off: float, horizon: float):
        rng = stream.rng
        online = rng.random() < mean_on / (mean_on + mean_off)
        t = 0.0
        self.starts, self.ends = [], []
        while t < horizon:
            if online:
                t += rng.exponential(mean_on)
            else:
                start = t
                t += rng.exponential(mean_off)
                self.starts.append(start)
                self.ends.append(t)
            online = not online

    def offline_at(self, t: float) -> bool:
        i = bisect_right(self.starts, t) - 1
        return i >= 0 and t < self.ends[i]

    def back_online(self, t: float) -> float:
        i = bisect_right(self.starts, t) - 1
        return self.ends[i] if i >= 0 and t < self.ends[i] else t

    def goes_offline(self, t0: float, t1: float) -> bool:
        j = bisect_right(self.starts, t0)
        return j < len(self.starts) and self.starts[j] <= t1

    def offline_seconds(self, t0: float, t1: float) -> float:
        return sum(max(0.0, min(e, t1) - max(s, t0)) for s, e in zip(self.starts, self.ends))


class _Bucket:
    __slots__ = ("rate", "cap", "tokens", "last")

    def __init__(self, rate: float, cap: float):
        self.rate, self.cap, self.tokens, self.last = rate, cap, cap, 0.0

    def take(self, t: float) -> bool:
        self.tokens = min(self.cap, self.tokens + (t - self.last) * self.rate)
        self.last = t
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


class _Pkt:
    __slots__ = ("pid", "nodes", "tags", "start", "meas", "key", "injected", "onion", "born",
                 "prev", "idx")

    def __init__(self, pid, nodes, tags, start, meas, key, injected, onion, born):
        self.pid, self.nodes, self.tags, self.start = pid, nodes, tags, start
        self.meas, self.key, self.injected, self.onion, self.born = meas, key, injected, onion, born
        self.prev = CLIENT
        self.idx = 0  # position on the walk of the next node to receive it


@dataclass
class GroundTruth:
    """True per-edge counters.  Client legs are the edges to/from ``CLIENT``."""

    s: Counter = field(default_factory=Counter)         # stored by the receiver
    d: Counter = field(default_factory=Counter)         # lost on the edge
    d_recv: Counter = field(default_factory=Counter)    # lost before storing (receiver's fault)
    injected: Counter = field(default_factory=Counter)  # per node
    injected_on_edge: Counter = field(default_factory=Counter)
    measurements: list = field(default_factory=list)    # (cred, ctr, nodes, k)
    events: list = field(default_factory=list)
    emitted: int = 0
    delivered: int = 0
    latency_sum: float = 0.0

    def beta(self, e) -> float | None:
        d = self.d.get(e, 0)
        return self.d_recv.get(e, 0) / d if d else None

    def rho(self, node: int) -> float:
        """Packets the node sent on divided by packets that reached it."""
        return self.rhos([node])[node]

    def rhos(self, nodes) -> dict:
        out, into = Counter(), Counter()
        for e in set(self.s) | set(self.d):
            v = self.s[e] + self.d_recv[e]
            out[e[0]] += v
            into[e[1]] += v
        return {n: (out[n] / into[n] if into[n] else 1.0) for n in nodes}

    def flow_conservation(self, nodes) -> dict:
        """node -> (stored from predecessors + injected, sent or lost on out-edges)."""
        into, out = Counter(), Counter()
        for e in set(self.s) | set(self.d):
            into[e[1]] += self.s[e]
            out[e[0]] += self.s[e] + self.d[e]
        return {n: (into[n] + self.injected[n], out[n]) for n in nodes}

    @property
    def mean_latency(self) -> float:
        return self.latency_sum / self.delivered if self.delivered else 0.0


@dataclass
class SimResult:
    config: SimConfig
    topology: Topology
    params: PacketParams
    transcript: EpochTranscript
    ground_truth: GroundTruth
    t_edges: Counter
    t_triples: Counter
    credentials: dict
    stats: dict


def build_topology(config: SimConfig, group=None) -> Topology:
    group = group or group_for_mode(config.crypto_mode)
    seed = _derive(config.seed, 0x70)
    topo = Topology.generate(config.L, config.W, config.W_G, group, seed=seed)
    return topo.with_burned(config.burned) if config.burned else topo


def epoch_nonce(config: SimConfig) -> int:
    return int.from_bytes(_derive(config.seed, 0x6E, config.epoch)[:8], "big")


def run_epoch(config: SimConfig, topology: Topology | None = None) -> SimResult:
    return _Epoch(config, topology).run()


class _Epoch:
    def __init__(self, cfg: SimConfig, topo: Topology | None):
        self.cfg = cfg
        self.group = group_for_mode(cfg.crypto_mode)
        self.topo = topo or build_topology(cfg, self.group)
        if self.topo.group is not self.group:
            raise ValueError("topology group does not match the crypto mode")
        self.params = PacketParams(cfg.p_lot, epoch_nonce(cfg), cfg.L)
        self.real = cfg.crypto_mode == "real"
        self.gt = GroundTruth()
        self.t_edges = Counter()
        self.t_triples = Counter()
        n = self.topo.n_nodes
        self.tagbuf = [bytearray() for _ in range(n)]
        self.seen = [set() for _ in range(n)] if self.real else None
        self.heap = []
        self.seq = 0
        self.pid = 0
        seed = cfg.seed
        self.delay = [_Stream(seed, _DELAY, i) for i in range(n)]
        self.coin = [_Stream(seed, _COIN, i) for i in range(n)]
        self.inject = {}
        self.offline = {}
        self.bucket = {}
        self.beh = [None] * n
        horizon = cfg.epoch_seconds + 600.0
        total_rate = cfg.clients * cfg.client_rate
        for node, b in cfg.behaviors.items():
            if b.kind == "reliable":
                continue
            self.beh[node] = b
            if b.kind == "offline_toggle":
                self.offline[node] = _Offline(_Stream(seed, _OFFLINE, node), b.mean_on_min * 60,
                                              b.mean_off_min * 60, horizon)
            elif b.kind == "throughput_cap":
                mean = total_rate / (cfg.W_G if self.topo.is_gateway(node) else cfg.W)
                rate = b.fraction * mean
                self.bucket[node] = _Bucket(rate, max(1.0, rate * cfg.cap_bucket_seconds))
            elif b.kind == "free_rider":
                self.inject[node] = _Stream(seed, _INJECT, node)
        self.mix_delay = cfg.mix_delay_ms / 1000
        self.link = cfg.link_ms / 1000
        self.gw_delay = cfg.gateway_ms / 1000
        self.nu = self.params.nu
        self.creds = {}
        self.client_creds = {}

    # -- setup ----------------------------------------------------------------

    def _new_credential(self, client: int, stream: _Stream) -> Credential:
        cid = len(self.creds)
        gw = int(stream.rng.integers(0, self.cfg.W_G))
        kp = vrf_keygen(_derive(self.cfg.seed, 0x63, self.cfg.epoch, cid), self.group)
        x = self.group.scalar_from_bytes(hashlib.sha512(_derive(self.cfg.seed, 0x78, cid)).digest())
        cred = Credential(cid, gw, kp, x, self.cfg.credential_allowance)
        self.creds[cid] = cred
        self.client_creds.setdefault(client, []).append(cid)
        return cred

    def _push(self, t, kind, a, b=None):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, a, b))

    # -- main loop --------------------------------------------------------------

    def run(self) -> SimResult:
        cfg = self.cfg
        t0 = _time.perf_counter()
        self.clients = []
        for c in range(cfg.clients):
            st = _Stream(cfg.seed, _CLIENT, c)
            n = int(st.rng.poisson(cfg.client_rate * cfg.epoch_seconds))
            times = np.sort(st.rng.random(n) * cfg.epoch_seconds).tolist()
            self.clients.append([times, 0, None, st])
            if n:
                self._push(times[0], 0, c)
        pop = heapq.heappop
        heap = self.heap
        while heap:
            t, _, kind, a, b = pop(heap)
            if kind == 0:
                self._emit(t, a)
            else:
                self._arrive(t, a, b)
        stats = {"emitted": self.gt.emitted, "delivered": self.gt.delivered,
                 "measurements": len(self.gt.measurements),
                 "injected": sum(self.gt.injected.values()),
                 "mean_latency_s": self.gt.mean_latency,
                 "sim_seconds": _time.perf_counter() - t0}
        t1 = _time.perf_counter()
        transcript = self._publish()
        stats["publish_seconds"] = _time.perf_counter() - t1
        return SimResult(cfg, self.topo, self.params, transcript, self.gt, self.t_edges,
                         self.t_triples, self.creds, stats)

    def _emit(self, t: float, client: int) -> None:
        st = self.clients[client]
        times, i, cred, stream = st
        st[1] = i + 1
        if i + 1 < len(times):
            self._push(times[i + 1], 0, client)
        if cred is None or cred.count >= cred.allowance:
            cred = st[2] = self._new_credential(client, stream)
        ctr = cred.count
        self.pid += 1
        self.gt.emitted += 1
        if self.real:
            enc = encode_packet(cred, self.topo, self.params, ctr)
            pkt = _Pkt(self.pid, [cred.gateway], [], 0, enc.is_measurement,
                       (cred.cred_id, ctr), False, enc.onion, t)
        else:
            cred.claim(ctr)
            d = draw_packet(cred, self.topo, self.params, ctr)
            pkt = _Pkt(self.pid, d.nodes, d.tags, 0, d.is_measurement, (cred.cred_id, ctr),
                       False, None, t)
        self._push(t + self.link, 1, cred.gateway, pkt)

    def _arrive(self, t: float, node: int, pkt: _Pkt) -> None:
        gt = self.gt
        prev = pkt.prev
        beh = self.beh[node]
        log = self.cfg.record_events
        idx = pkt.idx
        hop = pkt.start + idx
        if prev == CLIENT:
            if node in self.offline and self.offline[node].offline_at(t):
                # the client waits for its gateway
                self._push(self.offline[node].back_online(t), 1, node, pkt)
                return
        elif beh is not None and self._drop_in(t, node, prev, beh):
            gt.d[(prev, node)] += 1
            gt.d_recv[(prev, node)] += 1
            if log:
                gt.events.append((t, "drop_in", node, prev, pkt.pid))
            self._measure_end(pkt, hop)
            return
        # store
        if self.real:
            res = process_packet(self.topo.secret_keys[node], node, pkt.onion, self.topo,
                                 expected_alpha(self.creds[pkt.key[0]], self.params, pkt.key[1])
                                 if hop == 0 and not pkt.injected else None)
            tag = res.tag
            if tag in self.seen[node]:
                gt.d[(prev, node)] += 1
                gt.d_recv[(prev, node)] += 1
                return
            self.seen[node].add(tag)
            pkt.tags.append(tag)
            nxt = res.next_hop
            pkt.onion = res.next_packet
        else:
            tag = pkt.tags[idx]
            nxt = pkt.nodes[idx + 1] if idx + 1 < len(pkt.nodes) else None
        pkt.idx = idx + 1
        self.tagbuf[node] += tag
        gt.s[(prev, node)] += 1
        if pkt.injected:
            gt.injected_on_edge[(prev, node)] += 1
        if prev != CLIENT:
            self.t_edges[(prev, node)] += 1
        if log:
            gt.events.append((t, "store", node, prev, pkt.pid))
        if nxt is None:
            gt.s[(node, CLIENT)] += 1
            gt.delivered += 1
            gt.latency_sum += t - pkt.born
            self._measure_end(pkt, self.nu + 1)
            if log:
                gt.events.append((t, "deliver", node, prev, pkt.pid))
            return
        if self.real:
            pkt.nodes.append(nxt)
        delay = self.gw_delay if node < self.cfg.W_G else self.delay[node].exponential() * self.mix_delay
        depart = t + delay
        if beh is not None:
            if self._drop_out(t, depart, node, nxt, beh):
                gt.d[(node, nxt)] += 1
                if log:
                    gt.events.append((t, "drop_out", node, nxt, pkt.pid))
                self._measure_end(pkt, hop + 1)
                if beh.kind == "free_rider":
                    self._inject(depart, node)
                return
            if beh.kind == "free_rider" and beh.add_rate and self.coin[node].uniform() < beh.add_rate:
                self._inject(depart, node)
        if prev != CLIENT:
            self.t_triples[(prev, node, nxt)] += 1
        pkt.prev = node
        self._push(depart + self.link, 1, nxt, pkt)

    def _measure_end(self, pkt: _Pkt, k: int) -> None:
        """Log a finished measurement: route up to hop k, first hop without its tag."""
        if pkt.meas:
            self.gt.measurements.append((pkt.key[0], pkt.key[1], tuple(pkt.nodes[:k + 1]), k))

    # -- behaviors ------------------------------------------------------------

    def _drop_in(self, t: float, node: int, prev: int, b) -> bool:
        kind = b.kind
        if kind == "offline_toggle":
            return self.offline[node].offline_at(t)
        if kind == "throughput_cap":
            return not self.bucket[node].take(t)
        if kind == "random_drop":
            return b.direction != "out" and self.coin[node].uniform() < b.rate
        if kind == "adversarial":
            return (b.direction != "out" and prev in b.targets
                    and (b.rate >= 1 or self.coin[node].uniform() < b.rate))
        return False

    def _drop_out(self, t: float, depart: float, node: int, nxt: int, b) -> bool:
        kind = b.kind
        if kind == "offline_toggle":
            return self.offline[node].goes_offline(t, depart)
        if kind == "random_drop":
            return b.direction != "in" and self.coin[node].uniform() < b.rate
        if kind == "adversarial":
            return (b.direction != "in" and nxt in b.targets
                    and (b.rate >= 1 or self.coin[node].uniform() < b.rate))
        if kind == "free_rider":
            return bool(b.substitute_rate) and self.coin[node].uniform() < b.substitute_rate
        return False

    def _inject(self, t: float, node: int) -> None:
        """Send one unpaid, route-conforming packet from ``node``."""
        topo, st = self.topo, self.inject[node]
        k = routing(topo, node, st.randbytes(32))
        layer = topo.layer_of(k)
        length = 1 if layer == 0 else topo.L - layer + 2
        start = layer if layer else self.nu
        e0 = self.group.scalar_from_bytes(st.randbytes(64))
        self.pid += 1
        self.gt.injected[node] += 1
        if self.real:
            chain = derive_walk(topo, e0, k, length, with_keys=True)
            pkt = _Pkt(self.pid, [k], [], start, False, None, True,
                       build_onion(self.group, chain, b""), t)
        else:
            chain = derive_walk(topo, e0, k, length)
            pkt = _Pkt(self.pid, chain.nodes, chain.tags, start, False, None, True, None, t)
        pkt.prev = node
        self._push(t + self.link, 1, k, pkt)

    # -- end of epoch -----------------------------------------------------------

    def _publish(self) -> EpochTranscript:
        cfg, group = self.cfg, self.group
        commitments = {}
        for node, buf in enumerate(self.tagbuf):
            tags = [bytes(buf[o:o + 32]) for o in range(0, len(buf), 32)]
            if cfg.commitment == "bloom":
                c = BloomCommitment(max(1, len(tags)), cfg.bloom_fp)
            else:
                c = MerkleCommitment()
            c.insert_many(tags)
            commitments[node] = c
        self.tagbuf = None
        records = {cid: CredentialRecord(cid, c.gateway, c.vrf.vk, c.count)
                   for cid, c in self.creds.items()}
        meas_keys = sorted((m[0], m[1]) for m in self.gt.measurements)
        openings = [open_measurement(self.creds[cid], self.params, ctr) for cid, ctr in meas_keys]
        tr = EpochTranscript(cfg.epoch, self.params.nonce, cfg.p_lot, cfg.L, group, records,
                             commitments, openings, _derive(cfg.seed, 0x62, cfg.epoch),
                             cfg.alpha_ns)
        tr.no_skipping = honest_no_skipping_responses(tr, self.creds, self.params)
        return tr
