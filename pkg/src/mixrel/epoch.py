"""Post-epoch stages: broadcast, verification, path reconstruction, tallying.

After an epoch every gateway announces how many packets each credential
sent, every node publishes its tag commitment, and the gateways open all
their measurement packets.  Anyone can then rebuild each measurement's path
and tags and check which nodes recorded it:

* tag present at n_i and n_{i+1}      -> s* on (n_i, n_{i+1})
* present at n_i, absent at n_{i+1}   -> d* on (n_i, n_{i+1})
* any tag stored with flag=false, or a tag present downstream of an absent
  one (a hole) -> the measurement is discarded entirely.

Clients appear as the pseudo node ``CLIENT``: the client->gateway leg and the
exit gateway->client leg are lossless, so every opened measurement adds s*
on (CLIENT, g_entry) and every delivered one adds s* on (g_exit, CLIENT).
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import stats

from .commitment import deserialize
from .errors import CommitmentMissing, MalformedEncoding, NotAMeasurement, ProofInvalid
from .group import Group, by_name
from .hashing import DOM_BEACON
from .packet import (MeasurementOpening, NonMeasurementProof, PacketParams,
                     no_skipping_sample_count, verify_non_measurement, verify_opening)
from .topology import Topology

CLIENT = -1


class Verdict(str, Enum):
    HONEST = "HONEST"
    CHEATING = "CHEATING"


@dataclass
class CredentialRecord:
    cred_id: int
    gateway: int
    vk: object
    count: int  # s_(c,g) as announced


@dataclass
class EpochTranscript:
    epoch: int
    nonce: int
    p_lot: float
    L: int
    group: Group
    credentials: dict = field(default_factory=dict)     # cred_id -> CredentialRecord
    commitments: dict = field(default_factory=dict)     # node -> commitment object
    openings: list = field(default_factory=list)        # MeasurementOpening
    beacon_seed: bytes = b""
    alpha_ns: float = 0.01
    no_skipping: dict = field(default_factory=dict)     # gateway -> {(cred, ctr): proof}

    @property
    def params(self) -> PacketParams:
        return PacketParams(self.p_lot, self.nonce, self.L)

    def declared_total(self, gateway: int) -> int:
        return sum(c.count for c in self.credentials.values() if c.gateway == gateway)


class BulletinBoard:
    """Append-only ordered log standing in for the public broadcast channel."""

    def __init__(self):
        self.log: list[tuple[str, int, object]] = []

    def post(self, kind: str, author: int, item) -> None:
        self.log.append((kind, author, item))

    def items(self, kind: str):
        return [(a, it) for k, a, it in self.log if k == kind]


@dataclass
class LinkTally:
    s_star: int = 0
    d_star: int = 0
    discarded: int = 0
    t_total: int = 0

    @property
    def samples(self) -> int:
        return self.s_star + self.d_star


@dataclass
class EpochTally:
    links: dict = field(default_factory=lambda: defaultdict(LinkTally))
    # s~*_(g,i,j): measurements from g that reached i with j as next hop
    triples: Counter = field(default_factory=Counter)
    opened: Counter = field(default_factory=Counter)     # per credential
    used: int = 0
    discarded: int = 0
    invalid: int = 0
    excluded_gateways: frozenset = frozenset()

    def link(self, i: int, j: int) -> LinkTally:
        return self.links[(i, j)]

    def s_star(self, i: int, j: int) -> int:
        t = self.links.get((i, j))
        return t.s_star if t else 0

    def d_star(self, i: int, j: int) -> int:
        t = self.links.get((i, j))
        return t.d_star if t else 0


def _lookup_all(commitments: dict, queries: dict) -> dict:
    """Answer every (node, tag) query, batched per node."""
    out = {}
    for node, tags in queries.items():
        c = commitments.get(node)
        if c is None:
            answers = [None] * len(tags)
        elif hasattr(c, "lookup_many"):
            answers = c.lookup_many(tags)
        else:
            answers = [c.lookup(t) for t in tags]
        for t, a in zip(tags, answers):
            out[(node, t)] = a
    return out


def run_post_epoch(transcript: EpochTranscript, topo: Topology, params: PacketParams | None = None,
                   t_observed: dict | None = None, exclude=(), strict: bool = False) -> EpochTally:
    """Verify every opening and tally s*/d* per link.

    ``t_observed`` holds receiver-local packet counts per edge; it is copied
    into ``LinkTally.t_total`` and otherwise unused.  A node without a
    commitment is treated as having recorded nothing (or raises
    ``CommitmentMissing`` when ``strict``).  Openings from gateways in
    ``exclude`` are ignored.
    """
    params = params or transcript.params
    nu = params.nu
    tally = EpochTally(excluded_gateways=frozenset(exclude))
    if strict:
        for n in range(topo.n_nodes):
            if transcript.commitments.get(n) is None:
                raise CommitmentMissing(f"node {n} published no commitment")
    links = tally.links
    seen = set()
    paths = []
    queries = defaultdict(list)
    for op in transcript.openings:
        if op.gateway in tally.excluded_gateways:
            continue
        key = (op.cred_id, op.ctr)
        if key in seen:
            continue
        seen.add(key)
        rec = transcript.credentials.get(op.cred_id)
        if rec is None or rec.gateway != op.gateway or op.ctr >= rec.count:
            tally.invalid += 1
            continue
        try:
            path = verify_opening(op, rec.vk, params, topo)
        except (ProofInvalid, NotAMeasurement, MalformedEncoding):
            tally.invalid += 1
            continue
        tally.opened[op.cred_id] += 1
        paths.append(path)
        for n, t in zip(path.nodes, path.tags):
            queries[n].append(t)
    answers = _lookup_all(transcript.commitments, queries)
    for path in paths:
        nodes = path.nodes
        flags = [answers[(n, t)] for n, t in zip(nodes, path.tags)]
        present = [f is not None for f in flags]
        k = present.index(False) if False in present else nu + 1
        if any(f is False for f in flags) or any(present[k:]):
            tally.discarded += 1
            for i in range(nu):
                links[(nodes[i], nodes[i + 1])].discarded += 1
            continue
        tally.used += 1
        links[(CLIENT, nodes[0])].s_star += 1
        for i in range(k - 1):
            links[(nodes[i], nodes[i + 1])].s_star += 1
        if k == 0:
            # the entry gateway does not hold its own packet
            links[(nodes[0], nodes[1])].d_star += 1
        elif k <= nu:
            links[(nodes[k - 1], nodes[k])].d_star += 1
        else:
            links[(nodes[nu], CLIENT)].s_star += 1
        for i in range(1, min(k, nu)):
            tally.triples[(nodes[i - 1], nodes[i], nodes[i + 1])] += 1
    if t_observed:
        for e, t in t_observed.items():
            links[e].t_total = t
    return tally


def check_flow_conservation(tally: EpochTally, topo: Topology) -> dict:
    """Per mix node: (sum of in s*, sum of out s* + d*).  Equal on honest runs."""
    into, out = Counter(), Counter()
    for (i, j), t in tally.links.items():
        into[j] += t.s_star
        out[i] += t.s_star + t.d_star
    return {n: (into[n], out[n]) for n in topo.mix_nodes}


# -- no-skipping --------------------------------------------------------------


def _claimed_positions(transcript: EpochTranscript, gateway: int):
    """Per credential of ``gateway``: (cred_id, count, opened counters)."""
    opened = defaultdict(set)
    for op in transcript.openings:
        if op.gateway == gateway:
            opened[op.cred_id].add(op.ctr)
    out = []
    for cid in sorted(transcript.credentials):
        rec = transcript.credentials[cid]
        if rec.gateway == gateway:
            out.append((cid, rec.count, opened.get(cid, set())))
    return out


def beacon_rng(seed: bytes, gateway: int) -> np.random.Generator:
    d = hashlib.sha256(bytes([DOM_BEACON]) + seed + gateway.to_bytes(4, "big")).digest()
    return np.random.default_rng(int.from_bytes(d, "big"))


def no_skipping_challenges(transcript: EpochTranscript, gateway: int,
                           alpha_ns: float | None = None, v: int | None = None) -> list:
    """Challenge positions (cred_id, ctr) drawn from the public beacon.

    Positions are drawn with replacement from the claimed non-measurement
    counters, so a single hidden measurement among N is found with
    probability 1 - (1 - 1/N)^v ~ 1 - exp(-v/N).
    """
    alpha_ns = transcript.alpha_ns if alpha_ns is None else alpha_ns
    creds = _claimed_positions(transcript, gateway)
    cum, ranges = [], []
    total = 0
    for cid, count, opened in creds:
        free = count - len([c for c in opened if c < count])
        if free <= 0:
            continue
        total += free
        cum.append(total)
        ranges.append((cid, count, sorted(opened)))
    if total == 0:
        return []
    if v is None:
        v = no_skipping_sample_count(total, alpha_ns)
    if v == 0:
        return []
    draws = beacon_rng(transcript.beacon_seed, gateway).integers(0, total, size=v)
    idx = np.searchsorted(np.asarray(cum), draws, side="right")
    out = []
    for d, i in zip(draws.tolist(), idx.tolist()):
        cid, count, opened = ranges[i]
        pos = d - (cum[i - 1] if i else 0)
        # pos-th counter of [0, count) not in the opened set
        ctr = pos
        for o in opened:
            if o <= ctr:
                ctr += 1
            else:
                break
        out.append((cid, ctr))
    return out


def check_no_skipping(transcript: EpochTranscript, params: PacketParams | None = None,
                      beacon: bytes | None = None, responder=None, alpha_ns: float | None = None,
                      v: int | None = None) -> dict:
    """Per-gateway verdict on the no-skipping challenge.

    ``responder(gateway, positions)`` returns proofs keyed by (cred, ctr);
    by default the responses recorded in the transcript are used.
    """
    params = params or transcript.params
    if beacon is not None:
        transcript.beacon_seed = beacon
    verdicts = {}
    gateways = sorted({c.gateway for c in transcript.credentials.values()})
    for g in gateways:
        positions = no_skipping_challenges(transcript, g, alpha_ns, v)
        if responder is not None:
            answers = responder(g, positions)
        else:
            answers = transcript.no_skipping.get(g, {})
        ok = True
        cache = {}
        for cid, ctr in positions:
            if (cid, ctr) in cache:
                continue
            proof = answers.get((cid, ctr)) if answers else None
            rec = transcript.credentials[cid]
            good = (proof is not None and proof.cred_id == cid and proof.ctr == ctr
                    and proof.gateway == g
                    and verify_non_measurement(proof, rec.vk, params, transcript.group))
            cache[(cid, ctr)] = good
            if not good:
                ok = False
                break
        verdicts[g] = Verdict.HONEST if ok else Verdict.CHEATING
    return verdicts


def honest_no_skipping_responses(transcript: EpochTranscript, credentials: dict,
                                 params: PacketParams | None = None) -> dict:
    """What honest gateways answer to the beacon challenge."""
    from .packet import no_skipping_open

    params = params or transcript.params
    out = {}
    gateways = sorted({c.gateway for c in transcript.credentials.values()})
    for g in gateways:
        answers = {}
        for cid, ctr in no_skipping_challenges(transcript, g):
            if (cid, ctr) not in answers:
                answers[(cid, ctr)] = no_skipping_open(credentials[cid], params, ctr)
        out[g] = answers
    return out


# -- announced totals ---------------------------------------------------------


def gateway_total_consistency(transcript: EpochTranscript, tally: EpochTally | None = None,
                              sigmas: float = 4.0) -> dict:
    """Flag gateways whose opened measurement counts do not fit the lottery.

    Per gateway the total number of openings must lie within ``sigmas``
    binomial standard deviations of S_g * p_lot.  Per credential an exact
    two-sided binomial test is run at the same overall level, split evenly
    across the gateway's credentials.  An opening outside the announced
    counter range is cheating outright.
    """
    p = float(transcript.p_lot)
    alpha = 2 * stats.norm.sf(sigmas)
    opened = Counter()
    out_of_range = set()
    for op in transcript.openings:
        rec = transcript.credentials.get(op.cred_id)
        if rec is None or op.ctr >= rec.count or rec.gateway != op.gateway:
            out_of_range.add(op.gateway)
            continue
        opened[op.cred_id] += 1
    if tally is not None:
        opened = Counter(tally.opened)
    by_gw = defaultdict(list)
    for cid, rec in transcript.credentials.items():
        by_gw[rec.gateway].append(rec)
    verdicts = {}
    for g, recs in sorted(by_gw.items()):
        S = sum(r.count for r in recs)
        got = sum(opened[r.cred_id] for r in recs)
        sd = (S * p * (1 - p)) ** 0.5
        bad = g in out_of_range or abs(got - S * p) > sigmas * max(sd, 1e-12) + 1e-9
        if not bad and S > 0:
            level = alpha / len(recs)
            for r in recs:
                k = opened[r.cred_id]
                lo = stats.binom.cdf(k, r.count, p)
                hi = stats.binom.sf(k - 1, r.count, p)
                if 2 * min(lo, hi) < level:
                    bad = True
                    break
        verdicts[g] = Verdict.CHEATING if bad else Verdict.HONEST
    return verdicts


# -- persistence --------------------------------------------------------------


def _write_records(path: Path, records) -> None:
    with open(path, "wb") as f:
        for rec in records:
            f.write(struct.pack(">I", len(rec)))
            f.write(rec)


def _read_records(path: Path):
    data = path.read_bytes()
    off, out = 0, []
    while off < len(data):
        if off + 4 > len(data):
            raise MalformedEncoding("truncated record length")
        (n,) = struct.unpack_from(">I", data, off)
        off += 4
        if off + n > len(data):
            raise MalformedEncoding("truncated record")
        out.append(data[off:off + n])
        off += n
    return out


def save_transcript(tr: EpochTranscript, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = tr.group
    index = {
        "schema": 1,
        "epoch": tr.epoch,
        "nonce": tr.nonce,
        "p_lot": tr.p_lot,
        "L": tr.L,
        "group": g.name if g.name in ("ed25519", "lite", "mirror") else "tiny",
        "beacon_seed": tr.beacon_seed.hex(),
        "alpha_ns": tr.alpha_ns,
        "credentials": [[r.cred_id, r.gateway, g.encode(r.vk).hex(), r.count]
                        for r in sorted(tr.credentials.values(), key=lambda r: r.cred_id)],
        "commitment_nodes": sorted(tr.commitments),
        "no_skipping_gateways": sorted(tr.no_skipping),
    }
    (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    _write_records(d / "commitments.bin",
                   [tr.commitments[n].to_bytes() for n in sorted(tr.commitments)])
    _write_records(d / "openings.bin", [op.to_bytes(g) for op in tr.openings])
    ns = []
    for gw in sorted(tr.no_skipping):
        for key in sorted(tr.no_skipping[gw]):
            ns.append(tr.no_skipping[gw][key].to_bytes(g))
    _write_records(d / "noskip.bin", ns)


def load_transcript(directory) -> EpochTranscript:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    g = by_name(index["group"])
    tr = EpochTranscript(index["epoch"], index["nonce"], index["p_lot"], index["L"], g,
                         beacon_seed=bytes.fromhex(index["beacon_seed"]),
                         alpha_ns=index["alpha_ns"])
    for cid, gw, vk, count in index["credentials"]:
        tr.credentials[cid] = CredentialRecord(cid, gw, g.decode(bytes.fromhex(vk)), count)
    blobs = _read_records(d / "commitments.bin")
    for n, blob in zip(index["commitment_nodes"], blobs):
        tr.commitments[n] = deserialize(blob)
    tr.openings = [MeasurementOpening.from_bytes(g, b) for b in _read_records(d / "openings.bin")]
    for blob in _read_records(d / "noskip.bin"):
        pr = NonMeasurementProof.from_bytes(g, blob)
        tr.no_skipping.setdefault(pr.gateway, {})[(pr.cred_id, pr.ctr)] = pr
    return tr


def write_link_tally_csv(path, tally: EpochTally, epoch: int = 0, mode: str = "w") -> None:
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["epoch", "src", "dst", "s_star", "d_star", "discarded", "t_total"])
        for (i, j) in sorted(tally.links):
            t = tally.links[(i, j)]
            w.writerow([epoch, i, j, t.s_star, t.d_star, t.discarded, t.t_total])
