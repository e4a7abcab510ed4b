"""VRF-routed packets: encoding, per-hop processing, openings.

Packet creation (gateway + client side) for credential c and counter ctr:

    r_pkt, r_type, r_exit = VRF(ctr, pkt|type|exit)
    measurement  <=>  int(r_type) < T
    alpha_0 = g^(r_pkt * x)                 x = 1 for measurements
    s_i     = y_i^(r_pkt * x * b_0 ... b_{i-1})
    r_i = H(next, s_i)   rt_i = H(rnd, s_i)   b_i = H(bli, s_i)   t_i = H(tag, s_i)
    n_{i+1} = Routing(n_i, r_i)             for i < nu - 1

The exit gateway n_nu is picked by the client for data packets and is
Routing(n_{nu-1}, r_{nu-1} xor r_exit) for measurements.  A hop holding x_i
recomputes s_i = alpha_i^x_i and alpha_{i+1} = alpha_i^b_i.

Wire format of a packet in flight (constant size across hops)::

    alpha (group element) || gamma (16) || beta (R * 18) || delta (1024)

beta is a Sphinx-style header of R slots, each slot holding the 2-byte id
of the next hop and the 16-byte MAC gamma for that hop.  gamma authenticates
beta || delta, so a flipped bit anywhere in the onion fails the integrity
check.  delta is the payload, peeled with one keystream per hop.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil, log

from .errors import (CounterReused, IntegrityFailed, IsAMeasurement, MalformedEncoding,
                     NotAMeasurement, PayloadTooLarge, ProofInvalid, ReplayDetected)
from .group import Group
from .hashing import K_BITS, HashLabel, xor_bytes
from .topology import Topology, routing
from .vrf import (DEFAULT_ELL_CTR, VrfKeyPair, VrfOutput, decode_vrf_output, encode_vrf_output,
                  vrf_eval, vrf_output_size, vrf_value, vrf_verify)

MAX_HOPS = 7          # processing hops the header can carry (nu <= 6)
SLOT = 18             # 2-byte next hop id + 16-byte MAC
MAC_LEN = 16
BETA_LEN = MAX_HOPS * SLOT
PAYLOAD_LEN = 1024
MAX_MESSAGE = PAYLOAD_LEN - 2
TERMINAL = 0xFFFF

_PKT, _TYPE, _EXIT = 0, 1, 2
_NEXT, _RND, _BLI, _TAG = (bytes([HashLabel.NEXT]), bytes([HashLabel.RND]),
                           bytes([HashLabel.BLI]), bytes([HashLabel.TAG]))


@dataclass(frozen=True)
class PacketParams:
    p_lot: float
    nonce: int
    L: int = 3
    ell_ctr: int = DEFAULT_ELL_CTR
    k: int = K_BITS

    def __post_init__(self):
        if not 0 < float(self.p_lot) < 1:
            raise ValueError("p_lot must lie in (0, 1)")
        if self.L + 2 > MAX_HOPS:
            raise ValueError(f"at most {MAX_HOPS - 2} mix layers fit in the header")
        frac = self.p_lot if isinstance(self.p_lot, Fraction) else Fraction(str(self.p_lot))
        object.__setattr__(self, "T", (frac.numerator << self.k) // frac.denominator)

    @property
    def nu(self) -> int:
        return self.L + 1

    def is_measurement(self, r_type: bytes) -> bool:
        return int.from_bytes(r_type, "big") < self.T


# -- per-hop derivations ------------------------------------------------------


def hop_material(group: Group, s) -> tuple[bytes, int, bytes, bytes]:
    """(r_next, b, rt, tag) derived from the shared secret s."""
    enc = group.hash_encode(s)
    sha = hashlib.sha256
    r_next = sha(_NEXT + enc).digest()
    b = int.from_bytes(sha(_BLI + enc).digest(), "big") % (group.order - 1) + 1
    return r_next, b, sha(_RND + enc).digest(), sha(_TAG + enc).digest()


def packet_scalar(group: Group, r_pkt: bytes) -> int:
    return group.scalar_from_bytes(r_pkt)


@dataclass
class Chain:
    """Encoder-side view of every hop."""

    nodes: list
    tags: list
    rnd: list
    exps: list  # e_i with alpha_i = g^e_i


def derive_walk(topo: Topology, e0: int, start: int, length: int,
                exit_gateway: int | None = None, r_exit: bytes | None = None,
                with_keys: bool = False) -> Chain:
    """Walk ``length`` hops from ``start`` with alpha = g^e0 at the first one.

    Every next hop follows the routing policy except the last, which is
    steered by ``r_exit`` (measurements) or fixed to ``exit_gateway``.
    """
    group, ys, order = topo.group, topo.public_keys, topo.group.order
    sha, henc, gexp = hashlib.sha256, group.hash_encode, group.exp
    nodes, tags, rnds, exps = [start], [], [], []
    e = e0 % order
    for i in range(length):
        n = nodes[i]
        # hop_material, inlined: this loop dominates simulation time
        enc = henc(gexp(ys[n], e))
        r_next = sha(_NEXT + enc).digest()
        b = int.from_bytes(sha(_BLI + enc).digest(), "big") % (order - 1) + 1
        tags.append(sha(_TAG + enc).digest())
        if with_keys:
            rnds.append(sha(_RND + enc).digest())
            exps.append(e)
        if i < length - 2:
            nodes.append(routing(topo, n, r_next))
        elif i == length - 2:
            if r_exit is not None:
                nodes.append(routing(topo, n, xor_bytes(r_next, r_exit)))
            elif exit_gateway is not None:
                nodes.append(exit_gateway)
            else:
                nodes.append(routing(topo, n, r_next))
        e = e * b % order
    return Chain(nodes, tags, rnds, exps)


def derive_chain(topo: Topology, params: PacketParams, e0: int, entry: int,
                 exit_gateway: int | None = None, r_exit: bytes | None = None,
                 with_keys: bool = False) -> Chain:
    """Walk hops 0..nu from alpha_0 = g^e0 using the nodes' public keys."""
    return derive_walk(topo, e0, entry, params.nu + 1, exit_gateway, r_exit, with_keys)


# -- onion --------------------------------------------------------------------


def _streams(rt: bytes) -> tuple[bytes, bytes, bytes]:
    hdr = hashlib.shake_256(b"hdr" + rt).digest(BETA_LEN + SLOT)
    pay = hashlib.shake_256(b"pay" + rt).digest(PAYLOAD_LEN)
    mac_key = hashlib.sha256(b"mac" + rt).digest()
    return hdr, pay, mac_key


def _mac(key: bytes, beta: bytes, delta: bytes) -> bytes:
    return hashlib.blake2b(beta + delta, key=key, digest_size=MAC_LEN).digest()


@dataclass(frozen=True)
class OnionPacket:
    alpha: object
    gamma: bytes
    beta: bytes
    delta: bytes

    def to_bytes(self, group: Group) -> bytes:
        return group.encode(self.alpha) + self.gamma + self.beta + self.delta

    @classmethod
    def from_bytes(cls, group: Group, data: bytes) -> "OnionPacket":
        e = group.element_size
        if len(data) != e + MAC_LEN + BETA_LEN + PAYLOAD_LEN:
            raise MalformedEncoding("packet has wrong length")
        alpha = group.decode(data[:e])
        o = e + MAC_LEN
        return cls(alpha, bytes(data[e:o]), bytes(data[o:o + BETA_LEN]), bytes(data[o + BETA_LEN:]))


def wire_size(group: Group) -> int:
    return group.element_size + MAC_LEN + BETA_LEN + PAYLOAD_LEN


def pad_payload(message: bytes) -> bytes:
    if len(message) > MAX_MESSAGE:
        raise PayloadTooLarge(f"{len(message)} > {MAX_MESSAGE} bytes")
    return struct.pack(">H", len(message)) + message + bytes(MAX_MESSAGE - len(message))


def unpad_payload(delta: bytes) -> bytes:
    (n,) = struct.unpack(">H", delta[:2])
    if n > MAX_MESSAGE:
        raise MalformedEncoding("bad payload length")
    return delta[2:2 + n]


def build_onion(group: Group, chain: Chain, message: bytes) -> OnionPacket:
    n = len(chain.nodes)
    if n > MAX_HOPS:
        raise ValueError("route longer than the header")
    keys = [_streams(rt) for rt in chain.rnd]
    # filler: what the header tail looks like after i hops of shifting
    filler = b""
    for i in range(1, n):
        hdr = keys[i - 1][0]
        filler = xor_bytes(filler + bytes(SLOT), hdr[(MAX_HOPS - i + 1) * SLOT:(MAX_HOPS + 1) * SLOT])
    # payloads, innermost first
    deltas = [b""] * (n + 1)
    deltas[n] = pad_payload(message)
    for i in range(n - 1, -1, -1):
        deltas[i] = xor_bytes(deltas[i + 1], keys[i][1])
    # header, innermost first
    last = n - 1
    head_len = (MAX_HOPS - last) * SLOT
    plain = struct.pack(">H", TERMINAL) + bytes(head_len - 2)
    beta = xor_bytes(plain, keys[last][0][:head_len]) + filler
    gamma = _mac(keys[last][2], beta, deltas[last])
    for i in range(last - 1, -1, -1):
        plain = struct.pack(">H", chain.nodes[i + 1]) + gamma + beta[:BETA_LEN - SLOT]
        beta = xor_bytes(plain, keys[i][0][:BETA_LEN])
        gamma = _mac(keys[i][2], beta, deltas[i])
    return OnionPacket(group.base_exp(chain.exps[0]), gamma, beta, deltas[0])


# -- creator side -------------------------------------------------------------


class Credential:
    """A spent credential as seen by its gateway.

    Holds the per-credential VRF key the gateway registered and the client's
    randomization scalar x (alpha = g^x).  Counters are single use.
    """

    def __init__(self, cred_id: int, gateway: int, vrf: VrfKeyPair, client_x: int,
                 allowance: int | None = None):
        self.cred_id = cred_id
        self.gateway = gateway
        self.vrf = vrf
        self.client_x = client_x
        self.allowance = allowance
        self.used: set[int] = set()

    @property
    def group(self) -> Group:
        return self.vrf.group

    def claim(self, ctr: int) -> None:
        if ctr in self.used:
            raise CounterReused(f"counter {ctr} already used by credential {self.cred_id}")
        if self.allowance is not None and not 0 <= ctr < self.allowance:
            raise CounterReused(f"counter {ctr} outside the allowance")
        self.used.add(ctr)

    @property
    def count(self) -> int:
        return len(self.used)


@dataclass
class EncodedPacket:
    alpha_0: object
    onion: OnionPacket | None
    is_measurement: bool
    ctr: int
    route: list
    tags: list = field(default_factory=list, repr=False)
    cred_id: int = -1


@dataclass(frozen=True)
class PacketDraw:
    """Lottery and route of one counter, without the onion."""

    is_measurement: bool
    e0: int
    nodes: list
    tags: list


def draw_packet(cred: Credential, topo: Topology, params: PacketParams, ctr: int,
                exit_gateway: int | None = None) -> PacketDraw:
    """Lottery, alpha exponent, route and tags of a counter.  No onion."""
    vk = cred.vrf
    r_type = vrf_value(vk, params.nonce, ctr, _TYPE, params.ell_ctr)
    r_pkt = vrf_value(vk, params.nonce, ctr, _PKT, params.ell_ctr)
    meas = params.is_measurement(r_type)
    group = topo.group
    e0 = packet_scalar(group, r_pkt)
    if meas:
        r_exit = vrf_value(vk, params.nonce, ctr, _EXIT, params.ell_ctr)
        chain = derive_chain(topo, params, e0, cred.gateway, r_exit=r_exit)
    else:
        e0 = e0 * cred.client_x % group.order
        chain = derive_chain(topo, params, e0, cred.gateway, exit_gateway=exit_gateway)
    return PacketDraw(meas, e0, chain.nodes, chain.tags)


def encode_packet(cred: Credential, topo: Topology, params: PacketParams, ctr: int,
                  payload: bytes = b"", exit_gateway: int | None = None) -> EncodedPacket:
    """Build a full onion packet for counter ``ctr`` of ``cred``."""
    if len(payload) > MAX_MESSAGE:
        raise PayloadTooLarge(f"{len(payload)} > {MAX_MESSAGE} bytes")
    cred.claim(ctr)
    vk = cred.vrf
    r_type = vrf_value(vk, params.nonce, ctr, _TYPE, params.ell_ctr)
    r_pkt = vrf_value(vk, params.nonce, ctr, _PKT, params.ell_ctr)
    group = topo.group
    e0 = packet_scalar(group, r_pkt)
    if params.is_measurement(r_type):
        r_exit = vrf_value(vk, params.nonce, ctr, _EXIT, params.ell_ctr)
        chain = derive_chain(topo, params, e0, cred.gateway, r_exit=r_exit, with_keys=True)
        onion = build_onion(group, chain, b"")
        return EncodedPacket(onion.alpha, onion, True, ctr, chain.nodes, chain.tags, cred.cred_id)
    e0 = e0 * cred.client_x % group.order
    chain = derive_chain(topo, params, e0, cred.gateway, exit_gateway=exit_gateway, with_keys=True)
    onion = build_onion(group, chain, payload)
    return EncodedPacket(onion.alpha, onion, False, ctr, chain.nodes, chain.tags, cred.cred_id)


def lottery(cred: Credential, params: PacketParams, ctr: int) -> bool:
    """True when counter ``ctr`` of ``cred`` is a measurement packet."""
    return params.is_measurement(vrf_value(cred.vrf, params.nonce, ctr, _TYPE, params.ell_ctr))


def expected_alpha(cred: Credential, params: PacketParams, ctr: int):
    """What the entry gateway expects alpha_0 to be for this counter."""
    group = cred.group
    vk = cred.vrf
    e0 = packet_scalar(group, vrf_value(vk, params.nonce, ctr, _PKT, params.ell_ctr))
    if not lottery(cred, params, ctr):
        e0 = e0 * cred.client_x % group.order
    return group.base_exp(e0)


# -- hop side -----------------------------------------------------------------


@dataclass
class HopResult:
    tag: bytes
    integrity_flag: bool
    next_hop: int | None
    next_packet: OnionPacket | None
    payload: bytes | None = None


def process_packet(node_secret: int, node: int, pkt: OnionPacket, topo: Topology,
                   expected_alpha0=None) -> HopResult:
    """One hop of processing.  The same code runs for every packet type.

    ``expected_alpha0`` is supplied by the entry gateway only.  The returned
    flag is false when the MAC, the routing check, or the alpha check fails.
    """
    group = topo.group
    s = group.exp(pkt.alpha, node_secret)
    r_next, b, rt, tag = hop_material(group, s)
    hdr, pay, mac_key = _streams(rt)
    flag = _mac(mac_key, pkt.beta, pkt.delta) == pkt.gamma
    if expected_alpha0 is not None and group.encode(expected_alpha0) != group.encode(pkt.alpha):
        flag = False
    B = xor_bytes(pkt.beta + bytes(SLOT), hdr)
    (next_id,) = struct.unpack(">H", B[:2])
    delta = xor_bytes(pkt.delta, pay)
    if next_id == TERMINAL:
        if not topo.is_gateway(node):
            flag = False
        payload = unpad_payload(delta) if flag else None
        return HopResult(tag, flag, None, None, payload)
    succ = topo.successors(node)
    if next_id not in succ:
        flag = False
    elif topo.layer_of(node) != topo.L and routing(topo, node, r_next) != next_id:
        # the last mix layer forwards to the chosen exit without this check
        flag = False
    nxt = OnionPacket(group.exp(pkt.alpha, b), B[2:SLOT], B[SLOT:], delta)
    return HopResult(tag, flag, next_id, nxt)


class NodeProcessor:
    """Stateful wrapper: replay store plus the epoch's tag commitment."""

    def __init__(self, topo: Topology, node: int, commitment=None):
        self.topo = topo
        self.node = node
        self.secret = topo.secret_keys[node]
        self.seen: set[bytes] = set()
        self.commitment = commitment

    def receive(self, pkt: OnionPacket, expected_alpha0=None) -> HopResult:
        res = process_packet(self.secret, self.node, pkt, self.topo, expected_alpha0)
        if res.tag in self.seen:
            raise ReplayDetected(f"tag replayed at node {self.node}")
        self.seen.add(res.tag)
        if self.commitment is not None:
            self.commitment.insert(res.tag, res.integrity_flag)
        if not res.integrity_flag:
            raise IntegrityFailed(res.tag)
        return res


# -- openings -----------------------------------------------------------------

_OPEN_HEAD = struct.Struct(">HII")  # gateway, credential, ctr


@dataclass(frozen=True)
class MeasurementOpening:
    gateway: int
    cred_id: int
    ctr: int
    pkt: VrfOutput
    type: VrfOutput
    exit: VrfOutput

    def to_bytes(self, group: Group) -> bytes:
        return (_OPEN_HEAD.pack(self.gateway, self.cred_id, self.ctr)
                + encode_vrf_output(group, self.pkt) + encode_vrf_output(group, self.type)
                + encode_vrf_output(group, self.exit))

    @classmethod
    def from_bytes(cls, group: Group, data: bytes) -> "MeasurementOpening":
        w = vrf_output_size(group)
        if len(data) != _OPEN_HEAD.size + 3 * w:
            raise MalformedEncoding("opening has wrong length")
        gw, cid, ctr = _OPEN_HEAD.unpack_from(data)
        o = _OPEN_HEAD.size
        outs = [decode_vrf_output(group, data[o + i * w:o + (i + 1) * w]) for i in range(3)]
        return cls(gw, cid, ctr, *outs)


def opening_size(group: Group) -> int:
    return _OPEN_HEAD.size + 3 * vrf_output_size(group)


@dataclass(frozen=True)
class ReconstructedPath:
    nodes: list
    tags: list


def open_measurement(cred: Credential, params: PacketParams, ctr: int) -> MeasurementOpening:
    kp, n, ell = cred.vrf, params.nonce, params.ell_ctr
    out_type = vrf_eval(kp, n, ctr, _TYPE, ell)
    if not params.is_measurement(out_type.r):
        raise NotAMeasurement(f"counter {ctr} is not a measurement")
    return MeasurementOpening(cred.gateway, cred.cred_id, ctr, vrf_eval(kp, n, ctr, _PKT, ell),
                              out_type, vrf_eval(kp, n, ctr, _EXIT, ell))


def verify_opening(opening: MeasurementOpening, vk, params: PacketParams,
                   topo: Topology) -> ReconstructedPath:
    """Check the three proofs and the lottery, then rebuild route and tags."""
    group = topo.group
    n, c, ell = params.nonce, opening.ctr, params.ell_ctr
    for label, out in ((_PKT, opening.pkt), (_TYPE, opening.type), (_EXIT, opening.exit)):
        if not vrf_verify(vk, n, c, label, out, group, ell):
            raise ProofInvalid(f"VRF proof {label} fails for counter {c}")
    if not params.is_measurement(opening.type.r):
        raise NotAMeasurement(f"counter {c} is not a measurement")
    if not topo.is_gateway(opening.gateway):
        raise ProofInvalid("opening names a non-gateway entry")
    chain = derive_chain(topo, params, packet_scalar(group, opening.pkt.r), opening.gateway,
                         r_exit=opening.exit.r)
    return ReconstructedPath(chain.nodes, chain.tags)


@dataclass(frozen=True)
class NonMeasurementProof:
    gateway: int
    cred_id: int
    ctr: int
    type: VrfOutput

    def to_bytes(self, group: Group) -> bytes:
        return _OPEN_HEAD.pack(self.gateway, self.cred_id, self.ctr) + encode_vrf_output(group, self.type)

    @classmethod
    def from_bytes(cls, group: Group, data: bytes) -> "NonMeasurementProof":
        if len(data) != _OPEN_HEAD.size + vrf_output_size(group):
            raise MalformedEncoding("no-skipping proof has wrong length")
        gw, cid, ctr = _OPEN_HEAD.unpack_from(data)
        return cls(gw, cid, ctr, decode_vrf_output(group, data[_OPEN_HEAD.size:]))


def no_skipping_size(group: Group) -> int:
    return _OPEN_HEAD.size + vrf_output_size(group)


def no_skipping_open(cred: Credential, params: PacketParams, ctr: int) -> NonMeasurementProof:
    out = vrf_eval(cred.vrf, params.nonce, ctr, _TYPE, params.ell_ctr)
    if params.is_measurement(out.r):
        raise IsAMeasurement(f"counter {ctr} is a measurement")
    return NonMeasurementProof(cred.gateway, cred.cred_id, ctr, out)


def verify_non_measurement(proof: NonMeasurementProof, vk, params: PacketParams,
                           group: Group) -> bool:
    if not vrf_verify(vk, params.nonce, proof.ctr, _TYPE, proof.type, group, params.ell_ctr):
        return False
    return not params.is_measurement(proof.type.r)


def no_skipping_sample_count(N: int, alpha_ns: float) -> int:
    """Positions to challenge so one hidden measurement is caught w.p. alpha_ns."""
    if not 0 < alpha_ns < 1:
        raise ValueError("alpha_ns must lie in (0, 1)")
    return max(0, ceil(-N * log(1 - alpha_ns)))
