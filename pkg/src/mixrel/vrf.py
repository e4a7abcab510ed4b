"""Dodis-Yampolskiy style VRF and equality-of-discrete-log proofs.

For a counter ``ctr`` and label in {0, 1, 2} the VRF point is

    u = g^(1 / (sk + 2^ell * nonce + 4 * ctr + label)),   ell = ell_ctr + 2

and the output is ``r = H(vk, g, u)``.  Correctness of ``u`` is shown with an
EQDL proof that log_g(vk) = log_u(g * u^-m) where m = 2^ell*nonce + 4*ctr + label,
which is the same as u^(sk + m) = g.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import DenominatorZero, MalformedEncoding
from .group import Group, ed25519, inv_mod
from .hashing import DOM_EQDL_CHALLENGE, DOM_EQDL_NONCE, DOM_KEYGEN, DOM_VRF_OUT, K_BYTES

DEFAULT_ELL_CTR = 32


@dataclass(frozen=True)
class EqdlProof:
    c: int
    s: int


@dataclass(frozen=True)
class VrfKeyPair:
    sk: int
    vk: object
    group: Group

    def __repr__(self) -> str:  # keep sk out of logs
        return f"VrfKeyPair(vk={self.group.encode(self.vk).hex()[:16]}...)"


@dataclass(frozen=True)
class VrfOutput:
    r: bytes
    u: object
    proof: EqdlProof

    @property
    def value(self) -> int:
        return int.from_bytes(self.r, "big")


# -- EQDL ---------------------------------------------------------------------


def _challenge(group: Group, g, G, h, H, A, B) -> int:
    data = b"".join(group.hash_encode(e) for e in (g, G, h, H, A, B))
    d = hashlib.sha512(bytes([DOM_EQDL_CHALLENGE]) + data).digest()
    return int.from_bytes(d, "big") % group.order


def eqdl_prove(group: Group, x: int, g, G, h, H, rng=None) -> EqdlProof:
    """Prove log_g G = log_h H = x.

    With ``rng=None`` the commitment nonce is derived from x and the
    statement, which makes proofs (and hence VRF outputs) deterministic.
    """
    if rng is None:
        stmt = b"".join(group.hash_encode(e) for e in (g, G, h, H))
        seed = hashlib.sha512(bytes([DOM_EQDL_NONCE]) + group.encode_scalar(x) + stmt).digest()
    else:
        seed = rng.bytes(64) if hasattr(rng, "bytes") else rng.randbytes(64)
    t = group.scalar_from_bytes(seed)
    A = group.exp(g, t)
    B = group.exp(h, t)
    c = _challenge(group, g, G, h, H, A, B)
    return EqdlProof(c, (t + c * x) % group.order)


def eqdl_verify(group: Group, g, G, h, H, proof: EqdlProof) -> bool:
    try:
        p = group.order
        c, s = proof.c % p, proof.s % p
        if c != proof.c or s != proof.s:
            return False
        A = group.mul(group.exp(g, s), group.exp(G, p - c))
        B = group.mul(group.exp(h, s), group.exp(H, p - c))
        return _challenge(group, g, G, h, H, A, B) == c
    except Exception:
        return False


# -- VRF ----------------------------------------------------------------------


def vrf_keygen(seed: bytes, group: Group | None = None) -> VrfKeyPair:
    if not seed:
        raise ValueError("seed must be nonempty")
    group = group or ed25519()
    sk = group.scalar_from_bytes(hashlib.sha512(bytes([DOM_KEYGEN]) + seed).digest())
    return VrfKeyPair(sk, group.base_exp(sk), group)


def vrf_offset(nonce: int, ctr: int, label: int, ell_ctr: int = DEFAULT_ELL_CTR) -> int:
    """m = 2^ell * nonce + 4 * ctr + label, with range checks."""
    if not 0 <= label <= 2:
        raise ValueError("label must be 0, 1 or 2")
    if not 0 <= ctr < (1 << ell_ctr):
        raise ValueError("counter out of range")
    if nonce < 0:
        raise ValueError("nonce must be nonnegative")
    return (nonce << (ell_ctr + 2)) + 4 * ctr + label


def _vrf_hash(group: Group, vk, u) -> bytes:
    data = group.hash_encode(vk) + group.hash_encode(group.generator) + group.hash_encode(u)
    return hashlib.sha256(bytes([DOM_VRF_OUT]) + data).digest()


def vrf_point(kp: VrfKeyPair, nonce: int, ctr: int, label: int, ell_ctr: int = DEFAULT_ELL_CTR):
    group = kp.group
    denom = (kp.sk + vrf_offset(nonce, ctr, label, ell_ctr)) % group.order
    if denom == 0:
        raise DenominatorZero("sk + offset is zero mod p")
    return group.base_exp(inv_mod(denom, group.order))


def vrf_value(kp: VrfKeyPair, nonce: int, ctr: int, label: int,
              ell_ctr: int = DEFAULT_ELL_CTR) -> bytes:
    """The output r alone, without building a proof."""
    u = vrf_point(kp, nonce, ctr, label, ell_ctr)
    return _vrf_hash(kp.group, kp.vk, u)


def vrf_eval(kp: VrfKeyPair, nonce: int, ctr: int, label: int,
             ell_ctr: int = DEFAULT_ELL_CTR) -> VrfOutput:
    group = kp.group
    m = vrf_offset(nonce, ctr, label, ell_ctr)
    u = vrf_point(kp, nonce, ctr, label, ell_ctr)
    g = group.generator
    H = group.mul(g, group.exp(u, group.order - m % group.order))
    proof = eqdl_prove(group, kp.sk, g, kp.vk, u, H)
    return VrfOutput(_vrf_hash(group, kp.vk, u), u, proof)


def vrf_verify(vk, nonce: int, ctr: int, label: int, out: VrfOutput,
               group: Group | None = None, ell_ctr: int = DEFAULT_ELL_CTR) -> bool:
    group = group or ed25519()
    try:
        m = vrf_offset(nonce, ctr, label, ell_ctr)
        u = group.decode(group.encode(out.u))
        vk = group.decode(group.encode(vk))
    except (MalformedEncoding, ValueError, TypeError, OverflowError):
        return False
    if out.r != _vrf_hash(group, vk, u):
        return False
    g = group.generator
    H = group.mul(g, group.exp(u, group.order - m % group.order))
    return eqdl_verify(group, g, vk, u, H, out.proof)


# -- encodings ----------------------------------------------------------------


def vrf_output_size(group: Group) -> int:
    return K_BYTES + group.element_size + 2 * group.scalar_size


def encode_vrf_output(group: Group, out: VrfOutput) -> bytes:
    """r || u || c || s, all fixed width."""
    return (out.r + group.encode(out.u) + group.encode_scalar(out.proof.c)
            + group.encode_scalar(out.proof.s))


def decode_vrf_output(group: Group, data: bytes) -> VrfOutput:
    if len(data) != vrf_output_size(group):
        raise MalformedEncoding("VRF output has wrong length")
    e, sc = group.element_size, group.scalar_size
    r = bytes(data[:K_BYTES])
    u = group.decode(data[K_BYTES:K_BYTES + e])
    off = K_BYTES + e
    c = group.decode_scalar(data[off:off + sc])
    s = group.decode_scalar(data[off + sc:off + 2 * sc])
    return VrfOutput(r, u, EqdlProof(c, s))
