"""Prime-order groups behind a single small interface.

Three backends share the interface:

* ``Ed25519Group`` -- the prime-order subgroup of edwards25519 via libsodium.
  32-byte canonical point encodings, 32-byte scalars.  This is the real one.
* ``SchnorrGroup`` -- a quadratic-residue subgroup mod a safe prime with
  order around 2^31.  Tiny and exhaustively testable.
* ``LiteGroup`` -- an exponent-space stand-in: g^a is represented by ``a``
  itself, so multiplication is addition and exponentiation is a modular
  product.  Algebraically exact (every protocol identity holds), no security.
* ``MirrorGroup`` -- LiteGroup arithmetic, but every value that feeds a hash
  is the Ed25519 point B^a.  Hash outputs (lottery, routes, tags, proofs) are
  bit-identical to ``Ed25519Group`` at one fixed-base multiplication each.

Elements are opaque to callers: use ``mul``, ``exp``, ``encode`` and
``decode``.  Scalars are Python ints reduced mod ``order``.
"""

from __future__ import annotations

from functools import lru_cache

import gmpy2
import nacl.bindings as sodium

from .errors import MalformedEncoding

__all__ = [
    "Group",
    "Ed25519Group",
    "SchnorrGroup",
    "LiteGroup",
    "MirrorGroup",
    "ed25519",
    "tiny_group",
    "lite_group",
    "mirror_group",
    "inv_mod",
]


def inv_mod(a: int, p: int) -> int:
    """Modular inverse; gmpy2 is ~10x faster than pow(a, -1, p) at 256 bits."""
    return int(gmpy2.invert(a, p))


class Group:
    """Common interface.  Subclasses fill in the element-level methods."""

    name: str
    order: int
    element_size: int
    scalar_size: int
    generator: object
    identity: object

    def mul(self, a, b):
        raise NotImplementedError

    def exp(self, a, k: int):
        raise NotImplementedError

    def base_exp(self, k: int):
        return self.exp(self.generator, k)

    def inv(self, a):
        return self.exp(a, self.order - 1)

    def encode(self, a) -> bytes:
        raise NotImplementedError

    def decode(self, data: bytes, allow_identity: bool = False):
        raise NotImplementedError

    def hash_encode(self, a) -> bytes:
        """Bytes fed to hash functions.  Equal to ``encode`` except in mirrors."""
        return self.encode(a)

    def is_element(self, a) -> bool:
        try:
            self.decode(self.encode(a), allow_identity=True)
        except (MalformedEncoding, TypeError, ValueError, OverflowError):
            return False
        return True

    # scalar helpers
    def scalar(self, k: int) -> int:
        return k % self.order

    def encode_scalar(self, k: int) -> bytes:
        return (k % self.order).to_bytes(self.scalar_size, "big")

    def decode_scalar(self, data: bytes) -> int:
        if len(data) != self.scalar_size:
            raise MalformedEncoding("scalar has wrong length")
        k = int.from_bytes(data, "big")
        if k >= self.order:
            raise MalformedEncoding("scalar not reduced")
        return k

    def scalar_from_bytes(self, data: bytes) -> int:
        """Map uniform bytes to a nonzero scalar."""
        return int.from_bytes(data, "big") % (self.order - 1) + 1

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


ED25519_ORDER = 2**252 + 27742317777372353535851937790883648493
_ED_IDENTITY = bytes([1]) + bytes(31)


class Ed25519Group(Group):
    name = "ed25519"
    order = ED25519_ORDER
    element_size = 32
    scalar_size = 32
    identity = _ED_IDENTITY

    def __init__(self):
        self.generator = sodium.crypto_scalarmult_ed25519_base_noclamp(
            (1).to_bytes(32, "little")
        )

    def mul(self, a: bytes, b: bytes) -> bytes:
        return sodium.crypto_core_ed25519_add(a, b)

    def exp(self, a: bytes, k: int) -> bytes:
        k %= ED25519_ORDER
        if k == 0 or a == _ED_IDENTITY:
            return _ED_IDENTITY
        if a == self.generator:
            return sodium.crypto_scalarmult_ed25519_base_noclamp(k.to_bytes(32, "little"))
        return sodium.crypto_scalarmult_ed25519_noclamp(k.to_bytes(32, "little"), a)

    def base_exp(self, k: int) -> bytes:
        k %= ED25519_ORDER
        if k == 0:
            return _ED_IDENTITY
        return sodium.crypto_scalarmult_ed25519_base_noclamp(k.to_bytes(32, "little"))

    def inv(self, a: bytes) -> bytes:
        return sodium.crypto_core_ed25519_sub(_ED_IDENTITY, a)

    def encode(self, a: bytes) -> bytes:
        return bytes(a)

    def decode(self, data: bytes, allow_identity: bool = False) -> bytes:
        data = bytes(data)
        if len(data) != 32:
            raise MalformedEncoding("point has wrong length")
        if data == _ED_IDENTITY:
            if allow_identity:
                return data
            raise MalformedEncoding("identity element")
        # rejects non-canonical, small-order and off-subgroup points
        if not sodium.crypto_core_ed25519_is_valid_point(data):
            raise MalformedEncoding("not a prime-order subgroup point")
        return data


class SchnorrGroup(Group):
    """Order-p subgroup of Z_q^* with q = 2p + 1."""

    def __init__(self, q: int, generator: int = 4):
        p = (q - 1) // 2
        self.name = f"schnorr-{q.bit_length()}"
        self.modulus = q
        self.order = p
        self.generator = generator % q
        self.identity = 1
        self.element_size = (q.bit_length() + 7) // 8
        self.scalar_size = (p.bit_length() + 7) // 8
        if pow(self.generator, p, q) != 1 or self.generator in (0, 1):
            raise ValueError("generator does not have order p")

    def mul(self, a: int, b: int) -> int:
        return a * b % self.modulus

    def exp(self, a: int, k: int) -> int:
        return pow(a, k % self.order, self.modulus)

    def inv(self, a: int) -> int:
        return pow(a, -1, self.modulus)

    def encode(self, a: int) -> bytes:
        return a.to_bytes(self.element_size, "big")

    def decode(self, data: bytes, allow_identity: bool = False) -> int:
        if len(data) != self.element_size:
            raise MalformedEncoding("element has wrong length")
        a = int.from_bytes(data, "big")
        if not 0 < a < self.modulus or pow(a, self.order, self.modulus) != 1:
            raise MalformedEncoding("not a subgroup element")
        if a == 1 and not allow_identity:
            raise MalformedEncoding("identity element")
        return a


class LiteGroup(Group):
    """Exponent-space stand-in with the same order and sizes as Ed25519.

    An element is its own discrete log, so ``exp`` is one modular product.
    """

    name = "lite"
    order = ED25519_ORDER
    element_size = 32
    scalar_size = 32
    generator = 1
    identity = 0

    def mul(self, a: int, b: int) -> int:
        return (a + b) % ED25519_ORDER

    def exp(self, a: int, k: int) -> int:
        return a * k % ED25519_ORDER

    def base_exp(self, k: int) -> int:
        return k % ED25519_ORDER

    def inv(self, a: int) -> int:
        return -a % ED25519_ORDER

    def encode(self, a: int) -> bytes:
        return a.to_bytes(32, "big")

    hash_encode = encode

    def decode(self, data: bytes, allow_identity: bool = False) -> int:
        if len(data) != 32:
            raise MalformedEncoding("element has wrong length")
        a = int.from_bytes(data, "big")
        if a >= ED25519_ORDER:
            raise MalformedEncoding("element not reduced")
        if a == 0 and not allow_identity:
            raise MalformedEncoding("identity element")
        return a


@lru_cache(maxsize=1 << 14)
def _mirror_point(a: int) -> bytes:
    if a == 0:
        return _ED_IDENTITY
    return sodium.crypto_scalarmult_ed25519_base_noclamp(a.to_bytes(32, "little"))


class MirrorGroup(LiteGroup):
    """LiteGroup whose hash inputs are the matching Ed25519 points.

    The wire format stays the exponent, so encodings round-trip; only
    ``hash_encode`` pays for a fixed-base multiplication (cached for
    repeated values such as keys and the generator).
    """

    name = "mirror"

    def hash_encode(self, a: int) -> bytes:
        return _mirror_point(a)


# largest safe prime below 2^32; the subgroup order p = 2147483543 is a 31-bit prime
TINY_Q = 4294967087
TINY_P = (TINY_Q - 1) // 2


@lru_cache(maxsize=None)
def ed25519() -> Ed25519Group:
    return Ed25519Group()


@lru_cache(maxsize=None)
def tiny_group() -> SchnorrGroup:
    return SchnorrGroup(TINY_Q, 4)


@lru_cache(maxsize=None)
def lite_group() -> LiteGroup:
    return LiteGroup()


@lru_cache(maxsize=None)
def mirror_group() -> MirrorGroup:
    return MirrorGroup()


def by_name(name: str) -> Group:
    table = {"ed25519": ed25519, "real": ed25519, "lite": lite_group, "mirror": mirror_group,
             "tiny": tiny_group}
    try:
        return table[name]()
    except KeyError:
        raise ValueError(f"unknown group {name!r}") from None
