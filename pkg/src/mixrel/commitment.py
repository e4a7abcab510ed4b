"""Per-epoch tag commitments: Bloom filter (default) and Merkle tree.

Both backends store (tag, integrity flag) pairs and answer ``lookup(tag)``
with ``None`` (absent), ``True`` or ``False``.

Bloom filters cannot hold values, so the Bloom backend keeps two filters:
one for tags processed with flag=true and a smaller one for flag=false.
A tag that hits the false filter reads as flag=false.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from math import ceil, exp, log

import numpy as np

from .errors import MalformedEncoding

BLOOM_TAG = 0x01
MERKLE_TAG = 0x02
LN2 = log(2)


def bloom_size(n_cap: int, fp: float) -> tuple[int, int]:
    """(m bits, h hashes) for capacity ``n_cap`` at false-positive rate ``fp``."""
    if not 0 < fp < 1 or n_cap <= 0:
        raise ValueError("need 0 < fp < 1 and n_cap > 0")
    m = ceil(-n_cap * log(fp) / LN2**2)
    h = max(1, round(m / n_cap * LN2))
    return m, h


class BloomBits:
    """A plain Bloom filter using double hashing over blake2b(tag)."""

    __slots__ = ("m", "h", "bits", "count")

    def __init__(self, m: int, h: int, bits: bytearray | None = None, count: int = 0):
        self.m, self.h = m, h
        self.bits = bits if bits is not None else bytearray((m + 7) // 8)
        self.count = count

    def _positions(self, tag: bytes):
        d = hashlib.blake2b(tag, digest_size=16).digest()
        m = self.m
        a = int.from_bytes(d[:8], "little") % m
        b = int.from_bytes(d[8:], "little") % m
        return [(a + i * b) % m for i in range(self.h)]

    def add(self, tag: bytes) -> None:
        bits = self.bits
        for p in self._positions(tag):
            bits[p >> 3] |= 1 << (p & 7)
        self.count += 1

    def __contains__(self, tag: bytes) -> bool:
        bits = self.bits
        for p in self._positions(tag):
            if not bits[p >> 3] >> (p & 7) & 1:
                return False
        return True

    def add_many(self, tags) -> None:
        """Vectorised insert; same bit positions as ``add``."""
        tags = list(tags)
        if not tags:
            return
        pos = self._position_matrix(tags)
        flat = np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8), bitorder="little")
        flat[pos.ravel()] = 1
        self.bits = bytearray(np.packbits(flat, bitorder="little").tobytes())
        self.count += len(tags)

    def _position_matrix(self, tags) -> np.ndarray:
        blake = hashlib.blake2b
        digests = b"".join(blake(t, digest_size=16).digest() for t in tags)
        ab = np.frombuffer(digests, dtype="<u8").reshape(-1, 2) % np.uint64(self.m)
        i = np.arange(self.h, dtype=np.uint64)
        return (ab[:, :1] + i[None, :] * ab[:, 1:2]) % np.uint64(self.m)

    def contains_many(self, tags) -> np.ndarray:
        """Vectorised membership; same answers as ``in``."""
        tags = list(tags)
        if not tags:
            return np.zeros(0, dtype=bool)
        pos = self._position_matrix(tags)
        bits = np.frombuffer(self.bits, dtype=np.uint8)
        hit = (bits[pos >> np.uint64(3)] >> (pos & np.uint64(7)).astype(np.uint8)) & 1
        return hit.all(axis=1)

    def fill_ratio(self) -> float:
        ones = int(np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8)).sum())
        return ones / self.m

    def estimated_fp(self) -> float:
        return (1 - exp(-self.h * self.count / self.m)) ** self.h

    _HEAD = struct.Struct(">QBQ")

    def to_bytes(self) -> bytes:
        return self._HEAD.pack(self.m, self.h, self.count) + bytes(self.bits)

    @classmethod
    def from_view(cls, data: memoryview, off: int) -> tuple["BloomBits", int]:
        if len(data) < off + cls._HEAD.size:
            raise MalformedEncoding("truncated Bloom header")
        m, h, count = cls._HEAD.unpack_from(data, off)
        off += cls._HEAD.size
        nbytes = (m + 7) // 8
        if m == 0 or h == 0 or len(data) < off + nbytes:
            raise MalformedEncoding("truncated Bloom bit array")
        return cls(m, h, bytearray(data[off:off + nbytes]), count), off + nbytes


class BloomCommitment:
    """Bloom-backed commitment to (tag, flag) pairs."""

    def __init__(self, n_cap: int, fp: float = 1e-5, false_cap: int | None = None):
        self.n_cap, self.fp = n_cap, fp
        self.true = BloomBits(*bloom_size(n_cap, fp))
        self.false_cap = false_cap if false_cap is not None else max(64, n_cap // 100)
        self.false = BloomBits(*bloom_size(self.false_cap, fp))

    @property
    def m(self) -> int:
        return self.true.m

    @property
    def h(self) -> int:
        return self.true.h

    def insert(self, tag: bytes, flag: bool = True) -> None:
        (self.true if flag else self.false).add(tag)

    def insert_many(self, tags, flag: bool = True) -> None:
        (self.true if flag else self.false).add_many(tags)

    def lookup(self, tag: bytes) -> bool | None:
        if tag in self.false:
            return False
        if tag in self.true:
            return True
        return None

    def lookup_many(self, tags) -> list:
        tags = list(tags)
        in_false = self.false.contains_many(tags)
        in_true = self.true.contains_many(tags)
        return [False if f else (True if t else None) for f, t in zip(in_false.tolist(), in_true.tolist())]

    def contains(self, tag: bytes) -> bool:
        return self.lookup(tag) is not None

    def __len__(self) -> int:
        return self.true.count + self.false.count

    @property
    def over_capacity(self) -> bool:
        return self.true.count > self.n_cap or self.false.count > self.false_cap

    def size_bytes(self) -> int:
        return len(self.true.bits) + len(self.false.bits)

    def to_bytes(self) -> bytes:
        return (bytes([BLOOM_TAG]) + struct.pack(">QdQ", self.n_cap, self.fp, self.false_cap)
                + self.true.to_bytes() + self.false.to_bytes())

    @classmethod
    def _from_view(cls, data: memoryview) -> "BloomCommitment":
        if len(data) < 25:
            raise MalformedEncoding("truncated Bloom commitment")
        n_cap, fp, false_cap = struct.unpack_from(">QdQ", data, 1)
        obj = cls.__new__(cls)
        obj.n_cap, obj.fp, obj.false_cap = n_cap, fp, false_cap
        obj.true, off = BloomBits.from_view(data, 25)
        obj.false, off = BloomBits.from_view(data, off)
        if off != len(data):
            raise MalformedEncoding("trailing bytes after Bloom commitment")
        return obj

    def __eq__(self, other) -> bool:
        return isinstance(other, BloomCommitment) and self.to_bytes() == other.to_bytes()


def bloom_new(n_cap: int, fp: float = 1e-5) -> BloomCommitment:
    return BloomCommitment(n_cap, fp)


# -- Merkle -------------------------------------------------------------------


def _leaf(tag: bytes, flag: bool) -> bytes:
    return hashlib.sha256(b"\x00" + tag + (b"\x01" if flag else b"\x00")).digest()


def _node(a: bytes, b: bytes) -> bytes:
    return hashlib.sha256(b"\x01" + a + b).digest()


EMPTY_ROOT = hashlib.sha256(b"\x02").digest()


@dataclass(frozen=True)
class MerkleProof:
    index: int
    flag: bool
    # (sibling hash, sibling is on the right)
    path: tuple


def _levels(leaves: list[bytes]) -> list[list[bytes]]:
    levels = [leaves]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        nxt = [_node(cur[i], cur[i + 1]) for i in range(0, len(cur) - 1, 2)]
        if len(cur) % 2:
            nxt.append(cur[-1])  # promote the unpaired node
        levels.append(nxt)
    return levels


class MerkleCommitment:
    """Merkle tree over leaves H(tag || flag) in insertion order."""

    def __init__(self):
        self.tags: list[bytes] = []
        self.flags: list[bool] = []
        self._index: dict[bytes, int] = {}
        self._levels: list | None = None

    def insert(self, tag: bytes, flag: bool = True) -> None:
        self._index.setdefault(tag, len(self.tags))
        self.tags.append(tag)
        self.flags.append(bool(flag))
        self._levels = None

    def insert_many(self, tags, flag: bool = True) -> None:
        for t in tags:
            self.insert(t, flag)

    def lookup(self, tag: bytes) -> bool | None:
        i = self._index.get(tag)
        return None if i is None else self.flags[i]

    def lookup_many(self, tags) -> list:
        return [self.lookup(t) for t in tags]

    def contains(self, tag: bytes) -> bool:
        return tag in self._index

    def __len__(self) -> int:
        return len(self.tags)

    def _tree(self) -> list:
        if self._levels is None:
            self._levels = _levels([_leaf(t, f) for t, f in zip(self.tags, self.flags)])
        return self._levels

    @property
    def root(self) -> bytes:
        if not self.tags:
            return EMPTY_ROOT
        return self._tree()[-1][0]

    def open(self, index: int) -> MerkleProof:
        if not 0 <= index < len(self.tags):
            raise IndexError("leaf index out of range")
        path = []
        i = index
        for level in self._tree()[:-1]:
            sib = i ^ 1
            if sib < len(level):
                path.append((level[sib], sib > i))
            i //= 2
        return MerkleProof(index, self.flags[index], tuple(path))

    def open_tag(self, tag: bytes) -> MerkleProof:
        return self.open(self._index[tag])

    def size_bytes(self) -> int:
        return 32

    def to_bytes(self) -> bytes:
        out = bytearray([MERKLE_TAG])
        out += struct.pack(">Q", len(self.tags)) + self.root
        for t, f in zip(self.tags, self.flags):
            out += struct.pack(">H", len(t)) + t + (b"\x01" if f else b"\x00")
        return bytes(out)

    @classmethod
    def _from_view(cls, data: memoryview) -> "MerkleCommitment":
        if len(data) < 41:
            raise MalformedEncoding("truncated Merkle commitment")
        (n,) = struct.unpack_from(">Q", data, 1)
        root = bytes(data[9:41])
        obj = cls()
        off = 41
        for _ in range(n):
            if len(data) < off + 2:
                raise MalformedEncoding("truncated Merkle leaf")
            (tl,) = struct.unpack_from(">H", data, off)
            off += 2
            if len(data) < off + tl + 1:
                raise MalformedEncoding("truncated Merkle leaf")
            obj.insert(bytes(data[off:off + tl]), data[off + tl] == 1)
            off += tl + 1
        if off != len(data):
            raise MalformedEncoding("trailing bytes after Merkle commitment")
        if obj.root != root:
            raise MalformedEncoding("Merkle root does not match the leaves")
        return obj

    def __eq__(self, other) -> bool:
        return isinstance(other, MerkleCommitment) and self.to_bytes() == other.to_bytes()


def merkle_verify(root: bytes, tag: bytes, flag: bool, proof: MerkleProof) -> bool:
    if proof.flag != flag:
        return False
    h = _leaf(tag, flag)
    for sib, right in proof.path:
        h = _node(h, sib) if right else _node(sib, h)
    return h == root


def serialize(commitment) -> bytes:
    return commitment.to_bytes()


def deserialize(data: bytes):
    view = memoryview(bytes(data))
    if not view:
        raise MalformedEncoding("empty commitment")
    if view[0] == BLOOM_TAG:
        return BloomCommitment._from_view(view)
    if view[0] == MERKLE_TAG:
        return MerkleCommitment._from_view(view)
    raise MalformedEncoding(f"unknown commitment backend {view[0]:#x}")


def make_commitment(backend: str, n_cap: int = 1000, fp: float = 1e-5):
    if backend == "bloom":
        return BloomCommitment(max(1, n_cap), fp)
    if backend == "merkle":
        return MerkleCommitment()
    raise ValueError(f"unknown backend {backend!r}")
