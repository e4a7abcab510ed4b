import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrel.commitment import (
    BloomCommitment,
    MerkleCommitment,
    MerkleProof,
    bloom_new,
    bloom_size,
    deserialize,
    make_commitment,
    merkle_verify,
    serialize,
)
from mixrel.errors import MalformedEncoding

tags = st.binary(min_size=32, max_size=32)


def random_tags(n, seed=0):
    rng = random.Random(seed)
    return [rng.randbytes(32) for _ in range(n)]


def test_sizing_formulas():
    assert bloom_size(1, 0.5) == (2, 1)
    m, h = bloom_size(1000, 0.01)
    assert m == 9586 and h == 7


@pytest.mark.parametrize("n_cap, mib", [(1_250_000, 3.5), (100_000, 300 / 1024)])
def test_paper_filter_sizes(n_cap, mib):
    m, _ = bloom_size(n_cap, 1e-5)
    size = m / 8 / 2**20
    assert abs(size - mib) / mib <= 0.05


def test_no_false_negatives_and_fp_at_capacity():
    c = bloom_new(100_000, 1e-5)
    inserted = random_tags(100_000, seed=1)
    c.insert_many(inserted)
    assert all(c.lookup_many(inserted))
    rng = np.random.default_rng(2)
    probes = [bytes(row) for row in rng.integers(0, 256, size=(1_000_000, 32), dtype=np.uint8)]
    hits = sum(1 for v in c.lookup_many(probes) if v is not None)
    assert hits / len(probes) <= 3e-5
    assert not c.over_capacity


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(tags, st.booleans()), max_size=60))
def test_bloom_flag_fidelity(items):
    c = BloomCommitment(max(1, len(items)), 1e-5)
    flags = {}
    for t, f in items:
        c.insert(t, f)
        flags[t] = flags.get(t, True) and f
    for t, f in flags.items():
        assert c.lookup(t) is f
        assert c.contains(t)


def test_tag_in_both_filters_reads_as_false():
    c = BloomCommitment(10)
    t = b"\x01" * 32
    c.insert(t, True)
    c.insert(t, False)
    assert c.lookup(t) is False


def test_merkle_open_and_verify():
    c = MerkleCommitment()
    items = random_tags(37, seed=3)
    for i, t in enumerate(items):
        c.insert(t, i % 5 != 0)
    root = c.root
    for i, t in enumerate(items):
        proof = c.open(i)
        assert proof.flag == (i % 5 != 0)
        assert merkle_verify(root, t, proof.flag, proof)
        assert c.open_tag(t) == proof
    proof = c.open(4)
    bad_path = ((bytes(32), proof.path[0][1]),) + tuple(proof.path[1:])
    assert not merkle_verify(root, items[4], proof.flag, MerkleProof(proof.index, proof.flag, bad_path))
    assert not merkle_verify(root, items[4], not proof.flag, proof)


@pytest.mark.parametrize("n", [1, 2, 3, 7, 8, 33, 64])
def test_merkle_binding_exhaustive(n):
    c = MerkleCommitment()
    items = random_tags(n, seed=n)
    c.insert_many(items)
    root = c.root
    absent = random_tags(4, seed=1000 + n)
    for i in range(n):
        proof = c.open(i)
        for t in absent:
            assert not merkle_verify(root, t, True, proof)
            assert not merkle_verify(root, t, False, proof)


@pytest.mark.parametrize("backend", ["bloom", "merkle"])
def test_serialization_roundtrip(backend):
    c = BloomCommitment(10_000, false_cap=1000) if backend == "bloom" else MerkleCommitment()
    items = random_tags(10_000, seed=4)
    c.insert_many(items[:9000])
    c.insert_many(items[9000:], flag=False)
    data = serialize(c)
    back = deserialize(data)
    assert back == c
    assert serialize(back) == data
    assert back.lookup(items[0]) is True and back.lookup(items[-1]) is False


@pytest.mark.parametrize("backend", ["bloom", "merkle"])
def test_empty_roundtrip_and_truncation(backend):
    c = make_commitment(backend, n_cap=5)
    assert deserialize(serialize(c)) == c
    c.insert(b"\x07" * 32)
    data = serialize(c)
    for cut in (0, 1, len(data) // 2, len(data) - 1):
        with pytest.raises(MalformedEncoding):
            deserialize(data[:cut])
    with pytest.raises(MalformedEncoding):
        deserialize(b"\xff" + data[1:])


def test_unknown_backend():
    with pytest.raises(ValueError):
        make_commitment("cuckoo")


def test_false_filter_overflow_is_reported():
    c = BloomCommitment(1000, false_cap=64)
    c.insert_many(random_tags(64, seed=6), flag=False)
    assert not c.over_capacity
    c.insert(b"\x09" * 32, False)
    assert c.over_capacity
    assert deserialize(serialize(c)).over_capacity


def test_lookup_many_matches_lookup():
    c = BloomCommitment(500)
    items = random_tags(500, seed=5)
    c.insert_many(items[:250])
    c.insert_many(items[250:400], flag=False)
    assert c.lookup_many(items) == [c.lookup(t) for t in items]
