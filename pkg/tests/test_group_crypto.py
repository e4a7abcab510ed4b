import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mixrel.errors import DenominatorZero, MalformedEncoding
from mixrel.group import ED25519_ORDER, by_name, ed25519, lite_group, mirror_group, tiny_group
from mixrel.hashing import HashLabel, hash_derive, hash_int, xor_bytes
from mixrel.vrf import (
    EqdlProof,
    VrfKeyPair,
    VrfOutput,
    decode_vrf_output,
    encode_vrf_output,
    eqdl_prove,
    eqdl_verify,
    vrf_eval,
    vrf_keygen,
    vrf_offset,
    vrf_output_size,
    vrf_value,
    vrf_verify,
)

GROUPS = [ed25519(), lite_group(), mirror_group(), tiny_group()]
scalars = st.integers(min_value=1, max_value=2**250)


# -- groups --------------------------------------------------------------------


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
@settings(max_examples=25, deadline=None)
@given(a=scalars, b=scalars)
def test_exponent_laws(group, a, b):
    g = group.generator
    assert group.mul(group.exp(g, a), group.exp(g, b)) == group.exp(g, a + b)
    assert group.exp(group.exp(g, a), b) == group.exp(g, a * b)
    assert group.mul(group.exp(g, a), group.inv(group.exp(g, a))) == group.identity


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
@settings(max_examples=25, deadline=None)
@given(a=scalars)
def test_encode_decode_roundtrip(group, a):
    x = group.base_exp(a)
    if x == group.identity:
        return
    data = group.encode(x)
    assert len(data) == group.element_size
    assert group.decode(data) == x
    assert group.decode_scalar(group.encode_scalar(a)) == a % group.order


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
def test_decode_rejects_bad_lengths_and_identity(group):
    with pytest.raises(MalformedEncoding):
        group.decode(bytes(group.element_size - 1))
    with pytest.raises(MalformedEncoding):
        group.decode(group.encode(group.identity))
    assert group.decode(group.encode(group.identity), allow_identity=True) == group.identity
    with pytest.raises(MalformedEncoding):
        group.decode_scalar(bytes(group.scalar_size + 1))


def test_generator_has_prime_order():
    for group in GROUPS:
        assert group.exp(group.generator, group.order) == group.identity
        assert group.exp(group.generator, 1) != group.identity
    assert ED25519_ORDER == 2**252 + 27742317777372353535851937790883648493
    tiny = tiny_group()
    assert all(tiny.order % p for p in range(2, 50_000))
    assert tiny.order.bit_length() == 31


def test_ed25519_rejects_off_curve_bytes():
    ed = ed25519()
    bad = 0
    for i in range(64):
        data = bytes([i]) + bytes(30) + b"\x7f"
        try:
            ed.decode(data)
        except MalformedEncoding:
            bad += 1
    assert bad > 0


@settings(max_examples=30, deadline=None)
@given(a=scalars)
def test_mirror_hashes_the_ed25519_point(a):
    ed, mirror = ed25519(), mirror_group()
    assert mirror.hash_encode(mirror.base_exp(a)) == ed.encode(ed.base_exp(a))


def test_by_name():
    assert by_name("ed25519") is ed25519()
    assert by_name("lite") is lite_group()
    with pytest.raises(ValueError):
        by_name("p256")


# -- hashing -------------------------------------------------------------------


def test_labels_are_distinct():
    values = [int(label) for label in HashLabel]
    assert values == [0, 1, 2, 3, 4, 5, 6]
    assert HashLabel.PKT == 0 and HashLabel.BLI == 5 and HashLabel.TAG == 6


@settings(max_examples=50)
@given(data=st.binary(max_size=64))
def test_domain_separation(data):
    outs = {hash_derive(label, data) for label in HashLabel}
    assert len(outs) == len(HashLabel)
    assert hash_derive(HashLabel.RND, data) == hash_derive(HashLabel.RND, data)
    assert len(hash_derive(HashLabel.NEXT, data)) == 32
    assert hash_int(HashLabel.NEXT, data) == int.from_bytes(hash_derive(HashLabel.NEXT, data), "big")


def test_monobit_frequency():
    rng = random.Random(5)
    buf = b"".join(hash_derive(HashLabel.NEXT, rng.randbytes(16)) for _ in range(10_000))
    ones = int(np.unpackbits(np.frombuffer(buf, dtype=np.uint8)).sum())
    n = len(buf) * 8
    chi2 = (ones - n / 2) ** 2 / (n / 2) + (n - ones - n / 2) ** 2 / (n / 2)
    assert stats.chi2.sf(chi2, 1) > 0.001


def test_xor_bytes():
    assert xor_bytes(b"\x0f\xf0", b"\xff\xff") == b"\xf0\x0f"
    a = hash_derive(HashLabel.NEXT, b"a")
    assert xor_bytes(xor_bytes(a, b"\x55" * 32), b"\x55" * 32) == a


# -- VRF -----------------------------------------------------------------------


def test_keygen_is_deterministic_and_nontrivial():
    ed = ed25519()
    seed = bytes(31) + b"\x01"
    a, b = vrf_keygen(seed, ed), vrf_keygen(seed, ed)
    assert a.sk == b.sk and a.vk == b.vk
    assert a.vk != ed.identity and a.sk != 0
    assert a.vk == ed.base_exp(a.sk)


def test_keygen_1000_distinct_keys():
    ed = ed25519()
    vks = {vrf_keygen(i.to_bytes(8, "big"), ed).vk for i in range(1000)}
    assert len(vks) == 1000


def test_keygen_rejects_empty_seed():
    with pytest.raises(ValueError):
        vrf_keygen(b"")


def test_offset_uses_four_times_the_counter():
    assert vrf_offset(0, 1, 0) == 4
    assert vrf_offset(1, 0, 0, ell_ctr=32) == 2**34
    offsets = {vrf_offset(7, c, label) for c in range(100) for label in range(3)}
    assert len(offsets) == 300


@pytest.mark.parametrize("group", [ed25519(), mirror_group(), tiny_group()], ids=lambda g: g.name)
def test_eval_verify_roundtrip(group):
    kp = vrf_keygen(b"vrf-key", group)
    out = vrf_eval(kp, 99, 5, 1)
    assert out == vrf_eval(kp, 99, 5, 1)
    assert out.r == vrf_value(kp, 99, 5, 1)
    assert vrf_verify(kp.vk, 99, 5, 1, out, group)
    assert not vrf_verify(kp.vk, 99, 6, 1, out, group)
    assert not vrf_verify(kp.vk, 99, 5, 2, out, group)
    assert not vrf_verify(kp.vk, 98, 5, 1, out, group)


def test_point_satisfies_the_exponent_relation():
    ed = ed25519()
    kp = vrf_keygen(b"relation", ed)
    out = vrf_eval(kp, 3, 11, 2)
    assert ed.exp(out.u, kp.sk + vrf_offset(3, 11, 2)) == ed.generator


def test_verify_rejects_corruptions():
    ed = ed25519()
    kp = vrf_keygen(b"tamper", ed)
    out = vrf_eval(kp, 1, 2, 0)
    flipped = bytearray(ed.encode(out.u))
    flipped[0] ^= 1
    bad_u = VrfOutput(out.r, bytes(flipped), out.proof)
    assert not vrf_verify(kp.vk, 1, 2, 0, bad_u, ed)
    bad_r = VrfOutput(bytes(32), out.u, out.proof)
    assert not vrf_verify(kp.vk, 1, 2, 0, bad_r, ed)
    bad_c = VrfOutput(out.r, out.u, EqdlProof(out.proof.c ^ 1, out.proof.s))
    assert not vrf_verify(kp.vk, 1, 2, 0, bad_c, ed)
    bad_s = VrfOutput(out.r, out.u, EqdlProof(out.proof.c, (out.proof.s + 1) % ed.order))
    assert not vrf_verify(kp.vk, 1, 2, 0, bad_s, ed)
    other = vrf_keygen(b"other", ed)
    assert not vrf_verify(other.vk, 1, 2, 0, out, ed)
    assert not vrf_verify(b"\x00" * 31, 1, 2, 0, out, ed)


def test_denominator_zero(tiny):
    kp = vrf_keygen(b"zero", tiny)
    # a key whose sk cancels the offset exactly
    sk = (-vrf_offset(0, 3, 1)) % tiny.order
    bad = VrfKeyPair(sk, tiny.base_exp(sk), tiny)
    with pytest.raises(DenominatorZero):
        vrf_eval(bad, 0, 3, 1)
    assert vrf_eval(kp, 0, 3, 1).r


def test_lottery_rate_100k():
    lite = lite_group()
    p = 0.01
    T = int(p * 2**256)
    n = 100_000
    hits = 0
    for i in range(n // 1000):
        kp = vrf_keygen(b"lottery" + i.to_bytes(4, "big"), lite)
        hits += sum(int.from_bytes(vrf_value(kp, i, c, 1), "big") < T for c in range(1000))
    sd = (n * p * (1 - p)) ** 0.5
    assert abs(hits - n * p) <= 3 * sd


def test_output_encoding_roundtrip(ed):
    kp = vrf_keygen(b"enc", ed)
    out = vrf_eval(kp, 4, 4, 0)
    data = encode_vrf_output(ed, out)
    assert len(data) == vrf_output_size(ed) == 128
    assert decode_vrf_output(ed, data) == out
    with pytest.raises(MalformedEncoding):
        decode_vrf_output(ed, data[:-1])


# -- EQDL ----------------------------------------------------------------------


def test_eqdl_identity_witness(ed):
    g = ed.generator
    h = ed.base_exp(777)
    proof = eqdl_prove(ed, 1, g, g, h, h)
    assert eqdl_verify(ed, g, g, h, h, proof)
    tampered = EqdlProof((proof.c + 1) % ed.order, proof.s)
    assert not eqdl_verify(ed, g, g, h, h, tampered)


def test_eqdl_property_loop(ed):
    rng = random.Random(11)
    g = ed.generator
    for _ in range(100):
        x = rng.randrange(1, ed.order)
        h = ed.base_exp(rng.randrange(1, ed.order))
        G, H = ed.exp(g, x), ed.exp(h, x)
        assert eqdl_verify(ed, g, G, h, H, eqdl_prove(ed, x, g, G, h, H))
        wrong = ed.exp(h, x + 1)
        assert not eqdl_verify(ed, g, G, h, wrong, eqdl_prove(ed, x, g, G, h, wrong))


def test_eqdl_proof_is_bound_to_the_statement(ed):
    g = ed.generator
    h1, h2 = ed.base_exp(5), ed.base_exp(6)
    x = 1234
    proof = eqdl_prove(ed, x, g, ed.exp(g, x), h1, ed.exp(h1, x))
    assert not eqdl_verify(ed, g, ed.exp(g, x), h2, ed.exp(h2, x), proof)


@settings(max_examples=40, deadline=None)
@given(x=st.integers(min_value=1, max_value=2**31), y=st.integers(min_value=1, max_value=2**31))
def test_eqdl_tiny_group_soundness(x, y):
    tiny = tiny_group()
    g = tiny.generator
    h = tiny.base_exp(y)
    G, H = tiny.exp(g, x), tiny.exp(h, x)
    assert eqdl_verify(tiny, g, G, h, H, eqdl_prove(tiny, x, g, G, h, H))
    H2 = tiny.mul(H, g)
    assert not eqdl_verify(tiny, g, G, h, H2, eqdl_prove(tiny, x, g, G, h, H2))
