import csv
import dataclasses
import math
from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import make_credential

from mixrel.commitment import MerkleCommitment, serialize
from mixrel.epoch import (
    CLIENT,
    CredentialRecord,
    EpochTranscript,
    Verdict,
    check_flow_conservation,
    check_no_skipping,
    gateway_total_consistency,
    load_transcript,
    no_skipping_challenges,
    run_post_epoch,
    save_transcript,
    write_link_tally_csv,
)
from mixrel.errors import CommitmentMissing, IsAMeasurement
from mixrel.group import lite_group
from mixrel.packet import (
    PacketParams,
    draw_packet,
    no_skipping_open,
    open_measurement,
    verify_opening,
)
from mixrel.topology import Topology


def recount(measurements, nu):
    """Independent tally from the simulator's measurement log."""
    s, d = Counter(), Counter()
    for _, _, nodes, k in measurements:
        assert k >= 1  # the client leg is lossless
        s[(CLIENT, nodes[0])] += 1
        for i in range(k - 1):
            s[(nodes[i], nodes[i + 1])] += 1
        if k <= nu:
            d[(nodes[k - 1], nodes[k])] += 1
        else:
            s[(nodes[nu], CLIENT)] += 1
    return s, d


def tally_counts(tally):
    s = Counter({e: t.s_star for e, t in tally.links.items() if t.s_star})
    d = Counter({e: t.d_star for e, t in tally.links.items() if t.d_star})
    return s, d


def rebuilt(commitment, drop=(), false=()):
    c = MerkleCommitment()
    for t, f in zip(commitment.tags, commitment.flags):
        if t in drop:
            continue
        c.insert(t, f and t not in false)
    return c


def test_lossless_epoch(honest_run):
    r = honest_run
    tally = run_post_epoch(r.transcript, r.topology)
    n = len(r.transcript.openings)
    assert n > 100 and tally.used == n
    assert all(t.d_star == 0 for t in tally.links.values())
    mix = sum(t.s_star for e, t in tally.links.items() if CLIENT not in e)
    assert mix == r.params.nu * n
    assert tally.discarded == tally.invalid == 0


def test_tally_matches_event_log_recount(unreliable_run):
    r = unreliable_run
    tally = run_post_epoch(r.transcript, r.topology)
    assert tally.used == len(r.ground_truth.measurements)
    s, d = recount(r.ground_truth.measurements, r.params.nu)
    assert sum(d.values()) > 0
    assert tally_counts(tally) == (s, d)


def test_single_drop_is_localized(honest_run):
    r = honest_run
    tr = r.transcript
    op = tr.openings[0]
    path = verify_opening(op, tr.credentials[op.cred_id].vk, r.params, r.topology)
    before = run_post_epoch(tr, r.topology)
    commitments = dict(tr.commitments)
    for n, t in zip(path.nodes[2:], path.tags[2:]):
        commitments[n] = rebuilt(commitments[n], drop={t})
    after = run_post_epoch(EpochTranscript(**{**vars(tr), "commitments": commitments}), r.topology)
    n1, n2 = path.nodes[1], path.nodes[2]
    changed = {e for e in set(before.links) | set(after.links)
               if before.d_star(*e) != after.d_star(*e)}
    assert changed == {(n1, n2)}
    assert after.d_star(n1, n2) == before.d_star(n1, n2) + 1
    for a, b in zip(path.nodes[1:], path.nodes[2:] + [CLIENT]):
        assert after.s_star(a, b) == before.s_star(a, b) - 1


def test_integrity_failure_discards_the_whole_measurement(honest_run):
    r = honest_run
    tr = r.transcript
    op = tr.openings[5]
    path = verify_opening(op, tr.credentials[op.cred_id].vk, r.params, r.topology)
    before = run_post_epoch(tr, r.topology)
    commitments = dict(tr.commitments)
    commitments[path.nodes[2]] = rebuilt(commitments[path.nodes[2]], false={path.tags[2]})
    after = run_post_epoch(EpochTranscript(**{**vars(tr), "commitments": commitments}), r.topology)
    assert after.used == before.used - 1
    assert after.discarded == 1
    edges = list(zip(path.nodes, path.nodes[1:])) + [(CLIENT, path.nodes[0]), (path.nodes[-1], CLIENT)]
    for e in edges:
        assert after.s_star(*e) == before.s_star(*e) - 1
    for e in zip(path.nodes, path.nodes[1:]):
        assert after.links[e].discarded == 1


def test_path_hole_is_discarded(honest_run):
    r = honest_run
    tr = r.transcript
    op = tr.openings[2]
    path = verify_opening(op, tr.credentials[op.cred_id].vk, r.params, r.topology)
    commitments = dict(tr.commitments)
    commitments[path.nodes[1]] = rebuilt(commitments[path.nodes[1]], drop={path.tags[1]})
    after = run_post_epoch(EpochTranscript(**{**vars(tr), "commitments": commitments}), r.topology)
    assert after.discarded == 1
    assert after.used == len(tr.openings) - 1


def test_invalid_and_excluded_openings(honest_run):
    r = honest_run
    tr = r.transcript
    forged = dataclasses.replace(tr.openings[0], ctr=tr.openings[0].ctr + 1)
    t2 = EpochTranscript(**{**vars(tr), "openings": tr.openings + [forged]})
    assert run_post_epoch(t2, r.topology).invalid == 1
    g = tr.openings[0].gateway
    tally = run_post_epoch(tr, r.topology, exclude={g})
    assert tally.used == sum(1 for op in tr.openings if op.gateway != g)
    assert tally.s_star(CLIENT, g) == 0


def test_missing_commitment(honest_run):
    r = honest_run
    tr = r.transcript
    commitments = {n: c for n, c in tr.commitments.items() if n != r.topology.layer_nodes(2)[0]}
    t2 = EpochTranscript(**{**vars(tr), "commitments": commitments})
    with pytest.raises(CommitmentMissing):
        run_post_epoch(t2, r.topology, strict=True)
    tally = run_post_epoch(t2, r.topology)
    assert tally.used + tally.discarded == len(tr.openings)


def test_flow_conservation(unreliable_run):
    r = unreliable_run
    tally = run_post_epoch(r.transcript, r.topology, t_observed=r.t_edges)
    for node, (into, out) in check_flow_conservation(tally, r.topology).items():
        assert into == out, node
    e = next(iter(r.t_edges))
    assert tally.links[e].t_total == r.t_edges[e]


def test_link_tally_csv(tmp_path, honest_run):
    tally = run_post_epoch(honest_run.transcript, honest_run.topology)
    write_link_tally_csv(tmp_path / "t.csv", tally, epoch=3)
    with open(tmp_path / "t.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "src", "dst", "s_star", "d_star", "discarded", "t_total"]
    assert len(rows) == len(tally.links) + 1 and rows[1][0] == "3"


def test_transcript_persistence(tmp_path, honest_run):
    tr = honest_run.transcript
    save_transcript(tr, tmp_path / "tr")
    back = load_transcript(tmp_path / "tr")
    assert back.nonce == tr.nonce and back.p_lot == tr.p_lot and back.group is tr.group
    assert back.openings == tr.openings
    assert {n: serialize(c) for n, c in back.commitments.items()} == \
        {n: serialize(c) for n, c in tr.commitments.items()}
    assert back.credentials == tr.credentials
    assert back.no_skipping == tr.no_skipping
    a = run_post_epoch(tr, honest_run.topology)
    b = run_post_epoch(back, honest_run.topology)
    assert tally_counts(a) == tally_counts(b)


# -- no-skipping ---------------------------------------------------------------


def test_honest_gateways_pass_no_skipping(honest_run):
    verdicts = check_no_skipping(honest_run.transcript)
    assert verdicts and set(verdicts.values()) == {Verdict.HONEST}
    verdicts = check_no_skipping(honest_run.transcript, v=0)
    assert set(verdicts.values()) == {Verdict.HONEST}


def hidden_transcript(N, seed=b""):
    rec = CredentialRecord(0, 0, 1, N)
    return EpochTranscript(0, 1, 0.01, 3, lite_group(), {0: rec}, beacon_seed=seed)


def test_challenges_avoid_opened_counters():
    tr = hidden_transcript(50)
    tr.openings = [SimpleNamespace(gateway=0, cred_id=0, ctr=c) for c in range(0, 50, 2)]
    positions = no_skipping_challenges(tr, 0, v=500)
    assert len(positions) == 500
    assert {c for _, c in positions} <= set(range(1, 50, 2))
    assert len({c for _, c in positions}) == 25


def test_hidden_measurement_catch_rate_matches_closed_form():
    N, hidden = 2000, 777
    v = math.ceil(-N * math.log(0.5))
    caught = 0
    for t in range(400):
        tr = hidden_transcript(N, seed=t.to_bytes(4, "big"))
        caught += (0, hidden) in no_skipping_challenges(tr, 0, v=v)
    expected = 1 - (1 - 1 / N) ** v
    assert abs(caught / 400 - expected) < 4 * math.sqrt(expected * (1 - expected) / 400)


def test_no_skipping_verdicts_with_real_proofs():
    group = lite_group()
    params = PacketParams(0.3, nonce=4, L=3)
    cred = make_credential(group, gateway=0, seed=b"hide")
    topo = Topology.generate(3, 4, 2, group)
    N = 30
    kinds = [draw_packet(cred, topo, params, c).is_measurement for c in range(N)]
    measured = [c for c in range(N) if kinds[c]]
    hidden = measured[0]
    openings = [open_measurement(cred, params, c) for c in measured[1:]]
    rec = CredentialRecord(0, 0, cred.vrf.vk, N)

    def responder(g, positions):
        out = {}
        for cid, ctr in positions:
            try:
                out[(cid, ctr)] = no_skipping_open(cred, params, ctr)
            except IsAMeasurement:
                pass
        return out

    outcomes = Counter()
    for t in range(40):
        tr = EpochTranscript(0, params.nonce, params.p_lot, 3, group, {0: rec}, openings=openings,
                             beacon_seed=bytes([t]), alpha_ns=0.2)
        positions = no_skipping_challenges(tr, 0)
        verdict = check_no_skipping(tr, params, responder=responder)[0]
        assert (verdict is Verdict.CHEATING) == ((0, hidden) in positions)
        outcomes[verdict] += 1
    assert outcomes[Verdict.CHEATING] > 0 and outcomes[Verdict.HONEST] > 0


# -- announced totals ----------------------------------------------------------


def consistency_transcript(counts, opened, rng_ctrs=None):
    creds = {c: CredentialRecord(c, 0, 1, n) for c, n in enumerate(counts)}
    openings = []
    for c, k in enumerate(opened):
        ctrs = range(k) if rng_ctrs is None else rng_ctrs[c]
        openings += [SimpleNamespace(gateway=0, cred_id=c, ctr=x) for x in ctrs]
    return EpochTranscript(0, 1, 0.01, 3, lite_group(), creds, openings=openings)


def test_gateway_consistency_honest():
    rng = np.random.default_rng(8)
    counts = [10_000] * 10
    verdicts = Counter()
    for _ in range(50):
        opened = rng.binomial(10_000, 0.01, size=10).tolist()
        verdicts[gateway_total_consistency(consistency_transcript(counts, opened))[0]] += 1
    assert verdicts[Verdict.HONEST] >= 49


def test_gateway_consistency_cheaters():
    assert gateway_total_consistency(consistency_transcript([100_000], [0]))[0] is Verdict.CHEATING
    # announce half the counters but open every measurement of the full range
    tr = consistency_transcript([5_000], [100])
    assert gateway_total_consistency(tr)[0] is Verdict.CHEATING
    # openings beyond the announced range are cheating outright
    tr = consistency_transcript([5_000], [50], rng_ctrs=[range(5_000, 5_050)])
    assert gateway_total_consistency(tr)[0] is Verdict.CHEATING


def test_gateway_consistency_on_a_simulated_epoch(honest_run):
    verdicts = gateway_total_consistency(honest_run.transcript)
    assert set(verdicts.values()) == {Verdict.HONEST}
