import warnings

import pytest

from mixrel.group import ed25519, lite_group, mirror_group, tiny_group
from mixrel.packet import Credential, PacketParams
from mixrel.sim.config import SimConfig
from mixrel.sim.engine import run_epoch
from mixrel.sim.scenarios import assign_unreliable_profile
from mixrel.topology import Topology
from mixrel.vrf import vrf_keygen

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    def add(line):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


@pytest.fixture(scope="session")
def ed():
    return ed25519()


@pytest.fixture(scope="session")
def lite():
    return lite_group()


@pytest.fixture(scope="session")
def mirror():
    return mirror_group()


@pytest.fixture(scope="session")
def tiny():
    return tiny_group()


@pytest.fixture(scope="session")
def ed_topo(ed):
    return Topology.generate(3, 5, 4, ed, seed=b"topology")


@pytest.fixture(scope="session")
def params():
    return PacketParams(p_lot=0.3, nonce=12345, L=3)


def make_credential(group, cred_id=0, gateway=0, seed=b"cred", allowance=None):
    kp = vrf_keygen(seed + cred_id.to_bytes(4, "big"), group)
    return Credential(cred_id, gateway, kp, group.scalar_from_bytes(seed * 3), allowance)


def small_config(**kw):
    base = dict(L=3, W=5, W_G=5, clients=10, client_rate=2.0, epoch_seconds=300.0,
                p_lot=0.3, crypto_mode="fast", seed=3)
    base.update(kw)
    return SimConfig(**base)


def unreliable_config(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return assign_unreliable_profile(small_config(**kw))


@pytest.fixture(scope="session")
def honest_run():
    return run_epoch(small_config(commitment="merkle"))


@pytest.fixture(scope="session")
def unreliable_run():
    return run_epoch(unreliable_config(commitment="merkle", W=10, W_G=10, clients=20,
                                       epoch_seconds=600.0))
