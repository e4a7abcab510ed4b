"""Simulation configuration and per-node behaviors (JSON round-trippable)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import ConfigInvalid

SCHEMA = 1

# real: Ed25519 with full onions.  lite: exponent arithmetic hashed through the
# matching Ed25519 points, bit-identical to real.  fast: exponent arithmetic
# throughout; same statistics, different bits.
CRYPTO_MODES = ("real", "lite", "fast")

KINDS = ("reliable", "offline_toggle", "throughput_cap", "random_drop", "adversarial", "free_rider")


@dataclass(frozen=True)
class NodeBehavior:
    kind: str = "reliable"
    mean_on_min: float = 90.0       # offline_toggle
    mean_off_min: float = 10.0
    fraction: float = 1.0           # throughput_cap: share of the mean incoming rate
    direction: str = "in"           # random_drop / adversarial: in | out | both
    rate: float = 0.0               # random_drop rate, adversarial drop fraction
    targets: tuple = ()             # adversarial
    substitute_rate: float = 0.0    # free_rider
    add_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigInvalid(f"unknown behavior {self.kind!r}")
        for name in ("rate", "substitute_rate", "add_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigInvalid(f"{name} must lie in [0, 1]")
        if self.direction not in ("in", "out", "both"):
            raise ConfigInvalid("direction must be in, out or both")
        if self.fraction <= 0 or self.mean_on_min <= 0 or self.mean_off_min <= 0:
            raise ConfigInvalid("durations and fractions must be positive")
        object.__setattr__(self, "targets", tuple(sorted(self.targets)))

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        default = NodeBehavior()
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "kind" and v != getattr(default, f.name):
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "NodeBehavior":
        d = dict(d)
        if "targets" in d:
            d["targets"] = tuple(d["targets"])
        return cls(**d)


def reliable() -> NodeBehavior:
    return NodeBehavior()


def offline_toggle(mean_on_min: float = 90.0, mean_off_min: float = 10.0) -> NodeBehavior:
    return NodeBehavior("offline_toggle", mean_on_min=mean_on_min, mean_off_min=mean_off_min)


def throughput_cap(fraction: float) -> NodeBehavior:
    return NodeBehavior("throughput_cap", fraction=fraction)


def random_drop(direction: str, rate: float) -> NodeBehavior:
    return NodeBehavior("random_drop", direction=direction, rate=rate)


def adversarial(targets, direction: str = "both", fraction: float = 1.0) -> NodeBehavior:
    return NodeBehavior("adversarial", targets=tuple(targets), direction=direction, rate=fraction)


def free_rider(substitute_rate: float = 0.0, add_rate: float = 0.0) -> NodeBehavior:
    return NodeBehavior("free_rider", substitute_rate=substitute_rate, add_rate=add_rate)


@dataclass(frozen=True)
class SimConfig:
    L: int = 3
    W: int = 20
    W_G: int = 20
    epoch_seconds: float = 3600.0
    clients: int = 100
    client_rate: float = 1.0            # packets per second per client
    p_lot: float = 0.01
    mix_delay_ms: float = 50.0
    link_ms: float = 40.0
    gateway_ms: float = 2.0
    seed: int = 0
    crypto_mode: str = "lite"           # real | lite | fast
    behaviors: dict = field(default_factory=dict)   # node id -> NodeBehavior
    credential_allowance: int = 50_000
    commitment: str = "bloom"           # bloom | merkle
    bloom_fp: float = 1e-5
    alpha_ns: float = 0.01
    cap_bucket_seconds: float = 1.0
    burned: tuple = ()
    epoch: int = 0
    record_events: bool = False

    def __post_init__(self):
        problems = []
        if min(self.L, self.W, self.W_G, self.clients) < 1:
            problems.append("L, W, W_G and clients must be positive")
        if self.epoch_seconds <= 0 or self.client_rate <= 0:
            problems.append("epoch_seconds and client_rate must be positive")
        if min(self.mix_delay_ms, self.link_ms, self.gateway_ms) < 0:
            problems.append("delays must be nonnegative")
        if not 0 < self.p_lot < 1:
            problems.append("p_lot must lie in (0, 1)")
        if self.crypto_mode not in CRYPTO_MODES:
            problems.append(f"crypto_mode must be one of {', '.join(CRYPTO_MODES)}")
        if self.commitment not in ("bloom", "merkle"):
            problems.append("commitment must be bloom or merkle")
        if self.credential_allowance < 1:
            problems.append("credential_allowance must be positive")
        n = self.W_G + self.L * self.W
        for node, b in self.behaviors.items():
            if not 0 <= int(node) < n:
                problems.append(f"behavior for unknown node {node}")
            if not isinstance(b, NodeBehavior):
                problems.append(f"behavior for node {node} is not a NodeBehavior")
        if problems:
            raise ConfigInvalid("; ".join(problems))
        object.__setattr__(self, "behaviors", {int(k): v for k, v in sorted(self.behaviors.items())})
        object.__setattr__(self, "burned", tuple(sorted(tuple(e) for e in self.burned)))

    @property
    def n_nodes(self) -> int:
        return self.W_G + self.L * self.W

    @property
    def expected_packets(self) -> float:
        return self.clients * self.client_rate * self.epoch_seconds

    @property
    def expected_measurements(self) -> float:
        return self.expected_packets * self.p_lot

    def with_measurements(self, n: float) -> "SimConfig":
        """Same config with the client rate set to yield about n measurements."""
        rate = n / (self.p_lot * self.clients * self.epoch_seconds)
        return replace(self, client_rate=rate)

    def replace(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    # -- JSON -------------------------------------------------------------

    def to_json(self) -> dict:
        d = asdict(self)
        d["behaviors"] = {str(k): v.to_json() for k, v in self.behaviors.items()}
        d["burned"] = [list(e) for e in self.burned]
        return {"schema": SCHEMA, **d}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, d: dict) -> "SimConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigInvalid(f"unsupported config schema {schema}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
        try:
            if "behaviors" in d:
                d["behaviors"] = {int(k): NodeBehavior.from_json(v) for k, v in d["behaviors"].items()}
            if "burned" in d:
                d["burned"] = tuple(tuple(e) for e in d["burned"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as f:
            try:
                return cls.from_json(json.load(f))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}: {exc}") from exc
