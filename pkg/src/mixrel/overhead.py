"""Per-epoch broadcast and long-term storage of the measurement protocol."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .commitment import bloom_size
from .group import ed25519
from .packet import no_skipping_sample_count, no_skipping_size, opening_size


@dataclass(frozen=True)
class OverheadParams:
    measurements: int = 1_000_000
    opening_bytes: int = 388
    mix_nodes: int = 240
    mix_filter_bytes: int = 3_500_000
    gateways: int = 80
    gateway_filter_bytes: int = 300_000
    noskip_positions: int = 1_000_000
    noskip_bytes: int = 132
    score_bytes: int = 2

    @classmethod
    def from_implementation(cls, total_packets: int = 100_000_000, p_lot: float = 0.01,
                            W: int = 80, L: int = 3, W_G: int = 80, fp: float = 1e-5,
                            gateway_cap: int = 100_000, alpha_ns: float = 0.01) -> "OverheadParams":
        """Item sizes taken from this implementation's encodings and sizing rules."""
        g = ed25519()
        meas = round(total_packets * p_lot)
        per_mix = total_packets // W
        m_mix, _ = bloom_size(per_mix, fp)
        m_gw, _ = bloom_size(gateway_cap, fp)
        return cls(meas, opening_size(g), W * L, math.ceil(m_mix / 8), W_G, math.ceil(m_gw / 8),
                   no_skipping_sample_count(total_packets - meas, alpha_ns), no_skipping_size(g), 2)


@dataclass(frozen=True)
class OverheadRow:
    storage: str      # ephemeral | long-term
    item: str
    per_item: int     # bytes
    amount: int

    @property
    def total(self) -> int:
        return self.per_item * self.amount


def overhead_table(p: OverheadParams | None = None) -> list:
    p = p or OverheadParams()
    return [
        OverheadRow("ephemeral", "Packet openings", p.opening_bytes, p.measurements),
        OverheadRow("ephemeral", "Bloom filters mix nodes", p.mix_filter_bytes, p.mix_nodes),
        OverheadRow("ephemeral", "Bloom filters gateways", p.gateway_filter_bytes, p.gateways),
        OverheadRow("ephemeral", "No-skipping proofs", p.noskip_bytes, p.noskip_positions),
        OverheadRow("long-term", "Node reliability scores", p.score_bytes, p.mix_nodes + p.gateways),
    ]


def format_bytes(n: float) -> str:
    """Decimal units with up to two decimals and trailing zeros dropped: 3.5 MB, 640 B."""
    for unit, scale in (("GB", 1e9), ("MB", 1e6), ("KB", 1e3)):
        if n >= scale:
            v = f"{n / scale:.2f}".rstrip("0").rstrip(".")
            return f"{v} {unit}"
    return f"{int(n)} B"


def format_amount(n: int) -> str:
    if n >= 1_000_000 and n % 1_000_000 == 0:
        k = n // 1_000_000
        return f"{k} million"
    return str(n)


def render(rows) -> str:
    head = ("Storage", "Item", "Per item", "Amount", "Total")
    body = [(r.storage, r.item, format_bytes(r.per_item), format_amount(r.amount), format_bytes(r.total))
            for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(head)] + [line(b) for b in body])


def write_overhead_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["storage", "item", "per_item_bytes", "amount", "total_bytes", "total"])
        for r in rows:
            w.writerow([r.storage, r.item, r.per_item, r.amount, r.total, format_bytes(r.total)])
