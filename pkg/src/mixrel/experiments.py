"""Experiment suites and the simulate runner behind the command line.

Each suite builds its configs, runs epochs (optionally in a process pool,
results kept in repetition order), scores them and returns a report with
a list of named PASS/FAIL checks.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import shutil
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .epoch import run_post_epoch, write_link_tally_csv
from .estimation import DEFAULT_TAU, DEFAULT_Z, node_scores, write_link_estimates_csv, write_node_scores_csv
from .freeride import bias_scan, flag_probability, layer_sweep, write_bias_csv, write_freeride_csv
from .sim.config import SimConfig
from .sim.engine import run_epoch
from .sim.scenarios import (adversarial_scenario, assign_unreliable_profile, attack_costs, attack_sets,
                            feasible_placements, freeride_scenario, free_riders)

__version__ = "0.1.0"


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass(frozen=True)
class AnalysisOptions:
    scheme: str = "threshold"
    Z: float = DEFAULT_Z
    tau: float = DEFAULT_TAU
    bias_p: float = 0.01


@dataclass
class Analysis:
    result: object
    tally: object
    scores: object
    truth: dict
    freeride: dict
    bias: dict


def analyze(result, opts: AnalysisOptions = AnalysisOptions(), freeride: bool = True,
            bias: bool = True) -> Analysis:
    topo = result.topology
    tally = run_post_epoch(result.transcript, topo, result.params, t_observed=result.t_edges)
    scores = node_scores(tally, topo, opts.scheme, opts.tau, opts.Z)
    truth = result.ground_truth.rhos(range(topo.n_nodes))
    reports = layer_sweep(tally, result.t_edges, result.t_triples, topo,
                          result.config.p_lot, opts.Z) if freeride else {}
    chi = bias_scan(result.t_triples, topo, opts.bias_p) if bias else {}
    return Analysis(result, tally, scores, truth, reports, chi)


def _pool_map(fn, items, workers: int = 1) -> list:
    """``map`` over a process pool; results come back in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _quantiles(xs) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(xs, dtype=float), [25, 50, 75])
    return float(q1), float(med), float(q3)


# -- reliability error vs measurement count -------------------------------------

RELIABILITY_COUNTS = (25_000, 50_000, 100_000, 200_000, 400_000)


def reliability_config(measurements: int, seed: int = 1, mode: str = "fast", W: int = 20,
                       p_lot: float = 0.2) -> SimConfig:
    base = SimConfig(W=W, W_G=W, clients=100, p_lot=p_lot, crypto_mode=mode, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return assign_unreliable_profile(base.with_measurements(measurements))


def _reliability_one(cfg: SimConfig) -> list:
    a = analyze(run_epoch(cfg), freeride=False, bias=False)
    return [(n, cfg.behaviors[n].kind if n in cfg.behaviors else "reliable",
             a.truth[n], a.scores.rho(n)) for n in sorted(a.truth)]


@dataclass
class ReliabilityReport:
    rows: list       # (measurements, rep, node, kind, rho_true, rho_hat)
    summary: list    # one dict per measurement count
    checks: list


def reliability_sweep(counts=RELIABILITY_COUNTS, reps: int = 2, seed: int = 1, mode: str = "fast",
                      W: int = 20, p_lot: float = 0.2, workers: int = 1) -> ReliabilityReport:
    """Score error of reliable and unreliable nodes as measurements grow.

    Every count reuses the same seeds, so the node profile and topology
    stay fixed and only the traffic volume changes.  Errors are pooled
    over ``reps`` repetitions before taking quantiles.

    Keep ``p_lot`` small: the truth counts every packet while the estimate
    sees only measurements, and with most packets being measurements the
    sampling error (which scales with 1 - p_lot) vanishes under the fixed
    attribution bias and nothing is left to shrink.
    """
    jobs = [(m, r) for m in counts for r in range(reps)]
    outs = _pool_map(_reliability_one, [reliability_config(m, seed + r, mode, W, p_lot)
                                        for m, r in jobs], workers)
    rows, summary = [], []
    for (m, r), out in zip(jobs, outs):
        rows += [(m, r, n, kind, t, e) for n, kind, t, e in out]
    for m in counts:
        rel = [abs(e - t) for mm, _, _, k, t, e in rows if mm == m and k == "reliable"]
        unrel = [e - t for mm, _, _, k, t, e in rows if mm == m and k != "reliable"]
        q1, med, q3 = _quantiles(unrel)
        summary.append({"measurements": m, "reliable_nodes": len(rel),
                        "reliable_median_abs_err": float(np.median(rel)),
                        "unreliable_nodes": len(unrel), "unreliable_q1": q1,
                        "unreliable_median": med, "unreliable_q3": q3, "unreliable_iqr": q3 - q1})
    # sweeps that stop short of 100k are judged at their largest count
    big = [s for s in summary if s["measurements"] >= 100_000] or summary[-1:]
    at = ">= 100k" if big[0]["measurements"] >= 100_000 else f"{big[0]['measurements']}"
    worst = max((s["reliable_median_abs_err"] for s in big), default=0.0)
    iqr = [s["unreliable_iqr"] for s in summary]
    steps = len(iqr) - 1
    shrinks = sum(b < a for a, b in zip(iqr, iqr[1:]))
    need = max(1, steps - 1)
    checks = [
        Check(f"reliable median |err| < 0.005 at {at}", bool(big) and worst < 0.005,
              f"worst median {worst:.5f} over {len(big)} counts"),
        Check(f"unreliable IQR shrinks in >= {need} of {steps} steps", steps > 0 and shrinks >= need,
              "IQR " + " > ".join(f"{x:.5f}" for x in iqr) + f" ({shrinks} shrinking)"),
    ]
    return ReliabilityReport(rows, summary, checks)


# -- adversarial symmetry -----------------------------------------------------

ADVERSARY_SIZES = (1, 2, 4, 8)


def adversarial_configs(sizes=ADVERSARY_SIZES, measurements: int = 200_000, seed: int = 100,
                        mode: str = "fast", W: int = 20, p_lot: float = 0.8) -> list:
    """One config per (|A|, |T|); placements rotate through the feasible ones."""
    out = []
    i = 0
    for n_a in sizes:
        for n_t in sizes:
            options = feasible_placements(n_a, n_t, W)
            placement = options[i % len(options)]
            base = SimConfig(W=W, W_G=W, clients=100, p_lot=p_lot, crypto_mode=mode, seed=seed + i)
            out.append((n_a, n_t, placement,
                        adversarial_scenario(base.with_measurements(measurements), n_a, n_t, placement)))
            i += 1
    return out


def _adversarial_one(cfg: SimConfig) -> tuple[float, float]:
    a = analyze(run_epoch(cfg), freeride=False, bias=False)
    adv, tgt = attack_sets(cfg)
    return attack_costs(a.scores, adv, tgt)


@dataclass
class AdversarialReport:
    rows: list   # dicts: n_adv, n_targets, placement, c_A, c_T, ratio, ok
    checks: list


def adversarial_suite(sizes=ADVERSARY_SIZES, measurements: int = 200_000, seed: int = 100,
                      mode: str = "fast", W: int = 20, p_lot: float = 0.8,
                      workers: int = 1, min_cost: float = 0.05) -> AdversarialReport:
    runs = adversarial_configs(sizes, measurements, seed, mode, W, p_lot)
    costs = _pool_map(_adversarial_one, [r[3] for r in runs], workers)
    rows = []
    for (n_a, n_t, pl, _), (c_a, c_t) in zip(runs, costs):
        ratio = c_t / c_a if c_a > min_cost else None
        ok = ratio is None or 0.5 <= ratio <= 2.0
        rows.append({"n_adv": n_a, "n_targets": n_t, "placement": pl, "c_A": c_a, "c_T": c_t,
                     "ratio": ratio, "ok": ok})
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    detail = (f"{sum(r['ok'] for r in rows)}/{len(rows)} runs within [1/2, 2]; "
              f"{len(ratios)} with c_A > {min_cost}")
    if ratios:
        detail += f"; ratio min {min(ratios):.3f} median {float(np.median(ratios)):.3f} max {max(ratios):.3f}"
    checks = [Check("c_T / c_A within [1/2, 2] when c_A > 0.05", all(r["ok"] for r in rows), detail)]
    return AdversarialReport(rows, checks)


# -- free riding ----------------------------------------------------------------

FREE_RIDERS = {0.05: 16, 0.20: 3}


def freeride_density(paper_measurements: float = 5e6, paper_width: int = 80) -> float:
    """Measurements per edge between two mix layers in the full-scale regime."""
    return paper_measurements / paper_width ** 2


def freeride_config(epoch: int, seed: int = 200, mode: str = "fast", W: int = 20, p_lot: float = 0.25,
                    density: float = freeride_density(), riders=None) -> SimConfig:
    base = SimConfig(W=W, W_G=W, clients=100, p_lot=p_lot, crypto_mode=mode,
                     seed=seed + epoch, epoch=epoch)
    # every measurement crosses each layer-to-layer cut once, spread over W^2 edges
    base = base.with_measurements(density * W * W)
    return freeride_scenario(base, FREE_RIDERS if riders is None else riders)


def _freeride_one(cfg: SimConfig) -> list:
    """Per checked edge: (pred, succ, rate, legit, injected, h_hat, flag, oracle)."""
    res = run_epoch(cfg)
    a = analyze(res, bias=False)
    gt = res.ground_truth
    rates = free_riders(cfg)
    out = []
    for j in sorted(a.freeride):
        for i, c in sorted(a.freeride[j].incoming.items()):
            inj = gt.injected_on_edge.get((i, j), 0)
            legit = gt.s.get((i, j), 0) - inj
            oracle = flag_probability(legit, inj, cfg.p_lot, DEFAULT_Z, c.h_hat)
            out.append((i, j, rates.get(i, 0.0), legit, inj, c.h_hat, c.flag, oracle))
    return out


@dataclass
class FreerideReport:
    rows: list      # (epoch, pred, succ, rate, legit, injected, h_hat, flag, oracle)
    summary: list   # per injection rate
    checks: list
    density: float


def freeride_suite(epochs: int = 6, seed: int = 200, mode: str = "fast", W: int = 20,
                   p_lot: float = 0.25, density: float = freeride_density(), riders=None,
                   workers: int = 1, oracle_tol: float = 0.02) -> FreerideReport:
    """Detection rate per injection rate, pooled over several epochs.

    Free riders sit in the last mix layer, so every flagged edge ends at an
    exit gateway and honest checks elsewhere see no excess.  Each checked
    edge also carries the exact binomial flag probability given its true
    legitimate and injected volumes.
    """
    cfgs = [freeride_config(e, seed, mode, W, p_lot, density, riders) for e in range(epochs)]
    outs = _pool_map(_freeride_one, cfgs, workers)
    rows = [(e,) + r for e, out in enumerate(outs) for r in out]
    summary = []
    for rate in sorted({r[3] for r in rows}):
        grp = [r for r in rows if r[3] == rate]
        emp = sum(r[7] for r in grp) / len(grp)
        orc = sum(r[8] for r in grp) / len(grp)
        summary.append({"rate": rate, "edges": len(grp), "flagged": emp, "oracle": orc,
                        "diff": emp - orc})
    by = {s["rate"]: s for s in summary}
    checks = []
    if 0.20 in by:
        checks.append(Check("20% injection flagged by >= 90% of successors", by[0.20]["flagged"] >= 0.90,
                            f"{by[0.20]['flagged']:.4f} over {by[0.20]['edges']} edges"))
    if 0.05 in by:
        checks.append(Check("5% injection flagged by <= 30% of successors", by[0.05]["flagged"] <= 0.30,
                            f"{by[0.05]['flagged']:.4f} over {by[0.05]['edges']} edges"))
    if 0.0 in by:
        checks.append(Check("honest false-positive rate <= 1%", by[0.0]["flagged"] <= 0.01,
                            f"{by[0.0]['flagged']:.4f} over {by[0.0]['edges']} edges"))
    worst = max(summary, key=lambda s: abs(s["diff"]))
    checks.append(Check(f"detection within +-{oracle_tol} of the binomial oracle",
                        all(abs(s["diff"]) <= oracle_tol for s in summary),
                        "; ".join(f"{s['rate']:.2f}: {s['flagged']:.4f} vs {s['oracle']:.4f}"
                                  for s in summary) + f" (worst {worst['diff']:+.4f})"))
    return FreerideReport(rows, summary, checks, density)


# -- CSV of suite results -------------------------------------------------------


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.6f}"
    return "" if x is None else str(x)


# -- simulate --------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    name: str = "simulate"
    config: SimConfig = field(default_factory=SimConfig)
    analysis: AnalysisOptions = AnalysisOptions()
    reps: int = 1
    out: str = "out"

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")

    def rep_config(self, rep: int) -> SimConfig:
        return self.config.replace(seed=self.config.seed + rep)

    def to_json(self) -> dict:
        return {"name": self.name, "config": self.config.to_json(),
                "analysis": asdict(self.analysis), "reps": self.reps}


class OutputExists(Exception):
    pass


OUTPUT_FILES = ("link_tally.csv", "node_scores.csv", "link_estimates.csv", "freeride.csv", "bias.csv",
                "gt_edges.csv", "gt_nodes.csv", "events.csv", "costs.csv")


def _write_ground_truth(d: Path, res, rep: int) -> None:
    gt, topo, cfg = res.ground_truth, res.topology, res.config
    with open(d / "gt_edges.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "src", "dst", "stored", "dropped", "dropped_by_receiver", "injected",
                    "beta_true"])
        for e in sorted(set(gt.s) | set(gt.d)):
            b = gt.beta(e)
            w.writerow([rep, e[0], e[1], gt.s.get(e, 0), gt.d.get(e, 0), gt.d_recv.get(e, 0),
                        gt.injected_on_edge.get(e, 0), "" if b is None else f"{b:.6f}"])
    rho = gt.rhos(range(topo.n_nodes))
    flow = gt.flow_conservation(range(topo.n_nodes))
    with open(d / "gt_nodes.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "node", "layer", "behavior", "rho_true", "injected", "received", "sent"])
        for n in range(topo.n_nodes):
            b = cfg.behaviors.get(n)
            w.writerow([rep, n, topo.layer_of(n), b.kind if b else "reliable", f"{rho[n]:.6f}",
                        gt.injected.get(n, 0), flow[n][0], flow[n][1]])
    with open(d / "events.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "emitted", "delivered", "measurements", "injected", "mean_latency_ms"])
        w.writerow([rep, gt.emitted, gt.delivered, len(gt.measurements),
                    sum(gt.injected.values()), f"{1000 * gt.mean_latency:.3f}"])


def _simulate_rep(job) -> None:
    spec, rep, d = job
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    res = run_epoch(spec.rep_config(rep))
    a = analyze(res, spec.analysis)
    write_link_tally_csv(d / "link_tally.csv", a.tally, rep)
    write_node_scores_csv(d / "node_scores.csv", a.scores, rep)
    write_link_estimates_csv(d / "link_estimates.csv", a.scores, rep)
    write_freeride_csv(d / "freeride.csv", a.freeride, rep)
    write_bias_csv(d / "bias.csv", a.bias, rep)
    _write_ground_truth(d, res, rep)
    adv, tgt = attack_sets(res.config)
    if adv:
        c_a, c_t = attack_costs(a.scores, adv, tgt)
        write_rows(d / "costs.csv", ["epoch", "n_adv", "n_targets", "c_A", "c_T"],
                   [(rep, len(adv), len(tgt), c_a, c_t)])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    import scipy
    return {"mixrel": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def simulate(spec: ExperimentSpec, force: bool = False, workers: int = 1) -> dict:
    """Run every repetition, write the CSVs and a manifest; return the manifest.

    Rows of repetition r carry r in their ``epoch`` column and use seed
    ``config.seed + r``.
    """
    out = Path(spec.out)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExists(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    parts = out / ".parts"
    shutil.rmtree(parts, ignore_errors=True)
    jobs = [(spec, r, str(parts / f"{r:04d}")) for r in range(spec.reps)]
    _pool_map(_simulate_rep, jobs, workers)
    written = []
    for name in OUTPUT_FILES:
        pieces = [Path(j[2]) / name for j in jobs if (Path(j[2]) / name).exists()]
        if not pieces:
            (out / name).unlink(missing_ok=True)
            continue
        with open(out / name, "w", encoding="utf-8", newline="") as dst:
            for k, p in enumerate(pieces):
                lines = p.read_text(encoding="utf-8").splitlines(keepends=True)
                dst.writelines(lines if k == 0 else lines[1:])
        written.append(name)
    shutil.rmtree(parts)
    cfg_path = out / "config.json"
    cfg_path.write_text(spec.config.dumps() + "\n", encoding="utf-8")
    manifest = {"schema": 1, **spec.to_json(), "seed": spec.config.seed,
                "config_hash": spec.config.config_hash(), "versions": versions(),
                "files": {n: sha256_file(out / n) for n in ["config.json"] + written}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


def spec_from_manifest(d: dict, out: str) -> ExperimentSpec:
    return ExperimentSpec(d.get("name", "simulate"), SimConfig.from_json(d["config"]),
                          AnalysisOptions(**d.get("analysis", {})), int(d.get("reps", 1)), out)


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))

