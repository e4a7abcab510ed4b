"""Command line: ``mixrel simulate | reproduce | overhead``.

Exit codes: 0 ok, 1 an analysis check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import experiments as ex
from .errors import ConfigInvalid, UnknownFigure
from .overhead import OverheadParams, overhead_table, render, write_overhead_csv
from .sim.config import CRYPTO_MODES, SimConfig

FIGURES = ("fig-reliability", "fig-adversarial", "fig-freeride")

# reduced sizes for --quick smoke runs; thresholds are still evaluated
_QUICK = {
    "fig-reliability": {"counts": (5_000, 10_000, 20_000)},
    "fig-adversarial": {"sizes": (1, 4), "measurements": 20_000},
    "fig-freeride": {"epochs": 1, "budgets": (5e6,)},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixrel", description="Mixnet reliability measurement: simulation and analysis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run epochs and write CSVs plus a manifest")
    s.add_argument("--config", help="SimConfig JSON, or a manifest.json from an earlier run")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--out", default="out", help="output directory (default: out)")
    s.add_argument("--mode", choices=CRYPTO_MODES, help="crypto mode (default: from config)")
    s.add_argument("--reps", type=int, help="repetitions; rep r uses seed + r")
    s.add_argument("--scheme", choices=("naive", "symmetric", "threshold"), help="drop attribution scheme")
    s.add_argument("--Z", type=float, help="confidence multiplier")
    s.add_argument("--tau", type=float, help="reliability threshold for the medians")
    s.add_argument("--workers", type=int, default=1, help="worker processes")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    r = sub.add_parser("reproduce", help="run a desk-scale experiment suite and check its thresholds")
    r.add_argument("figure", help=" | ".join(FIGURES))
    r.add_argument("--seed", type=int, help="base seed")
    r.add_argument("--mode", choices=CRYPTO_MODES, help="crypto mode")
    r.add_argument("--out", help="write result CSVs to this directory")
    r.add_argument("--workers", type=int, default=1, help="worker processes")
    r.add_argument("--quick", action="store_true", help="much smaller smoke-test version")

    o = sub.add_parser("overhead", help="storage overhead of one epoch")
    o.add_argument("--implementation", action="store_true",
                   help="use this implementation's item sizes instead of the reference sizes")
    o.add_argument("--csv", help="also write the table as CSV")
    for name, default in vars(OverheadParams()).items():
        o.add_argument(f"--{name.replace('_', '-')}", type=int, dest=name, help=f"default {default}")
    return p


# -- simulate ------------------------------------------------------------------------


def _load_spec(args) -> ex.ExperimentSpec:
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{args.config}: {exc}") from exc
        if isinstance(doc, dict) and "files" in doc and "config" in doc:
            spec = ex.spec_from_manifest(doc, args.out)
        else:
            spec = ex.ExperimentSpec(config=SimConfig.from_json(doc), out=args.out)
    else:
        spec = ex.ExperimentSpec(out=args.out)
    cfg = spec.config
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.mode:
        cfg = cfg.replace(crypto_mode=args.mode)
    opts = spec.analysis
    over = {k: v for k, v in (("scheme", args.scheme), ("Z", args.Z), ("tau", args.tau)) if v is not None}
    if over:
        opts = ex.AnalysisOptions(**{**vars(opts), **over})
    reps = spec.reps if args.reps is None else args.reps
    if reps < 1:
        raise ConfigInvalid("--reps must be at least 1")
    return ex.ExperimentSpec(spec.name, cfg, opts, reps, args.out)


def cmd_simulate(args) -> int:
    try:
        spec = _load_spec(args)
    except (ConfigInvalid, OSError) as exc:
        print(f"mixrel simulate: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        manifest = ex.simulate(spec, force=args.force, workers=args.workers)
    except ex.OutputExists as exc:
        print(f"mixrel simulate: {exc}", file=sys.stderr)
        return 2
    print(f"{spec.reps} epoch(s), config {manifest['config_hash']}, seed {manifest['seed']}, "
          f"{time.perf_counter() - t0:.1f}s -> {spec.out}")
    for name, digest in manifest["files"].items():
        print(f"  {name}  {digest[:16]}")
    return 0


# -- reproduce -------------------------------------------------------------------------


def _kw(args, **extra) -> dict:
    kw = dict(extra)
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.mode:
        kw["mode"] = args.mode
    kw["workers"] = args.workers
    return kw


def _reliability(args, out):
    rep = ex.reliability_sweep(**_kw(args, **(_QUICK["fig-reliability"] if args.quick else {})))
    print(f"{'measurements':>12}  {'reliable med|err|':>17}  {'unrel q1':>9}  {'unrel med':>9}  "
          f"{'unrel q3':>9}  {'unrel IQR':>9}")
    for s in rep.summary:
        print(f"{s['measurements']:>12}  {s['reliable_median_abs_err']:>17.5f}  {s['unreliable_q1']:>9.5f}  "
              f"{s['unreliable_median']:>9.5f}  {s['unreliable_q3']:>9.5f}  {s['unreliable_iqr']:>9.5f}")
    if out:
        ex.write_rows(out / "reliability_errors.csv",
                      ["measurements", "rep", "node", "behavior", "rho_true", "rho_hat"], rep.rows)
        keys = list(rep.summary[0])
        ex.write_rows(out / "reliability_summary.csv", keys, [[s[k] for k in keys] for s in rep.summary])
    return rep.checks


def _adversarial(args, out):
    rep = ex.adversarial_suite(**_kw(args, **(_QUICK["fig-adversarial"] if args.quick else {})))
    print(f"{'|A|':>4} {'|T|':>4}  {'placement':<19} {'c_A':>8} {'c_T':>8} {'c_T/c_A':>8}")
    for r in rep.rows:
        ratio = "-" if r["ratio"] is None else f"{r['ratio']:.3f}"
        print(f"{r['n_adv']:>4} {r['n_targets']:>4}  {r['placement']:<19} {r['c_A']:>8.3f} "
              f"{r['c_T']:>8.3f} {ratio:>8}")
    if out:
        keys = list(rep.rows[0])
        ex.write_rows(out / "adversarial_costs.csv", keys, [[r[k] for k in keys] for r in rep.rows])
    return rep.checks


def _freeride(args, out):
    quick = _QUICK["fig-freeride"] if args.quick else {}
    budgets = quick.get("budgets", (1e6, 5e6))
    checks = []
    print(f"{'budget':>8} {'rate':>6} {'edges':>6} {'flagged':>8} {'oracle':>8}")
    for budget in budgets:
        kw = _kw(args, density=ex.freeride_density(budget))
        if "epochs" in quick:
            kw["epochs"] = quick["epochs"]
        rep = ex.freeride_suite(**kw)
        label = f"{budget / 1e6:g}M"
        for s in rep.summary:
            print(f"{label:>8} {s['rate']:>6.2f} {s['edges']:>6} {s['flagged']:>8.4f} {s['oracle']:>8.4f}")
        if out:
            ex.write_rows(out / f"freeride_edges_{label}.csv",
                          ["epoch", "pred", "succ", "rate", "legit", "injected", "h_hat", "flag", "oracle"],
                          rep.rows)
        # thresholds apply to the 5M-equivalent density only
        if budget == 5e6:
            checks += [ex.Check(f"[{label}] {c.name}", c.passed, c.detail) for c in rep.checks]
    return checks


def cmd_reproduce(args) -> int:
    runners = {"fig-reliability": _reliability, "fig-adversarial": _adversarial,
               "fig-freeride": _freeride}
    if args.figure not in runners:
        err = UnknownFigure(f"unknown figure {args.figure!r}; choose from {', '.join(FIGURES)}")
        print(f"mixrel reproduce: {err.args[0]}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    checks = runners[args.figure](args, out)
    print(f"({time.perf_counter() - t0:.0f}s{', quick' if args.quick else ''})")
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


# -- overhead --------------------------------------------------------------------------


def cmd_overhead(args) -> int:
    base = OverheadParams.from_implementation() if args.implementation else OverheadParams()
    over = {k: getattr(args, k) for k in vars(base) if getattr(args, k) is not None}
    params = OverheadParams(**{**vars(base), **over})
    rows = overhead_table(params)
    print(render(rows))
    if args.csv:
        write_overhead_csv(args.csv, rows)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return {"simulate": cmd_simulate, "reproduce": cmd_reproduce, "overhead": cmd_overhead}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
