"""Command-line surface: simulate, fit, summarize, ppc, baseline.

Defaults are the paper-shaped run (82 patients, 4 chains, 600 warmup, 900
draws, 95% HDR, 200 predictive draws), every subcommand takes its
randomness from one required --seed, and each writes a run manifest next
to its primary outputs.  Exit codes: 0 success, 2 input/validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .cohort import Cohort, CohortError, load_cohort, save_cohort
from .diagnostics import (
    baseline_tests,
    fit_report,
    forest_rows,
    posterior_predictive,
    write_forest_csv,
)
from .model import ModelSpec
from .pipeline import fit_cohort
from .sampler import NutsConfig, PosteriorDraws, SamplerError
from .simulate import SimTruth, default_truth, simulate_cohort, write_hidden_truth_csv

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


@dataclass
class RunManifest:
    """Audit record of one subcommand run; config round-trips a rerun."""

    subcommand: str
    version: str
    config: dict
    seed: int
    inputs: list
    outputs: list
    wall_clock_s: float
    divergences: dict = None
    extras: dict = field(default_factory=dict)

    def write(self, path) -> None:
        doc = asdict(self)
        doc["outputs"] = sorted(str(p) for p in doc["outputs"])
        doc["inputs"] = [str(p) for p in doc["inputs"]]
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _sibling(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _load_truth(spec_arg: str) -> SimTruth:
    if spec_arg == "default":
        return default_truth()
    try:
        text = Path(spec_arg).read_text()
    except OSError as exc:
        raise CohortError(f"cannot read truth file {spec_arg}: {exc}")
    try:
        return SimTruth.from_json(text)
    except (ValueError, TypeError, KeyError) as exc:
        raise CohortError(f"invalid truth JSON {spec_arg}: {exc}")


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    truth = _load_truth(args.truth)
    cohort, hidden = simulate_cohort(truth, args.n, args.seed)
    out = Path(args.out)
    truth_path = _sibling(out, ".truth.json")
    hidden_path = _sibling(out, ".hidden_truth.csv")
    manifest_path = _sibling(out, ".manifest.json")
    save_cohort(cohort, out)
    truth_path.write_text(truth.to_json() + "\n")
    write_hidden_truth_csv(hidden, hidden_path)
    RunManifest(
        subcommand="simulate",
        version=__version__,
        config={"n": args.n, "seed": args.seed, "truth": args.truth,
                "out": str(out)},
        seed=args.seed,
        inputs=[] if args.truth == "default" else [args.truth],
        outputs=[out, truth_path, hidden_path],
        wall_clock_s=time.perf_counter() - t0,
    ).write(manifest_path)
    print(f"wrote {out} ({cohort.n} rows), {truth_path}, {hidden_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    cohort = load_cohort(args.data)
    config = NutsConfig(seed=args.seed, chains=args.chains, warmup=args.warmup,
                        samples=args.samples, target_accept=args.target_accept,
                        max_tree_depth=args.max_tree_depth)
    fit = fit_cohort(cohort, config)
    out = Path(args.out)
    paths = {
        "posterior_ndjson": out.with_name(out.name + ".posterior.ndjson"),
        "posterior_csv": out.with_name(out.name + ".posterior.csv"),
        "model": out.with_name(out.name + ".model.json"),
        "transforms": out.with_name(out.name + ".transforms.json"),
    }
    fit.draws.write_ndjson(paths["posterior_ndjson"])
    fit.draws.write_csv(paths["posterior_csv"])
    paths["model"].write_text(fit.spec.to_json() + "\n")
    paths["transforms"].write_text(json.dumps(
        [t.to_dict() for t in fit.transforms], indent=2) + "\n")
    report = fit_report(fit.draws)
    manifest = RunManifest(
        subcommand="fit",
        version=__version__,
        config={"data": str(args.data), "out": str(out), **config.to_dict()},
        seed=args.seed,
        inputs=[args.data],
        outputs=list(paths.values()),
        wall_clock_s=time.perf_counter() - t0,
        divergences={"count": fit.draws.divergence_count,
                     "rate": fit.draws.divergence_rate},
        extras={"max_rhat": report.max_rhat,
                "rhat_available": fit.draws.n_chains >= 2},
    )
    manifest.write(out.with_name(out.name + ".manifest.json"))
    rhat_txt = ("unavailable (needs >= 2 chains)" if report.max_rhat is None
                else f"{report.max_rhat:.4f}")
    print(f"fit complete: max split-Rhat {rhat_txt}, "
          f"divergences {fit.draws.divergence_count}"
          f" ({100 * fit.draws.divergence_rate:.2f}%)")
    return EXIT_OK


def cmd_summarize(args) -> int:
    t0 = time.perf_counter()
    if not 0.0 < args.hdr < 1.0:
        raise CohortError(f"--hdr must be in (0, 1), got {args.hdr}")
    draws = PosteriorDraws.read_ndjson(args.posterior)
    rows = forest_rows(draws, mass=args.hdr)
    write_forest_csv(rows, args.out)
    RunManifest(
        subcommand="summarize",
        version=__version__,
        config={"posterior": str(args.posterior), "hdr": args.hdr,
                "out": str(args.out)},
        seed=-1,
        inputs=[args.posterior],
        outputs=[args.out],
        wall_clock_s=time.perf_counter() - t0,
        extras={"n_coefficients": len(rows)},
    ).write(_sibling(args.out, ".manifest.json"))
    n_sig = sum(r["significant"] for r in rows)
    print(f"wrote {args.out}: {len(rows)} coefficients, {n_sig} significant "
          f"at {args.hdr:.0%} HDR")
    return EXIT_OK


def cmd_ppc(args) -> int:
    t0 = time.perf_counter()
    draws = PosteriorDraws.read_ndjson(args.posterior)
    cohort = load_cohort(args.data)
    from .cohort import preprocess_outcomes

    prepared, _ = preprocess_outcomes(cohort)
    ppc = posterior_predictive(draws, prepared, n_rep=args.draws,
                               seed=args.seed)
    ppc.write_csv(args.out)
    RunManifest(
        subcommand="ppc",
        version=__version__,
        config={"posterior": str(args.posterior), "data": str(args.data),
                "draws": args.draws, "seed": args.seed, "out": str(args.out)},
        seed=args.seed,
        inputs=[args.posterior, args.data],
        outputs=[args.out],
        wall_clock_s=time.perf_counter() - t0,
        extras={"clamped_replicates": ppc.clamped},
    ).write(_sibling(args.out, ".manifest.json"))
    print(f"wrote {args.out}: 6 channels x ({args.draws} replicates + observed)")
    return EXIT_OK


def cmd_baseline(args) -> int:
    t0 = time.perf_counter()
    cohort = load_cohort(args.data)
    results = baseline_tests(cohort)
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    RunManifest(
        subcommand="baseline",
        version=__version__,
        config={"data": str(args.data), "out": str(args.out)},
        seed=-1,
        inputs=[args.data],
        outputs=[args.out],
        wall_clock_s=time.perf_counter() - t0,
    ).write(_sibling(args.out, ".manifest.json"))
    for name, res in results["outcomes"].items():
        print(f"{name}: p = {res['p']:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prombayes",
        description="Confounder-adjusted Bayesian analysis of labor-induction "
                    "outcomes on synthetic cohorts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, default=82)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--truth", default="default",
                   help="'default' or a truth JSON path")
    p.add_argument("--out", required=True, help="cohort CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the hierarchical model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=600)
    p.add_argument("--samples", type=int, default=900)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--max-tree-depth", type=int, default=10)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="forest-plot data from a posterior")
    p.add_argument("--posterior", required=True, help="posterior NDJSON path")
    p.add_argument("--hdr", type=float, default=0.95)
    p.add_argument("--out", required=True, help="forest CSV path")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("ppc", help="posterior predictive check histograms")
    p.add_argument("--posterior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--draws", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="PPC long CSV path")
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("baseline", help="naive by-arm frequentist tests")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="baseline JSON path")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CohortError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SamplerError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
