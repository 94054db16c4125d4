#!/usr/bin/env python3
"""
tadlp: TAD calling with an interval linear program

Subcommands:
    call          Hierarchical TAD calling for one cell type
    call-joint    Conserved TADs across cell types, plus conserved/specific tables
    simulate      Saturation curve and signal-to-noise benchmark on synthetic data
    test-region   Post-test one user-supplied interval
    compare       Count matched calls between two TAD tables

Usage:
    python tadlp.py call --matrix chr21.tsv --bed ctcf.bed --region chr21:0-48000000 --out results/chr21
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.config.config_loader import RunConfig, load_config
from src.core import posttest
from src.core.hierarchy import (TadCall, TadTree, call_tads_hierarchical, call_tads_joint, classify_conserved,
                                classify_specific, match_call_sets)
from src.core.lpopt import saturation_curve
from src.data.contact_data import (ContactMatrix, CovariateVector, kr_balance, load_contact_matrix,
                                   load_ctcf_bed, stack_contacts)
from src.sim.simulate import (DEFAULT_R_VALUES, SITE_LAYOUTS, run_snr_sweep, sample_block_adjacency,
                              simulation_covariates, three_tad_spec)
from src.utils.errors import ConfigError, TadlpError
from src.utils.run_logger import SolveLogger, setup_logging
from src.utils.sweep_tracker import SweepTracker
from src.utils.tad_io import TadRecord, read_tads, write_manifest, write_tads

__version__ = "0.1.0"

logger = logging.getLogger("tadlp.cli")


# ---------------------------------------------------------------------------
# Loading helpers
# ---------------------------------------------------------------------------

def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_cell(config: RunConfig, matrix_path: str, bed_path: str) -> Tuple[ContactMatrix, CovariateVector]:
    _require_file(matrix_path, "contact matrix file")
    _require_file(bed_path, "covariate file")
    region = config.region_tuple
    M = load_contact_matrix(matrix_path, config.resolution, region)
    if config.normalize:
        M = kr_balance(M)
    Y = load_ctcf_bed(bed_path, config.resolution, region)
    logger.info(f"Loaded {matrix_path}: {M.n} bins, {Y.positions.size} CTCF bins")
    return M, Y


def _flat_records(calls: Sequence[TadCall], chrom: str, resolution: int, offset: int) -> List[TadRecord]:
    return [
        TadRecord(chrom=chrom, start_bp=offset + c.a * resolution, end_bp=offset + (c.b + 1) * resolution,
                  level=c.level, pvalue=c.pvalue, cell_type=c.cell_type, parent_id=None, id=number,
                  qvalue=c.qvalue)
        for number, c in enumerate(sorted(calls, key=lambda c: (c.cell_type, c.interval)), start=1)
    ]


def _manifest(config: RunConfig, command: str, solve_logger: Optional[SolveLogger],
              outputs: List[str], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    manifest = {
        "version": __version__,
        "command": command,
        "config": config.to_dict(),
        "outputs": outputs,
    }
    if solve_logger is not None:
        manifest["run_id"] = solve_logger.run_id
        manifest["convergence"] = solve_logger.summary()
        manifest["non_converged"] = solve_logger.non_converged()
    if extra:
        manifest.update(extra)
    return manifest


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_call(config: RunConfig) -> int:
    """Call a TAD hierarchy for one contact matrix and write <out>.tads.tsv plus the manifest"""
    if len(config.matrices) != 1:
        raise ConfigError("call needs exactly one --matrix and one --bed")
    if config.region is None:
        raise ConfigError("region: --region chrom:start-end is required")

    M, Y = _load_cell(config, config.matrices[0], config.beds[0])
    label = config.cell_labels()[0]
    solve_logger = SolveLogger(log_dir=config.log_dir)
    tree = call_tads_hierarchical(M, Y, cell_type=label, solve_logger=solve_logger, **config.calling_kwargs())

    tads_path = write_tads(tree.to_records(M.chrom, M.resolution, M.region_offset), f"{config.out}.tads.tsv")
    manifest_path = f"{config.out}.manifest.json"
    write_manifest(_manifest(config, "call", solve_logger, [tads_path, manifest_path],
                             {"dropped_entries": {label: M.dropped_entries}}), manifest_path)

    print(f"{len(tree.level_calls(1))} level-1 TADs, {len(tree)} in total -> {tads_path}")
    if solve_logger.non_converged():
        print(f"Warning: {len(solve_logger.non_converged())} solves did not converge (see manifest)")
    return 0


def cmd_call_joint(config: RunConfig) -> int:
    """Joint calling plus per-cell calls and the conserved/specific tables"""
    if len(config.matrices) < 2:
        raise ConfigError("joint requires ≥2 cell types")
    if config.region is None:
        raise ConfigError("region: --region chrom:start-end is required")

    labels = config.cell_labels()
    if len(set(labels)) != len(labels):
        raise ConfigError(f"labels: cell-type labels must be distinct, got {labels}")
    cells = [_load_cell(config, m, b) for m, b in zip(config.matrices, config.beds)]
    Ms = [M for M, _ in cells]
    Ys = [Y for _, Y in cells]
    stack_contacts(Ms)
    first = Ms[0]

    solve_logger = SolveLogger(log_dir=config.log_dir)
    kwargs = config.calling_kwargs()
    joint = call_tads_joint(Ms, Ys, labels=labels, solve_logger=solve_logger, **kwargs)
    per_cell: Dict[str, TadTree] = {
        label: call_tads_hierarchical(M, Y, cell_type=label, solve_logger=solve_logger, **kwargs)
        for label, (M, Y) in zip(labels, cells)
    }

    base_calls = {label: tree.level_calls(1) for label, tree in per_cell.items()}
    conserved = classify_conserved(joint.level_calls(1), base_calls, config.conserved_j)
    specific = classify_specific(base_calls, config.specific_j)

    chrom, resolution, offset = first.chrom, first.resolution, first.region_offset
    outputs = [write_tads(joint.to_records(chrom, resolution, offset), f"{config.out}.joint.tsv")]
    for label, tree in per_cell.items():
        outputs.append(write_tads(tree.to_records(chrom, resolution, offset), f"{config.out}.{label}.tsv"))
    outputs.append(write_tads(_flat_records(conserved, chrom, resolution, offset), f"{config.out}.conserved.tsv"))
    specific_calls = [c for calls in specific.values() for c in calls]
    outputs.append(write_tads(_flat_records(specific_calls, chrom, resolution, offset), f"{config.out}.specific.tsv"))

    manifest_path = f"{config.out}.manifest.json"
    extra = {
        "dropped_entries": {label: M.dropped_entries for label, M in zip(labels, Ms)},
        "conserved": len(conserved),
        "specific": {label: len(calls) for label, calls in specific.items()},
    }
    write_manifest(_manifest(config, "call-joint", solve_logger, outputs + [manifest_path], extra), manifest_path)

    print(f"{len(joint.level_calls(1))} joint level-1 TADs, {len(conserved)} conserved")
    for label, calls in specific.items():
        print(f"  {label}: {len(base_calls[label])} level-1 TADs, {len(calls)} specific")
    return 0


def cmd_simulate(config: RunConfig, experiment: str, r_values: Optional[Sequence[float]] = None,
                 n_seeds: int = 30, sweep_k: int = 5, sites: str = "boundaries") -> int:
    """Write the saturation curve or the SNR sweep as TSV"""
    path = f"{config.out}.tsv"
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    if experiment == "saturation":
        spec = three_tad_spec(seed=config.seed)
        A = sample_block_adjacency(spec)
        curve = saturation_curve(A, simulation_covariates(spec, sites), range(1, 31), beta0=config.beta0)
        pd.DataFrame(curve, columns=["K", "selected"]).to_csv(path, sep="\t", index=False)
        print(f"Saturation curve for K=1..30 -> {path} (K=30 selects {curve[-1][1]})")
        outputs = [path]
    elif experiment == "snr-sweep":
        tracker = SweepTracker()
        seeds = list(range(config.seed, config.seed + n_seeds))
        run_snr_sweep(r_values or DEFAULT_R_VALUES, seeds, K=sweep_k, threads=config.threads, tracker=tracker,
                      sites=sites)
        summary_path = f"{config.out}.summary.tsv"
        tracker.save(path, summary_path)
        print(tracker.summary().to_string(index=False))
        outputs = [path, summary_path]
    else:
        raise ConfigError(f"unknown simulation: {experiment}")

    manifest_path = f"{config.out}.manifest.json"
    write_manifest(_manifest(config, f"simulate {experiment}", None, outputs + [manifest_path], {"sites": sites}),
                   manifest_path)
    return 0


def _bin_of(bp: int, config: RunConfig, what: str) -> int:
    _, start, _ = config.region_tuple
    if bp % config.resolution:
        raise ConfigError(f"{what}: {bp} is not aligned to resolution {config.resolution}")
    return (bp - start) // config.resolution


def cmd_test_region(config: RunConfig, start_bp: int, end_bp: int,
                    parent_start: Optional[int] = None, parent_end: Optional[int] = None) -> int:
    """Post-test [start_bp, end_bp) and print the result"""
    if len(config.matrices) != 1:
        raise ConfigError("test-region needs exactly one --matrix")
    if config.region is None:
        raise ConfigError("region: --region chrom:start-end is required")
    _require_file(config.matrices[0], "contact matrix file")
    M = load_contact_matrix(config.matrices[0], config.resolution, config.region_tuple)
    if config.normalize:
        M = kr_balance(M)

    call = TadCall(a=_bin_of(start_bp, config, "start"), b=_bin_of(end_bp, config, "end") - 1)
    bounds = None
    if parent_start is not None and parent_end is not None:
        bounds = (_bin_of(parent_start, config, "parent start"), _bin_of(parent_end, config, "parent end") - 1)
    result = posttest.test_tad(M, call, bounds)

    print("statistic\tpvalue\tn1\tn2\tmethod")
    print(f"{result.statistic:g}\t{result.pvalue:.6g}\t{result.n1}\t{result.n2}\t{result.method}")
    verdict = "retained" if result.pvalue < config.p_cutoff else "discarded"
    print(f"{verdict} at p < {config.p_cutoff}")
    return 0


def cmd_compare(tads_a: str, tads_b: str, j_threshold: float = 0.7, level: int = 1) -> int:
    """Print how many calls of the first table have a partner in the second"""
    for path in (tads_a, tads_b):
        _require_file(path, "TAD table")

    def intervals(path: str):
        return [(r.start_bp, r.end_bp - 1) for r in read_tads(path) if r.level == level]

    summary = match_call_sets(intervals(tads_a), intervals(tads_b), j_threshold)
    print("n_a\tn_b\tmatched")
    print(f"{summary.n_a}\t{summary.n_b}\t{summary.matched}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML defaults (default: ./config.yaml if present)")
    common.add_argument("--matrix", action="append", default=None, help="Contact matrix TSV (repeat for joint)")
    common.add_argument("--bed", action="append", default=None, help="CTCF peak BED (one per matrix)")
    common.add_argument("--label", action="append", default=None, help="Cell-type label (one per matrix)")
    common.add_argument("--resolution", type=int, default=None, help="Bin size in bp")
    common.add_argument("--region", type=str, default=None, help="chrom:start-end, aligned to the resolution")
    common.add_argument("--levels", type=int, default=None)
    common.add_argument("--q", type=float, action="append", default=None, help="Threshold quantile per level")
    common.add_argument("--K", type=int, default=None, help="Cardinality bound per solve")
    common.add_argument("--beta0", type=float, default=None)
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("--max-iter", type=int, default=None)
    common.add_argument("--window", type=int, default=None)
    common.add_argument("--overlap", type=int, default=None)
    common.add_argument("--jaccard-merge", type=float, default=None)
    common.add_argument("--conserved-j", type=float, default=None)
    common.add_argument("--specific-j", type=float, default=None)
    common.add_argument("--p-cutoff", type=float, default=None)
    common.add_argument("--fdr", action="store_true", default=None, help="Retain by BH-adjusted p-values")
    common.add_argument("--raw", action="store_true", help="Skip Knight-Ruiz balancing")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="Worker threads for window solves and sweeps")
    common.add_argument("--out", type=str, default=None, help="Output prefix")
    common.add_argument("--log-dir", type=str, default=None)
    common.add_argument("--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(description="TAD calling with an interval linear program")
    parser.add_argument("--version", action="version", version=f"tadlp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("call", parents=[common], help="Hierarchical TAD calling for one cell type")
    sub.add_parser("call-joint", parents=[common], help="Joint calling across cell types")

    simulate = sub.add_parser("simulate", parents=[common], help="Synthetic experiments")
    simulate.add_argument("experiment", choices=["saturation", "snr-sweep"])
    simulate.add_argument("--r", type=float, action="append", default=None, help="Ratio alpha/beta (repeatable)")
    simulate.add_argument("--seeds", type=int, default=30, help="Seeds per ratio")
    simulate.add_argument("--sweep-K", type=int, default=5, help="Cardinality bound for the sweep")
    simulate.add_argument("--sites", choices=SITE_LAYOUTS, default="boundaries",
                          help="CTCF sites at the planted segment ends or at every bin")

    test_region = sub.add_parser("test-region", parents=[common], help="Post-test one interval")
    test_region.add_argument("--start", type=int, required=True, help="Interval start (bp)")
    test_region.add_argument("--end", type=int, required=True, help="Interval end (bp, exclusive)")
    test_region.add_argument("--parent-start", type=int, default=None)
    test_region.add_argument("--parent-end", type=int, default=None)

    compare = sub.add_parser("compare", help="Match calls between two TAD tables")
    compare.add_argument("tads_a")
    compare.add_argument("tads_b")
    compare.add_argument("--j-threshold", type=float, default=0.7)
    compare.add_argument("--level", type=int, default=1)
    compare.add_argument("--log-dir", type=str, default="logs")
    compare.add_argument("--verbose", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Overlay command-line values on the YAML defaults and validate"""
    if args.config is not None:
        defaults = load_config(args.config)
    elif os.path.isfile("config.yaml"):
        defaults = load_config("config.yaml")
    else:
        defaults = {}

    overrides = {
        "matrices": args.matrix,
        "beds": args.bed,
        "labels": args.label,
        "resolution": args.resolution,
        "region": args.region,
        "levels": args.levels,
        "qs": args.q,
        "K": args.K,
        "beta0": args.beta0,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "window": args.window,
        "overlap": args.overlap,
        "jaccard_merge": args.jaccard_merge,
        "conserved_j": args.conserved_j,
        "specific_j": args.specific_j,
        "p_cutoff": args.p_cutoff,
        "fdr": args.fdr,
        "normalize": False if args.raw else None,
        "seed": args.seed,
        "threads": args.threads,
        "out": args.out,
        "log_dir": args.log_dir,
    }
    config = RunConfig.from_sources(defaults, overrides)
    # --levels without --q: reuse the configured quantiles, repeating the last
    if args.q is None and len(config.qs) != config.levels:
        config.qs = (config.qs + [config.qs[-1]] * config.levels)[:config.levels]
    return config.validate(require_beds=args.command in ("call", "call-joint"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    log_dir = args.log_dir or "logs"
    setup_logging(log_dir, level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        if args.command == "compare":
            return cmd_compare(args.tads_a, args.tads_b, args.j_threshold, args.level)

        config = config_from_args(args)
        logger.info(f"tadlp {__version__}: {args.command}")
        if args.command == "call":
            return cmd_call(config)
        if args.command == "call-joint":
            return cmd_call_joint(config)
        if args.command == "simulate":
            return cmd_simulate(config, args.experiment, args.r, args.seeds, args.sweep_K, args.sites)
        if args.command == "test-region":
            return cmd_test_region(config, args.start, args.end, args.parent_start, args.parent_end)
        raise ConfigError(f"unknown command: {args.command}")
    except (TadlpError, FileNotFoundError) as e:
        logger.error(str(e))
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
