"""Command line interface for fmri_semipar."""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.linalg import LinAlgError

from .config import (
    DEFAULT_ALPHA,
    DEFAULT_FDR_LEVEL,
    DEFAULT_HRF_LENGTH,
    DEFAULT_KERNEL,
    DEFAULT_NOISE_G,
    DEFAULT_NOISE_ITERS,
    DRIFT_BANDWIDTH_FACTOR,
    LOG_FILE,
    LOG_LEVEL_ENV,
    SIMULATION_NOISE_G,
    ensure_app_dirs,
    load_config_file,
)
from .design import StimulusGrid, assemble_design, decimation_for, design_validity_check, subsample_rows
from .errors import FmriSemiparError, InputFormatError
from .formats import (
    PVALUE_COLUMNS,
    grid_to_series,
    read_fmrb1,
    read_results_csv,
    read_series_csv,
    read_stimulus_csv,
    write_fmrb1,
    write_qvalue_csv,
    write_results_csv,
    write_series_csv,
    write_sidecar,
    write_stimulus_csv,
    write_table_csv,
)
from .inference import asymptotic_power
from .montecarlo import kolmogorov_distance, run_qq_study, score_detection
from .pipeline import STATUS_FAILED, STATUS_OK, ActivationPipeline, PipelineConfig
from .sim import NOISE_LEVELS, VoxelSimConfig, canonical_hrf, example_regions, gen_brain, gen_voxel
from .smoother import KERNELS, bandwidth_from_seconds
from .stats import PValueSet, bh_fdr

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
PROG = "fmri_semipar"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False) -> None:
    ensure_app_dirs()
    handlers: list[logging.Handler] = [
        logging.FileHandler(LOG_FILE, encoding="utf-8"),
        logging.StreamHandler(sys.stderr),
    ]
    level = os.environ.get(LOG_LEVEL_ENV, "DEBUG" if verbose else "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
    )


def main(argv: Iterable[str] | None = None) -> int:
    argv = list(argv) if argv is not None else sys.argv[1:]
    parser, leaves = build_parser()
    _apply_config_file(parser, leaves, argv)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    setup_logging(verbose=args.verbose)
    invocation = shlex.join([PROG, *argv])

    try:
        if args.command == "simulate":
            _require_directory(parser, args.out)
            if args.target == "voxel":
                return cmd_simulate_voxel(args, invocation)
            return cmd_simulate_brain(args, invocation)

        if args.command == "fit":
            return cmd_fit(parser, args, invocation)

        if args.command == "map":
            return cmd_map(args, invocation)

        if args.command == "qq":
            return cmd_qq(args, invocation)

        if args.command == "power":
            return cmd_power(args, invocation)
    except LinAlgError as exc:
        print(f"Numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputFormatError, ValueError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FmriSemiparError as exc:
        print(f"Numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    parser.print_help()
    return EXIT_USAGE


def _require_directory(parser: argparse.ArgumentParser, directory: str) -> Path:
    path = Path(directory).expanduser()
    if not path.is_dir():
        parser.error(f"Output directory {path} does not exist")
    return path


def _int_list(raw: str) -> list[int]:
    try:
        return [int(piece) for piece in raw.split(",") if piece.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from exc


def _float_list(raw: str) -> list[float]:
    try:
        return [float(piece) for piece in raw.split(",") if piece.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from exc


def _bandwidth(raw: str) -> float | None:
    if raw.strip().lower() == "auto":
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a number or auto, got {raw!r}") from exc


def _contrast(raw: str) -> tuple[int, int]:
    values = _int_list(raw)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"contrast needs two stimulus indices j1,j2, got {raw!r}")
    return values[0], values[1]


def cmd_simulate_voxel(args: argparse.Namespace, invocation: str) -> int:
    out = Path(args.out).expanduser()
    h = args.hrf_scale * canonical_hrf(args.m) if args.hrf_scale else None
    config = VoxelSimConfig(
        n=args.n,
        m=args.m,
        stimulus_p=args.stimulus_p,
        noise_variance=NOISE_LEVELS[args.snr],
        snr_target=args.snr_target,
        h_profile=tuple(h) if h is not None else None,
        seed=args.seed,
    )
    y, truth = gen_voxel(config)
    stimulus_path = write_stimulus_csv(
        out / "stimulus.csv", StimulusGrid.from_trains([truth.stimulus[:, 0]]), invocation
    )
    series_path = write_series_csv(out / "series.csv", y, ["voxel0"], invocation=invocation)
    truth_path = write_sidecar(
        out / "truth.json",
        {
            "invocation": invocation,
            "seed": args.seed,
            "tr": 1.0,
            "stimulus": stimulus_path.name,
            "series": series_path.name,
            "n": args.n,
            "m": args.m,
            "h": truth.h.tolist(),
            "gamma": truth.gamma.tolist(),
            "noise_variance": truth.noise_variance,
            "rho": config.rho,
            "snr": truth.snr,
        },
    )
    print(f"Wrote {stimulus_path}, {series_path}, {truth_path}")
    return EXIT_OK


def cmd_simulate_brain(args: argparse.Namespace, invocation: str) -> int:
    out = Path(args.out).expanduser()
    dims = tuple(args.dims)
    if len(dims) != 3:
        raise InputFormatError(f"--dims needs three sizes, got {args.dims}")
    regions = example_regions(dims, tuple(args.scales)) if args.regions == "example" else []
    brain = gen_brain(
        dims,
        args.nt,
        regions,
        seed=args.seed,
        m=args.m,
        hrf_amplitude=args.hrf_amplitude,
    )
    grid_path = write_fmrb1(out / "brain.fmrb", brain.data)
    mask_path = write_fmrb1(out / "truth.fmrb", brain.truth_mask[..., None].astype(np.float32))
    stimulus_path = write_stimulus_csv(out / "stimulus.csv", StimulusGrid.from_trains([brain.stimulus]), invocation)
    sidecar = write_sidecar(
        out / "brain.json",
        {
            "invocation": invocation,
            "tr": 1.0,
            "stimulus": stimulus_path.name,
            "truth_mask": mask_path.name,
            "seed": args.seed,
            "dims": list(dims),
            "nt": args.nt,
            "m": args.m,
            **brain.metadata,
        },
    )
    print(f"Wrote {grid_path} ({int(brain.truth_mask.sum())} active voxels), {mask_path}, {stimulus_path}, {sidecar}")
    return EXIT_OK


def cmd_fit(parser: argparse.ArgumentParser, args: argparse.Namespace, invocation: str) -> int:
    if bool(args.series) == bool(args.grid):
        parser.error("give exactly one of --series or --grid")
    if not args.stimulus:
        parser.error("--stimulus is required, on the command line or in --config")
    output = Path(args.output).expanduser()
    _require_directory(parser, str(output.parent))
    if args.hypothesis == "contrast" and args.contrast is None:
        parser.error("--hypothesis contrast needs --contrast j1,j2")
    if args.bandwidth_units == "seconds" and args.bandwidth is None:
        parser.error("--bandwidth-units seconds needs --bandwidth")

    stimulus = read_stimulus_csv([Path(p) for p in args.stimulus], resolution_s=args.resolution)
    design = assemble_design(stimulus, args.m)
    decimation = args.decimation
    if decimation is None and args.tr is not None:
        decimation = decimation_for(args.tr, args.resolution)
    if decimation:
        design = subsample_rows(design, decimation, args.phase)
    report = design_validity_check(design, grid=stimulus)
    if report.flagged:
        logger.warning("Design flagged: %s", "; ".join(report.reasons))

    if args.series:
        table = read_series_csv(Path(args.series))
        if len(table.run_lengths) > 1 and table.run_lengths != design.run_lengths:
            raise InputFormatError(f"series runs {table.run_lengths} differ from design runs {design.run_lengths}")
        series = table.by_voxel
    else:
        series = grid_to_series(read_fmrb1(Path(args.grid)))
    if series.shape[1] != design.n:
        raise InputFormatError(f"series have {series.shape[1]} samples, design has {design.n} rows")

    bandwidth = args.bandwidth
    if bandwidth is not None and args.bandwidth_units == "seconds":
        tr = args.tr if args.tr is not None else args.resolution * (decimation or 1)
        bandwidth = bandwidth_from_seconds(bandwidth, design.run_lengths, tr)
    config = PipelineConfig(
        m=args.m,
        bandwidth=bandwidth,
        kernel=args.kernel,
        bandwidth_grid=tuple(args.bandwidth_grid) if args.bandwidth_grid else None,
        noise_g=args.noise_g,
        noise_iters=args.noise_iters,
        drift_factor=args.drift_factor,
        hypothesis=args.hypothesis,
        contrast=args.contrast,
    )
    results = ActivationPipeline(design, config).analyze_grid(series, threads=args.threads)
    write_results_csv(output, results, invocation)

    failed = sum(1 for r in results if r.status == STATUS_FAILED)
    degenerate = sum(1 for r in results if r.status not in (STATUS_OK, STATUS_FAILED))
    print(f"Fitted {len(results)} voxels: {len(results) - failed - degenerate} ok, "
          f"{degenerate} degenerate, {failed} failed -> {output}")
    if results and failed == len(results):
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_map(args: argparse.Namespace, invocation: str) -> int:
    column = PVALUE_COLUMNS[args.variant]
    rows = read_results_csv(Path(args.results), required=("voxel", column))
    tested = [r for r in rows if r.status == STATUS_OK and np.isfinite(getattr(r, column))]
    labels = np.array([r.voxel for r in tested], dtype=int)
    pvals = PValueSet(values=np.array([getattr(r, column) for r in tested]), labels=labels)
    fdr = bh_fdr(pvals, args.q)
    output = write_qvalue_csv(Path(args.output), fdr, invocation)

    summary = (f"BH ({args.variant}) at q={args.q:g}: rejected {fdr.n_rejected} of {len(tested)} tested voxels "
               f"({len(rows) - len(tested)} skipped)")
    if args.truth:
        truth = grid_to_series(read_fmrb1(Path(args.truth)))[:, 0] > 0.5
        reject = np.zeros(truth.size, dtype=bool)
        if labels.size and labels.max() >= truth.size:
            raise InputFormatError(f"voxel {labels.max()} outside the {truth.size}-voxel truth mask")
        reject[labels[fdr.reject]] = True
        score = score_detection(reject, truth)
        summary += f"; recall {score.recall:.3f}, false-discovery proportion {score.false_discovery_proportion:.3f}"
    print(f"{summary} -> {output}")
    return EXIT_OK


def cmd_qq(args: argparse.Namespace, invocation: str) -> int:
    config = VoxelSimConfig(n=args.n, m=args.m, noise_variance=NOISE_LEVELS[args.snr], seed=args.seed)
    if args.hrf_scale:
        config = replace(config, h_profile=tuple(args.hrf_scale * canonical_hrf(args.m)))
    study = run_qq_study(
        config,
        reps=args.reps,
        statistic=args.statistic,
        mode=args.mode,
        bandwidth=args.bandwidth,
        noise_g=args.noise_g,
        threads=args.threads,
    )
    output = write_table_csv(
        Path(args.output),
        ("percentile", "empirical", "theoretical"),
        zip(study.percentiles.tolist(), study.empirical.tolist(), study.theoretical.tolist()),
        invocation,
    )
    distance = kolmogorov_distance(study.samples[args.statistic], study.k)
    print(f"{args.statistic} ({args.mode}): {study.reps} replications, {study.failures} failed, "
          f"KS distance {distance:.3f}, rejection rate {study.rejection_rate(DEFAULT_ALPHA):.3f} -> {output}")
    return EXIT_OK


def cmd_power(args: argparse.Namespace, invocation: str) -> int:
    rows = [(tau2, asymptotic_power(args.k, tau2, args.alpha)) for tau2 in sorted(args.tau2)]
    output = write_table_csv(Path(args.output), ("tau2", "power"), rows, invocation)
    print(f"Wrote {len(rows)} power values for k={args.k}, alpha={args.alpha:g} -> {output}")
    return EXIT_OK


def _config_default(action: argparse.Action, value: str) -> object:
    if isinstance(action, argparse._StoreTrueAction):
        return value.lower() in {"1", "true", "yes", "on"}
    if action.nargs in ("+", "*"):
        convert = action.type or str
        return [convert(piece) for piece in shlex.split(value)]
    return value


def _apply_config_file(
    parser: argparse.ArgumentParser,
    leaves: list[argparse.ArgumentParser],
    argv: list[str],
) -> None:
    """Feed ``--config`` values to the parsers as defaults; flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = load_config_file(Path(known.config).expanduser())
    except OSError as exc:
        parser.error(f"cannot read config file {known.config}: {exc.strerror}")
    except ValueError as exc:
        parser.error(str(exc))
    global_dests = {a.dest: a for a in parser._actions if a.option_strings and a.dest != "help"}
    known_dests = {action.dest: action for leaf in leaves for action in leaf._actions}
    known_dests.update(global_dests)
    unknown = sorted(set(values) - set(known_dests))
    if unknown:
        parser.error(f"unknown config key(s): {', '.join(unknown)}")
    defaults = {key: _config_default(known_dests[key], value) for key, value in values.items()}
    parser.set_defaults(**{key: value for key, value in defaults.items() if key in global_dests})
    for leaf in leaves:
        dests = {action.dest for action in leaf._actions}
        leaf.set_defaults(**{key: value for key, value in defaults.items() if key in dests and key not in global_dests})


def _pipeline_arguments(command: argparse.ArgumentParser) -> None:
    command.add_argument("--m", type=int, default=DEFAULT_HRF_LENGTH, help="HRF length in grid steps.")
    command.add_argument("--bandwidth", type=_bandwidth, help="Fixed smoother bandwidth, or auto for GCV (default).")
    command.add_argument("--bandwidth-grid", type=_float_list, help="Comma-separated GCV candidates.")
    command.add_argument(
        "--bandwidth-units",
        choices=("rescaled", "seconds"),
        default="rescaled",
        help="Units of --bandwidth: rescaled time in (0, 1) or seconds.",
    )
    command.add_argument("--kernel", choices=sorted(KERNELS), default=DEFAULT_KERNEL)
    command.add_argument("--noise-iters", type=int, default=DEFAULT_NOISE_ITERS,
                         help="Noise re-estimation rounds after the white-noise fit.")
    command.add_argument("--noise-g", type=int, default=DEFAULT_NOISE_G, help="Band of the estimated noise.")
    command.add_argument("--drift-factor", type=float, default=DRIFT_BANDWIDTH_FACTOR,
                         help="Drift smoother bandwidth for K_bc as a multiple of the fitted bandwidth.")


def _global_arguments(command: argparse.ArgumentParser, *, nested: bool) -> None:
    # Copies on the subcommands leave the root value alone unless repeated there.
    default = argparse.SUPPRESS if nested else None
    command.add_argument("--verbose", action="store_true", default=default or False, help="Enable verbose logging.")
    command.add_argument("--seed", type=int, default=default or 0, help="Master random seed.")
    command.add_argument("--threads", type=int, default=default or 1, help="Worker threads for voxels or replications.")
    command.add_argument("--config", default=default, help="Flat key=value file of option defaults.")


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    _global_arguments(common, nested=True)

    parser = argparse.ArgumentParser(prog=PROG)
    _global_arguments(parser, nested=False)
    subparsers = parser.add_subparsers(dest="command")
    leaves: list[argparse.ArgumentParser] = []

    simulate = subparsers.add_parser("simulate", help="Write simulated data sets.")
    targets = simulate.add_subparsers(dest="target", required=True)

    voxel = targets.add_parser("voxel", parents=[common], help="One voxel: stimulus, series and truth files.")
    voxel.add_argument("--out", default=".", help="Existing output directory.")
    voxel.add_argument("--n", type=int, default=400)
    voxel.add_argument("--m", type=int, default=DEFAULT_HRF_LENGTH)
    voxel.add_argument("--snr", type=int, choices=sorted(NOISE_LEVELS), default=1,
                       help="Noise level, named by its nominal SNR.")
    voxel.add_argument("--snr-target", type=float, help="Solve the noise variance for this realised SNR.")
    voxel.add_argument("--hrf-scale", type=float, default=0.0,
                       help="Amplitude of the canonical HRF (0 simulates the null).")
    voxel.add_argument("--stimulus-p", type=float, default=0.5)
    leaves.append(voxel)

    brain = targets.add_parser("brain", parents=[common], help="Synthetic brain grid with planted regions.")
    brain.add_argument("--out", default=".", help="Existing output directory.")
    brain.add_argument("--dims", type=_int_list, default=[16, 16, 4], help="nx,ny,nz")
    brain.add_argument("--nt", type=int, default=200)
    brain.add_argument("--m", type=int, default=DEFAULT_HRF_LENGTH)
    brain.add_argument("--scales", type=_float_list, default=[0.17, 0.12], help="HRF scale of each region.")
    brain.add_argument("--hrf-amplitude", type=float, default=5.0)
    brain.add_argument("--regions", choices=("example", "none"), default="example")
    leaves.append(brain)

    fit = subparsers.add_parser("fit", parents=[common], help="Fit every voxel and compute K and K_bc.")
    fit.add_argument("--series", help="Series CSV (one column per voxel).")
    fit.add_argument("--grid", help="FMRB1 voxel grid.")
    fit.add_argument("--stimulus", nargs="+", help="Stimulus CSV file(s), one or more runs each.")
    fit.add_argument("--output", default="results.csv")
    _pipeline_arguments(fit)
    fit.add_argument("--resolution", type=float, default=1.0, help="Stimulus grid resolution in seconds.")
    fit.add_argument("--tr", type=float, help="Scanner TR in seconds; implies the decimation factor.")
    fit.add_argument("--decimation", type=int, help="Keep every d-th design row.")
    fit.add_argument("--phase", type=int, default=0, help="Offset of the first kept row in each run.")
    fit.add_argument("--hypothesis", choices=("all-zero", "contrast"), default="all-zero")
    fit.add_argument("--contrast", type=_contrast, help="Stimulus indices j1,j2 (1-based) for H0: h_j1 = h_j2.")
    leaves.append(fit)

    activation = subparsers.add_parser("map", parents=[common], help="Benjamini-Hochberg activation map.")
    activation.add_argument("results", help="Result CSV written by fit.")
    activation.add_argument("--q", type=float, default=DEFAULT_FDR_LEVEL, help="FDR level.")
    activation.add_argument("--variant", choices=sorted(PVALUE_COLUMNS), default="K_bc")
    activation.add_argument("--output", default="activation.csv")
    activation.add_argument("--truth", help="FMRB1 truth mask to score the rejections against.")
    leaves.append(activation)

    qq = subparsers.add_parser("qq", parents=[common], help="Null calibration percentiles of K or K_bc.")
    qq.add_argument("--n", type=int, default=400)
    qq.add_argument("--m", type=int, default=DEFAULT_HRF_LENGTH)
    qq.add_argument("--snr", type=int, choices=sorted(NOISE_LEVELS), default=1)
    qq.add_argument("--hrf-scale", type=float, default=0.0)
    qq.add_argument("--reps", type=int, default=500)
    qq.add_argument("--statistic", choices=("K", "K_bc"), default="K_bc")
    qq.add_argument("--mode", choices=("estimated", "oracle"), default="estimated")
    qq.add_argument("--bandwidth", type=_bandwidth, help="Fixed bandwidth (oracle mode picks one if omitted).")
    qq.add_argument("--noise-g", type=int, default=SIMULATION_NOISE_G, help="Band of the estimated noise.")
    qq.add_argument("--output", default="qq.csv")
    leaves.append(qq)

    power = subparsers.add_parser("power", parents=[common], help="Asymptotic local power over a tau2 grid.")
    power.add_argument("--k", type=int, required=True, help="Number of hypothesis rows.")
    power.add_argument("--tau2", type=_float_list, default=[0.0, 1.0, 5.0, 20.0])
    power.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    power.add_argument("--output", default="power.csv")
    leaves.append(power)

    return parser, leaves
