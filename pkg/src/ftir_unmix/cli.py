"""Command-line entry point: ``ftir-unmix <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 bad input data, 4 numerical failure.
Every successful run writes a JSON manifest describing what it did.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .bandweights import WeightConfig, estimate_band_weights, read_weights_csv, write_weights_csv
from .cube_io import HyperCube, _atomic_write, export_abundance_maps, export_endmembers_csv, read_cube, write_cube
from .errors import ConfigError, DataError, GenerationError, InitError, NumericalError
from .evaluation import (
    abundance_rmse,
    banded_sad,
    match_endmembers,
    weight_detection_report,
)
from .model import ModelConfig, endmembers, load_checkpoint, save_checkpoint
from .synthgen import SynthSpec, default_artifacts, make_scene, read_truth, write_truth
from .training import TrainConfig, gradcheck, infer_abundances, train

log = logging.getLogger("ftir_unmix")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _manifest(path: Path, command: str, config: dict, seed, inputs: dict, outputs: dict,
              started: float) -> None:
    doc = {
        "subcommand": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args, started):
    spec = SynthSpec(
        height=args.height, width=args.width, bands=args.bands, n_endmembers=args.k,
        peaks_per_endmember=args.peaks, peak_width=tuple(args.peak_width),
        smoothing_radius=args.radius, concentration=args.concentration,
        snr_db=None if args.snr.lower() == "none" else float(args.snr), seed=args.seed,
    ).validate()
    artifacts = None
    if args.artifacts == "default":
        artifacts = default_artifacts(spec, args.spike_amplitude, args.common_mode_amplitude)
    cube, truth = make_scene(spec, artifacts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cube(cube, out / "cube.ftc")
    paths = write_truth(truth, out / "truth", cube.wavenumbers)
    config = asdict(spec)
    config["artifacts"] = asdict(artifacts) if artifacts is not None else None
    outputs = {"cube": out / "cube.ftc", **paths}
    _manifest(out / "manifest.json", "synth", config, spec.seed, {}, outputs, started)
    print(f"wrote {out / 'cube.ftc'} ({cube.height}x{cube.width}x{cube.bands}), "
          f"{len(truth.artifact_log)} contaminated bands")


def _weight_config(args) -> WeightConfig:
    return WeightConfig(gamma_rough=args.gamma_rough, gamma_flat=args.gamma_flat, tau=args.tau,
                        alpha=args.alpha, w_min=args.w_min).validate()


def cmd_weights(args, started):
    cube = read_cube(args.cube)
    cfg = _weight_config(args)
    weights = estimate_band_weights(cube, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weights_csv(weights, out, cube.wavenumbers)
    _manifest(_file_manifest(out), "weights", asdict(cfg), None, {"cube": args.cube},
              {"weights": out}, started)
    print(f"{weights.n_downweighted()} of {len(weights)} bands below w = 0.5")


def _configs(args, bands, k):
    mcfg = ModelConfig(bands=bands, n_endmembers=k, patch_size=args.patch_size).validate()
    tcfg = TrainConfig(num_patches=args.patches, patch_size=args.patch_size,
                       batch_size=args.batch, epochs=args.epochs, lr=args.lr, seed=args.seed,
                       loss=args.loss, deterministic=args.deterministic,
                       center_only=args.center_only).validate()
    return mcfg, tcfg


def _load_weights(args, cube):
    if args.loss != "wsad":
        return None
    if args.weights is None:
        raise UsageError("--weights is required with --loss wsad")
    w = read_weights_csv(args.weights).w
    if w.size != cube.bands:
        raise DataError(f"weights file has {w.size} bands, cube has {cube.bands}")
    return w


def _progress(every):
    def callback(epoch, loss):
        if every and (epoch + 1) % every == 0:
            log.info("epoch %d  loss %.6f", epoch + 1, loss)
    return callback


def cmd_train(args, started):
    cube = read_cube(args.cube)
    w = _load_weights(args, cube)
    mcfg, tcfg = _configs(args, cube.bands, args.k)
    params, history = train(cube, mcfg, tcfg, w, callback=_progress(args.log_every))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, mcfg, out)
    config = {"model": asdict(mcfg), "train": asdict(tcfg)}
    inputs = {"cube": args.cube, **({"weights": args.weights} if w is not None else {})}
    _manifest(_file_manifest(out), "train", {**config, "final_loss": history.final_loss},
              tcfg.seed, inputs, {"checkpoint": out}, started)
    print(f"final loss {history.final_loss:.6f} rad after {tcfg.epochs} epochs "
          f"({history.seconds:.1f} s)")


def _export(params, mcfg, cube, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    E = endmembers(params, mcfg)
    A = infer_abundances(params, mcfg, cube)
    export_endmembers_csv(E, out / "endmembers.csv", cube.wavenumbers)
    write_cube(HyperCube(A.transpose(1, 2, 0)), out / "abundances.ftc")
    maps = export_abundance_maps(A, out / "abundance")
    return {"endmembers": out / "endmembers.csv", "abundances": out / "abundances.ftc",
            "maps": out / "abundance_maps.txt"}, maps


def cmd_unmix(args, started):
    params, mcfg = load_checkpoint(args.checkpoint)
    cube = read_cube(args.cube)
    out = Path(args.out)
    outputs, maps = _export(params, mcfg, cube, out)
    _manifest(out / "manifest.json", "unmix", asdict(mcfg), None,
              {"checkpoint": args.checkpoint, "cube": args.cube}, outputs, started)
    print(f"wrote {len(maps)} abundance maps to {out}")


def cmd_eval(args, started):
    params, mcfg = load_checkpoint(args.checkpoint)
    cube = read_cube(args.cube)
    truth = read_truth(args.truth)
    weights = read_weights_csv(args.weights)
    E = endmembers(params, mcfg)
    if E.shape != truth.endmembers.shape:
        raise DataError(f"model has {E.shape[1]} endmembers, ground truth {truth.endmembers.shape[1]}")
    match = match_endmembers(E, truth.endmembers)
    A = infer_abundances(params, mcfg, cube)
    rmse = abundance_rmse(A, truth.abundances, match.permutation)
    det = weight_detection_report(weights.w, truth.artifact_log)
    summary = {
        "mean_sad": match.mean_sad,
        "abundance_rmse": rmse,
        "detection_precision": det.precision,
        "detection_recall": det.recall,
        "n_contaminated": len({b for b, _ in truth.artifact_log}),
    }
    for i, (j, s) in enumerate(zip(match.permutation, match.sad)):
        summary[f"sad_{i}_to_{int(j)}"] = float(s)
    if truth.artifact_log:
        summary["contaminated_band_sad"] = banded_sad(
            E, truth.endmembers, match.permutation, [b for b, _ in truth.artifact_log])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["endmember matching (greedy, spectral angle in rad)"]
    for i, (j, s) in enumerate(zip(match.permutation, match.sad)):
        lines.append(f"  estimated {i} -> true {int(j)}: {s:.4f}")
    lines += [
        f"mean SAD            {match.mean_sad:.4f}",
        f"abundance RMSE      {rmse:.4f}",
        f"band detection      precision {det.precision:.3f}  recall {det.recall:.3f}"
        f"  (tp {det.true_positives}, fp {det.false_positives}, fn {det.false_negatives})",
    ]
    if "contaminated_band_sad" in summary:
        lines.append(f"SAD on contaminated bands {summary['contaminated_band_sad']:.4f}")
    report = "\n".join(lines) + "\n"
    _atomic_write(out / "report.txt", report.encode())
    _atomic_write(out / "summary.txt",
                  "".join(f"{k}={v!r}\n" for k, v in summary.items()).encode())
    _manifest(out / "manifest.json", "eval", {}, None,
              {"checkpoint": args.checkpoint, "cube": args.cube, "truth": args.truth,
               "weights": args.weights},
              {"report": out / "report.txt", "summary": out / "summary.txt"}, started)
    sys.stdout.write(report)


def cmd_gradcheck(args, started):
    cfg = ModelConfig(bands=args.bands, n_endmembers=args.k, patch_size=args.patch_size,
                      hidden=args.hidden).validate()
    kinds = ("sad", "wsad") if args.loss == "both" else (args.loss,)
    worst = 0.0
    results = {}
    for kind in kinds:
        res = gradcheck(cfg, args.batch, kind, args.h, args.seed)
        results[kind] = res.errors
        worst = max(worst, res.max_error)
        print(f"{kind}: max relative error {res.max_error:.3e}")
        for name, err in res.errors.items():
            print(f"  {name:10s} {err:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "gradcheck.json", (json.dumps(results, indent=2) + "\n").encode())
        _manifest(out / "manifest.json", "gradcheck",
                  {"model": asdict(cfg), "batch": args.batch, "h": args.h, "tol": args.tol},
                  args.seed, {}, {"errors": out / "gradcheck.json"}, started)
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")


def cmd_ksweep(args, started):
    if args.k_min < 2 or args.k_max < args.k_min:
        raise UsageError("need 2 <= --k-min <= --k-max")
    cube = read_cube(args.cube)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = None
    inputs = {"cube": args.cube}
    if args.loss == "wsad":
        if args.weights is not None:
            w = read_weights_csv(args.weights).w
            inputs["weights"] = args.weights
        else:
            # one estimate shared by every K; it depends on the cube only
            weights = estimate_band_weights(cube)
            write_weights_csv(weights, out / "weights.csv", cube.wavenumbers)
            w = weights.w
    for k in range(args.k_min, args.k_max + 1):
        k_started = time.perf_counter()
        mcfg, tcfg = _configs(args, cube.bands, k)
        params, history = train(cube, mcfg, tcfg, w, callback=_progress(args.log_every))
        k_dir = out / f"K{k:02d}"
        outputs, _ = _export(params, mcfg, cube, k_dir)
        save_checkpoint(params, mcfg, k_dir / "model.ftck")
        outputs["checkpoint"] = k_dir / "model.ftck"
        config = {"model": asdict(mcfg), "train": asdict(tcfg), "final_loss": history.final_loss}
        _manifest(k_dir / "manifest.json", "ksweep", config, tcfg.seed, inputs, outputs,
                  k_started)
        print(f"K={k}: final loss {history.final_loss:.6f} rad -> {k_dir}")
    _manifest(out / "manifest.json", "ksweep",
              {"k_min": args.k_min, "k_max": args.k_max, "loss": args.loss}, args.seed, inputs,
              {f"K{k:02d}": out / f"K{k:02d}" for k in range(args.k_min, args.k_max + 1)},
              started)


# -- argument parsing -------------------------------------------------------------


def _add_training_flags(p):
    d = TrainConfig()
    p.add_argument("--patch-size", type=int, default=d.patch_size)
    p.add_argument("--patches", type=int, default=d.num_patches, help="number of sampled patches")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--loss", choices=("sad", "wsad"), default=d.loss)
    p.add_argument("--weights", help="band-weights CSV (required for wsad)")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--center-only", action="store_true",
                   help="score only the centre pixel of each patch")
    p.add_argument("--log-every", type=int, default=0, help="log the loss every N epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftir-unmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cube with ground truth")
    d = SynthSpec()
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--height", type=int, default=d.height)
    s.add_argument("--width", type=int, default=d.width)
    s.add_argument("--bands", type=int, default=d.bands)
    s.add_argument("--k", type=int, default=d.n_endmembers)
    s.add_argument("--peaks", type=int, default=d.peaks_per_endmember)
    s.add_argument("--peak-width", type=float, nargs=2, default=d.peak_width, metavar=("LO", "HI"))
    s.add_argument("--radius", type=int, default=d.smoothing_radius, help="abundance box-filter radius")
    s.add_argument("--concentration", type=float, default=d.concentration)
    s.add_argument("--snr", default=str(d.snr_db), help="SNR in dB, or 'none'")
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--artifacts", choices=("none", "default"), default="none")
    s.add_argument("--spike-amplitude", type=float, default=5.0)
    s.add_argument("--common-mode-amplitude", type=float, default=0.1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("weights", help="estimate band-reliability weights")
    w = WeightConfig()
    s.add_argument("--cube", required=True)
    s.add_argument("--out", required=True, help="weights CSV path")
    s.add_argument("--gamma-rough", type=float, default=w.gamma_rough)
    s.add_argument("--gamma-flat", type=float, default=w.gamma_flat)
    s.add_argument("--tau", type=float, default=w.tau)
    s.add_argument("--alpha", type=float, default=w.alpha)
    s.add_argument("--w-min", type=float, default=w.w_min)
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("train", help="train the autoencoder on a cube")
    s.add_argument("--cube", required=True)
    s.add_argument("--k", type=int, required=True, help="number of endmembers")
    s.add_argument("--out", required=True, help="checkpoint path")
    _add_training_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("unmix", help="export endmembers and abundance maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_unmix)

    s = sub.add_parser("eval", help="score a model against synthetic ground truth")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--truth", required=True, help="ground-truth directory from synth")
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--bands", type=int, default=12)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--patch-size", type=int, default=3)
    s.add_argument("--hidden", type=int, default=4)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--loss", choices=("sad", "wsad", "both"), default="both")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="optional output directory for a JSON record")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ksweep", help="train one model per K and export each")
    s.add_argument("--cube", required=True)
    s.add_argument("--k-min", type=int, required=True)
    s.add_argument("--k-max", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    _add_training_flags(s)
    s.set_defaults(func=cmd_ksweep)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help/--version exit 0, bad flags exit 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", 0) else logging.WARNING,
                        format="%(message)s")
    started = time.perf_counter()
    try:
        args.func(args, started)
    except (UsageError, ConfigError) as exc:
        print(f"ftir-unmix {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError, InitError, FileNotFoundError) as exc:
        print(f"ftir-unmix {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"ftir-unmix {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


__all__ = ["build_parser", "main", "run"]
