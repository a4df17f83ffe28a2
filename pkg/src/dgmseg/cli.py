"""Command-line interface: ``dgmseg <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or geometry error, 3 numeric
failure.
"""
import argparse
import csv
import json
import logging
import sys

import numpy as np

from .config import dump_config, load_config
from .embedding import load_model, save_model
from .estimators import ManifoldCRFSegmenter
from .evaluation import report
from .grassmann import RankDeficiencyError
from .volume import (Mask, PhantomSpec, crop_roi, generate_phantom, load_mask, load_volume,
                     save_mask, save_volume)

__all__ = ["main", "build_parser", "phantom_grid", "run_sweep", "SWEEP_FIELDS"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_FIELDS = ["contrast_hu", "diameter_mm", "overlap_error_pct", "volume_diff_pct",
                "avg_surf_mm", "rms_surf_mm", "max_surf_mm", "dice", "mean_score"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text, n=None, allow_all=False):
    parts = [p.strip() for p in text.split(",")]
    if n is not None and len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated values, got {text!r}")
    out = []
    for p in parts:
        if allow_all and p == "all":
            out.append(None)
            continue
        try:
            out.append(int(p))
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {p!r}") from None
    return out


def _floats(text):
    try:
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") \
            from None


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="global seed (overrides seeds.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dgmseg", description="Grassmannian manifold embedding + "
                     "higher-order CRF segmentation of 3D volumes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="write a spherical-lesion phantom")
    p.add_argument("--contrast", type=float, default=20.0, help="lesion contrast in HU")
    p.add_argument("--diameter", type=float, default=30.0, help="lesion diameter in mm")
    p.add_argument("--noise-sd", type=float, default=1.5)
    p.add_argument("--background", type=float, default=60.0)
    p.add_argument("--dims", type=lambda t: _ints(t, 3), default=[128, 128, 64])
    p.add_argument("--spacing", type=_floats, default=[1.0, 1.0, 1.0])
    p.add_argument("-o", "--output", required=True,
                   help="output stem; writes STEM.raw/.json and STEM_mask.raw/.json")

    p = sub.add_parser("train", parents=[common], help="train an embedding model")
    p.add_argument("--volume", action="append", required=True, help="training volume")
    p.add_argument("--mask", action="append", required=True, help="mask for each volume")
    p.add_argument("--samples", type=int, help="samples per class (training.samples_per_class)")
    p.add_argument("-o", "--output", required=True, help="model file")

    p = sub.add_parser("segment", parents=[common], help="segment a volume")
    p.add_argument("volume")
    p.add_argument("--model", required=True)
    p.add_argument("--roi", type=lambda t: _ints(t, 3), help="ROI origin x,y,z")
    p.add_argument("--roi-dims", type=lambda t: _ints(t, 3, allow_all=True),
                   help="ROI extent nx,ny,nz ('all' = to the end of that axis)")
    p.add_argument("--energy-log", help="write one line of energies per slice here")
    p.add_argument("-o", "--output", required=True, help="output mask stem")

    p = sub.add_parser("eval", parents=[common], help="compare a mask with ground truth")
    p.add_argument("predicted")
    p.add_argument("truth")
    p.add_argument("-o", "--output", help="write the JSON report here as well")

    p = sub.add_parser("sweep", parents=[common],
                       help="leave-one-out segmentation over a phantom grid")
    p.add_argument("--contrasts", type=_floats, default=[8.0, 13.0, 20.0])
    p.add_argument("--diameters", type=_floats, default=[10.0, 30.0, 50.0])
    p.add_argument("--noise-sd", type=float, default=1.5)
    p.add_argument("--dims", type=lambda t: _ints(t, 3), default=[128, 128, 64])
    p.add_argument("-o", "--output", help="CSV path (default stdout)")

    sub.add_parser("dump-defaults", parents=[common], help="print the effective config")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds.seed={args.seed}")
    try:
        return load_config(args.config, overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(exc.args[0] if exc.args else str(exc)) from exc


def _segmenter(cfg):
    return ManifoldCRFSegmenter(**cfg.segmenter_params())


def cmd_phantom(args, cfg):
    spec = PhantomSpec(volume_dims=tuple(args.dims), spacing=tuple(args.spacing),
                       background_intensity=args.background, tumor_contrast=args.contrast,
                       tumor_diameter=args.diameter, noise_sd=args.noise_sd,
                       rng_seed=cfg.seeds.seed)
    vol, mask = generate_phantom(spec)
    for path in save_volume(vol, args.output) + save_mask(mask, f"{args.output}_mask"):
        print(path)


def cmd_train(args, cfg):
    if len(args.volume) != len(args.mask):
        raise UsageError("give exactly one --mask per --volume")
    if args.samples is not None:
        try:
            cfg.set("training.samples_per_class", args.samples)
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    vols = [load_volume(p) for p in args.volume]
    masks = [load_mask(p) for p in args.mask]
    seg = _segmenter(cfg).fit(vols, masks)
    save_model(seg.model_, args.output)
    ev = seg.model_.eigenvalues
    print(f"N={len(seg.model_.labels)} d={seg.model_.d}")
    print("eigenvalues: " + " ".join(f"{x:.6g}" for x in ev[:min(len(ev), 10)]))
    print(args.output)


def _roi(args, shape):
    if args.roi is None and args.roi_dims is None:
        return None
    origin = args.roi or [0, 0, 0]
    dims = args.roi_dims or [None, None, None]
    return origin, [n - o if d is None else d for o, d, n in zip(origin, dims, shape)]


def cmd_segment(args, cfg):
    vol = load_volume(args.volume)
    seg = _segmenter(cfg).set_model(load_model(args.model))
    roi = _roi(args, vol.dims)
    target = crop_roi(vol, *roi) if roi else vol
    mask, logs = seg.predict(target, return_log=True)
    if roi:
        full = np.zeros(vol.dims, dtype=np.uint8)
        sl = tuple(slice(o, o + d) for o, d in zip(*roi))
        full[sl] = mask.data
        mask = Mask(full, vol.spacing)
    lines = [entry.line() for entry in logs]
    if args.energy_log:
        with open(args.energy_log, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    init = sum(e.initial_energy for e in logs)
    final = sum(e.final_energy for e in logs)
    print(f"total: initial {init:.6f} final {final:.6f} voxels {int(mask.data.sum())}")
    for path in save_mask(mask, args.output):
        print(path)


def cmd_eval(args, cfg):
    rep = report(load_mask(args.predicted), load_mask(args.truth))
    text = json.dumps(rep.to_dict(), indent=2)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    print(text)


def phantom_grid(contrasts, diameters, dims=(128, 128, 64), noise_sd=1.5, seed=0):
    """Phantoms for every (contrast, diameter) pair, diameter-major.

    Each phantom gets its own noise seed derived from ``seed`` and its grid
    position.
    """
    out = []
    for i, (d, c) in enumerate((d, c) for d in diameters for c in contrasts):
        spec = PhantomSpec(volume_dims=tuple(dims), tumor_contrast=c, tumor_diameter=d,
                           noise_sd=noise_sd, rng_seed=seed * 1000 + i)
        vol, mask = generate_phantom(spec)
        out.append((c, d, vol, mask))
    return out


def run_sweep(cfg, contrasts, diameters, dims=(128, 128, 64), noise_sd=1.5):
    """Leave-one-out over the phantom grid; one dict of metrics per phantom."""
    grid = phantom_grid(contrasts, diameters, dims, noise_sd, cfg.seeds.seed)
    if len(grid) < 2:
        # nothing to hold out against; train and test on the one phantom
        folds = [(grid[0], grid)]
    else:
        folds = [(cell, grid[:i] + grid[i + 1:]) for i, cell in enumerate(grid)]
    rows = []
    for (c, d, vol, mask), train in folds:
        seg = _segmenter(cfg).fit([t[2] for t in train], [t[3] for t in train])
        rep = report(seg.predict(vol), mask)
        log.info("contrast %g diameter %g: overlap %.2f dice %.3f", c, d,
                 rep.overlap_error_pct, rep.dice)
        rows.append(dict(contrast_hu=c, diameter_mm=d,
                         overlap_error_pct=rep.overlap_error_pct,
                         volume_diff_pct=rep.volume_diff_pct, avg_surf_mm=rep.avg_surf_mm,
                         rms_surf_mm=rep.rms_surf_mm, max_surf_mm=rep.max_surf_mm,
                         dice=rep.dice, mean_score=rep.mean_score))
    return rows


def cmd_sweep(args, cfg):
    rows = run_sweep(cfg, args.contrasts, args.diameters, args.dims, args.noise_sd)
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.output:
            fh.close()


def cmd_dump_defaults(args, cfg):
    sys.stdout.write(dump_config(cfg))


COMMANDS = {
    "phantom": cmd_phantom, "train": cmd_train, "segment": cmd_segment,
    "eval": cmd_eval, "sweep": cmd_sweep, "dump-defaults": cmd_dump_defaults,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, parse errors exit 1
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dgmseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, ArithmeticError, RankDeficiencyError) as exc:
        print(f"dgmseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, IndexError) as exc:
        print(f"dgmseg: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
