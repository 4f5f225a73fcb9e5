"""Command-line pipeline: simulate, undersample, calibrate, transform, train,
estimate, reconstruct, evaluate and report.

``kspace.c64`` always holds the fully sampled data; ``undersample`` only
records the acquisition mask, and every later stage applies it. Failures
print one JSON object on stderr. Exit status is 0 on success, 2 when a stage
input is missing and 1 for any other error.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .calibrate import CalibConfig, espirit_from_kspace
from .io import (ArtifactMissing, ConfigError, ContainerError, DatasetContainer, load_dataset,
                 provenance_block, read_config, save_checkpoint, save_dataset)
from .kspace import apply_mask, ifft2c, make_uniform_mask, rss_combine, zero_fill_images
from .simulate import GeometryRanges, SimConfig, simulate_dataset

log = logging.getLogger("dlespirit")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like SxCxHxW, got {text!r}") from None
    if len(dims) != 4:
        raise argparse.ArgumentTypeError(f"dims must have four parts, got {text!r}")
    return dims


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _record(container: DatasetContainer, sub: str, config: dict, seed=None):
    config = {k: v for k, v in config.items() if not callable(v)}
    container.provenance.append(provenance_block(sub, config, seed))


def _mask(container: DatasetContainer):
    lines = container.get("mask.u8")
    mask = make_uniform_mask(container.dims[2], container.R, container.offset)
    if not np.array_equal(mask.sampled, lines):
        raise ContainerError("mask.u8", "stored mask disagrees with R/offset in meta.json")
    return mask


def cmd_simulate(args) -> None:
    dims = args.dims
    if args.coils is not None and args.coils != dims[1]:
        raise UsageError(f"--coils {args.coils} disagrees with the channel count in --dims {dims}")
    ranges = read_config(args.geometry_ranges, GeometryRanges) if args.geometry_ranges else GeometryRanges()
    cfg = SimConfig(dims=dims, noise_sigma=args.noise, ranges=ranges, slice_spacing=args.slice_spacing)
    data = simulate_dataset(cfg, args.seed)
    container = DatasetContainer(dims, data.geometry, seed=args.seed, slice_spacing=args.slice_spacing)
    container.set("kspace.c64", data.kspace)
    container.set("maps_true.c64", data.coils.sensitivities)
    container.set("mask.u8", make_uniform_mask(dims[2], 1, 0).sampled)
    _record(container, "simulate", vars(args) | {"ranges": ranges.items()}, args.seed)
    save_dataset(container, args.out)


def cmd_undersample(args) -> None:
    container = load_dataset(args.input)
    container.get("kspace.c64")
    mask = make_uniform_mask(container.dims[2], args.R, args.offset)
    container.R, container.offset = args.R, args.offset
    container.set("mask.u8", mask.sampled)
    _record(container, "undersample", vars(args))
    save_dataset(container, args.input)


def cmd_calibrate(args) -> None:
    container = load_dataset(args.input)
    cfg = CalibConfig(kernel_k=args.kernel, acs_lines=args.acs, eig_crop=args.eig_crop,
                      sv_rel_threshold=args.threshold)
    maps = espirit_from_kspace(container.get("kspace.c64"), cfg)
    container.acs_lines = args.acs
    container.set("maps_ref.c64", maps.maps)
    container.set("eigval.f32", maps.eigval)
    _record(container, "calibrate", vars(args))
    save_dataset(container, args.input)


def cmd_maps_transform(args) -> None:
    from .geometry import compute_transformed_maps

    container = load_dataset(args.input)
    cfg = CalibConfig(acs_lines=container.acs_lines, sv_rel_threshold=args.threshold)
    maps = compute_transformed_maps(container.get("kspace.c64"), container.geometry, cfg,
                                    container.slice_spacing)
    container.set("maps_trans.c64", maps.maps)
    container.set("eigval_trans.f32", maps.eigval)
    _record(container, "maps-transform", vars(args))
    save_dataset(container, args.input)


def cmd_train(args) -> None:
    from .estimator import NetworkConfig, TrainingConfig, crop_maps, prepare_sample, train

    paths = sorted(glob.glob(args.data))
    if not paths:
        raise ArtifactMissing(args.data)
    net = read_config(args.net, NetworkConfig) if args.net else NetworkConfig()
    cfg = read_config(args.train, TrainingConfig) if args.train else TrainingConfig()
    if args.lambda_mode:
        cfg = TrainingConfig(**{**cfg.__dict__, "lambda_mode": args.lambda_mode})
    samples = []
    for path in paths:
        c = load_dataset(path)
        kspace = c.get("kspace.c64")
        orig = crop_maps(c.get("maps_ref.c64"), c.get("eigval.f32"), args.crop)
        trans = crop_maps(c.get("maps_trans.c64"), c.get("eigval_trans.f32"), args.crop)
        if kspace.shape[1] != net.ncoils:
            raise ContainerError("dims.nchannels", f"{path} has {kspace.shape[1]} channels, network expects {net.ncoils}")
        for R in args.accelerations:
            aliased = zero_fill_images(kspace, make_uniform_mask(c.dims[2], R, 0))
            samples.extend(prepare_sample(aliased[j], orig[j], trans[j], net.input_norm)
                           for j in range(c.dims[0]))
    model, history = train(samples, net, cfg)
    save_checkpoint(model, args.out, extra={
        "training": cfg.__dict__, "datasets": paths, "accelerations": list(args.accelerations),
        "crop": args.crop, "log": history.__dict__})


def cmd_estimate(args) -> None:
    from .estimator import estimate_maps
    from .io import load_checkpoint

    container = load_dataset(args.input)
    if not Path(args.ckpt).exists():
        raise ArtifactMissing(args.ckpt)
    model, _ = load_checkpoint(args.ckpt)
    aliased = zero_fill_images(container.get("kspace.c64"), _mask(container))
    maps = estimate_maps(model, aliased, args.support_threshold)
    container.set("maps_est.c64", maps.maps)
    container.set("eigval_est.f32", maps.eigval)
    _record(container, "estimate", vars(args))
    save_dataset(container, args.input)


# estimated maps are already cut to their own support by ``estimate``; they are never re-masked
_MAP_FILES = {"ref": ("maps_ref.c64", "eigval.f32"), "est": ("maps_est.c64", None),
              "true": ("maps_true.c64", None), "trans": ("maps_trans.c64", "eigval_trans.f32")}


def cmd_recon(args) -> None:
    from .recon import ReconConfig, l1_espirit, mask_maps, sense_cg, zero_filled_rss

    container = load_dataset(args.input)
    mask = _mask(container)
    y = apply_mask(container.get("kspace.c64"), mask)
    if args.method == "zero-fill":
        image = np.stack([zero_filled_rss(y[j], mask) for j in range(y.shape[0])]).astype(complex)
    else:
        map_name, eig_name = _MAP_FILES[args.maps]
        maps = container.get(map_name)
        eigval = container.get(eig_name) if (args.mask_maps and eig_name) else None
        if args.mask_maps and eigval is None:
            log.warning("%s maps carry no eigenvalue map; --mask-maps ignored", args.maps)
        cfg = ReconConfig(mask_maps=eigval is not None, map_crop=args.map_crop, cg_tol=args.cg_tol)
        solver = sense_cg if args.method == "sense" else l1_espirit
        image = np.zeros(y.shape[:1] + y.shape[2:], dtype=complex)
        for j in range(y.shape[0]):
            slice_maps = maps[j] if eigval is None else mask_maps(maps[j], eigval[j], args.map_crop)
            if not slice_maps.any():
                log.warning("slice %d: %s maps are empty, reconstruction left at zero", j, args.maps)
                continue
            image[j] = solver(y[j], maps[j], mask, cfg, None if eigval is None else eigval[j]).image
    container.set("recon.c64", image)
    container.extra["recon"] = {"method": args.method, "maps": args.maps, "mask_maps": args.mask_maps}
    _record(container, "recon", vars(args))
    save_dataset(container, args.input)


def cmd_eval(args) -> None:
    from .metrics import evaluate_slices

    container = load_dataset(args.input)
    recon = container.get("recon.c64")
    reference = rss_combine(ifft2c(container.get("kspace.c64")))
    maps_est = container.arrays.get("maps_est.c64")
    maps_ref = container.arrays.get("maps_ref.c64")
    support = None
    if maps_est is not None and maps_ref is not None:
        support = container.get("eigval.f32") >= args.support_crop
    report = evaluate_slices(recon, reference, maps_est, maps_ref, support, args.window,
                             config={"against": args.against, **container.extra.get("recon", {})})
    container.set("errmap.f32", report.error_maps)
    out = Path(args.input)
    (out / "eval.json").write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in report.csv_rows():
            writer.writerow(row)
    _record(container, "eval", vars(args))
    save_dataset(container, args.input)


def cmd_report(args) -> None:
    import matplotlib

    matplotlib.use("svg")
    from matplotlib import pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in args.input:
        path = Path(d)
        if not (path / "eval.json").exists():
            raise ArtifactMissing(str(path / "eval.json"))
        report = json.loads((path / "eval.json").read_text(encoding="utf-8"))
        agg = report["aggregate"]
        rows.append([path.name, agg["nrmse_mean"], agg["psnr_db_mean"], agg.get("pearson_mean", "")])
        container = load_dataset(path)
        errmap = container.get("errmap.f32")
        ns = errmap.shape[0]
        fig, axes = plt.subplots(1, ns, figsize=(2 * ns, 2.2), squeeze=False)
        for j, ax in enumerate(axes[0]):
            ax.imshow(errmap[j], cmap="magma", vmin=0, vmax=float(errmap.max()) or 1.0)
            ax.set_title(f"slice {j}", fontsize=8)
            ax.axis("off")
        fig.savefig(out / f"{path.name}_errmap.svg")
        plt.close(fig)
        if report.get("pearson"):
            per_channel = np.mean(np.asarray(report["pearson"]), axis=0)
            fig, ax = plt.subplots(figsize=(4, 2.5))
            ax.bar(np.arange(per_channel.size), per_channel)
            ax.set_ylim(min(0.0, float(per_channel.min())), 1.0)
            ax.set_xlabel("channel")
            ax.set_ylabel("map correlation")
            fig.tight_layout()
            fig.savefig(out / f"{path.name}_correlation.svg")
            plt.close(fig)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "nrmse_mean", "psnr_db_mean", "pearson_mean"])
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dlespirit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="synthesize a multi-coil dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=_dims, default=(8, 4, 32, 32), help="SxCxHxW")
    s.add_argument("--coils", type=int)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--slice-spacing", type=float, default=1.0)
    s.add_argument("--geometry-ranges", help="key = low, high file for alpha beta gamma m n t")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("undersample", help="record a uniform sampling mask")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--R", type=int, required=True)
    s.add_argument("--offset", type=int, default=0)
    s.set_defaults(func=cmd_undersample)

    s = sub.add_parser("calibrate", help="reference ESPIRiT maps from the ACS block")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--acs", type=int, default=24)
    s.add_argument("--kernel", type=int, default=6)
    s.add_argument("--eig-crop", type=float)
    s.add_argument("--threshold", type=float, default=CalibConfig.sv_rel_threshold)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("maps-transform", help="ESPIRiT maps in the reference stack")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--threshold", type=float, default=CalibConfig.sv_rel_threshold)
    s.set_defaults(func=cmd_maps_transform)

    s = sub.add_parser("train", help="train the map estimator")
    s.add_argument("--data", required=True, help="glob of dataset directories")
    s.add_argument("--net", help="network config file")
    s.add_argument("--train", help="training config file")
    s.add_argument("--out", required=True)
    s.add_argument("--lambda-mode", choices=["trainable", "linear_decay", "fixed"])
    s.add_argument("--accelerations", type=_ints, default=(2, 4))
    s.add_argument("--crop", type=float, default=0.9)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("estimate", help="estimate maps from the undersampled data")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--support-threshold", type=float, default=0.3)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("recon", help="reconstruct the undersampled data")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--method", choices=["zero-fill", "sense", "l1-espirit"], default="l1-espirit")
    s.add_argument("--maps", choices=sorted(_MAP_FILES), default="ref")
    s.add_argument("--mask-maps", action="store_true",
                   help="crop ref/trans maps at --map-crop of their eigenvalue map")
    s.add_argument("--map-crop", type=float, default=0.9)
    s.add_argument("--cg-tol", type=float, default=1e-8)
    s.set_defaults(func=cmd_recon)

    s = sub.add_parser("eval", help="compare the reconstruction with the fully sampled RSS image")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--against", choices=["full"], default="full")
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--support-crop", type=float, default=0.9)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="CSV summary and SVG figures for evaluated datasets")
    s.add_argument("--in", dest="input", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, message: str, field=None) -> int:
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(1, "UsageError", str(exc))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except ArtifactMissing as exc:
        return _fail(2, "ArtifactMissing", exc.message, exc.field)
    except (ContainerError, ConfigError) as exc:
        return _fail(1, type(exc).__name__, str(exc), exc.field)
    except Exception as exc:  # noqa: BLE001 - every failure must surface as JSON
        log.debug("stage failed", exc_info=True)
        return _fail(1, type(exc).__name__, str(exc))
    return 0
