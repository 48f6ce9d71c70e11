"""Command-line entry point: ``tomodip <command> [options]``.

Every command exits 0 on success.  Failures print one JSON object
``{"error": ..., "message": ...}`` to stderr (and to ``error.json`` in the
output directory when one is known) and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import reprojection_metrics, view_angles
from .io import FormatError, RunConfig, atomic_write_text, read_volume, write_png, write_volume
from .metrics import evaluate
from .operators import (
    Geometry,
    IdentityOperator,
    ParallelBeamOperator,
    SinogramSet,
    fbp,
    novel_view_angles,
    parallel_geometry,
    project_volume,
)
from .phantoms import PhantomSpec, add_gaussian_noise, make_phantom, random_phantom, shepp_logan_3d
from .solver import WarmStart, run, warm_start

__all__ = ["main", "build_parser", "execute_run"]

DENOISE_STAGE1_ITERS = 1000
REQUIRED_RUN_FILES = ("config.json", "log.csv", "volume.raw", "volume.json", "metrics.json")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--seed", type=int, help="seed for the network, random init and phantoms")
    p.add_argument("--deterministic", action="store_true", help="bit-reproducible mode")
    p.add_argument("--out", required=True, help="output directory (or file stem for single artifacts)")
    p.add_argument("--mode", choices=["fastdip", "aseqdip", "aseqdip_tv", "fbp"])
    p.add_argument("--views", type=int)
    p.add_argument("--arc-degrees", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lambda_ae", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--inner", type=int)
    p.add_argument("--lr", type=float, help="network learning rate")
    p.add_argument("--stage1-iters", type=int, help="network-only warm-up iterations")
    p.add_argument("--safeguard", choices=["fixed", "lipschitz"])
    p.add_argument("--png-slices", type=int, nargs="*", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tomodip", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a phantom volume")
    p.add_argument("--out", required=True, help="output file stem")
    p.add_argument("--dims", type=int, nargs=3, default=[16, 64, 64], metavar=("S", "H", "W"))
    p.add_argument("--kind", choices=["random", "shepp_logan"], default="random")
    p.add_argument("--spec", help="PhantomSpec JSON (overrides --kind)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-inclusions", type=int, default=8)

    p = sub.add_parser("project", help="project a volume to a sinogram")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--geometry", choices=["sparse_view", "limited_angle"], default="sparse_view")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--arc-degrees", type=float)
    p.add_argument("--pixel-spacing", type=float, help="pixel (and detector) size, length units")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="Gaussian noise, 0-255 scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["f32le", "f64le"], default="f64le")

    p = sub.add_parser("fbp", help="filtered backprojection of a sinogram")
    p.add_argument("--sinogram", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", choices=["ram-lak", "hann"], default="ram-lak")

    p = sub.add_parser("denoise", help="denoise noisy image(s) (A = I)")
    p.add_argument("--input", help="noisy volume file; omitted: built from --clean and --sigma")
    p.add_argument("--clean", help="clean reference volume (for metrics)")
    p.add_argument("--sigma", type=float, default=25.0)
    _common(p)

    p = sub.add_parser("reconstruct", help="reconstruct a volume from a sinogram")
    p.add_argument("--sinogram", help="input sinogram; omitted: simulated from the config")
    p.add_argument("--ground-truth", help="reference volume (for metrics)")
    _common(p)

    p = sub.add_parser("eval", help="compare two volumes")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--data-range", type=float, default=1.0)
    p.add_argument("--out", help="optional CSV file")

    p = sub.add_parser("sweep", help="grid over gamma or lambda")
    p.add_argument("--param", choices=["gamma", "lambda"], default="gamma")
    p.add_argument("--values", type=float, nargs="+", default=[3e-1, 1e-1, 1e-2, 8e-3])
    p.add_argument("--sinogram")
    p.add_argument("--ground-truth")
    p.add_argument("--metric", choices=["given_psnr", "novel_psnr"], default="given_psnr")
    _common(p)
    return ap


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    sol = cfg.solver
    upd = {}
    if args.mode and args.mode != "fbp":
        upd["mode"] = args.mode
    for key, name in [("lambda_ae", "lambda_ae"), ("beta_step", "beta"), ("outer_iters", "iters"),
                      ("inner_steps", "inner"), ("alpha_lr", "lr"), ("beta_safeguard", "safeguard")]:
        val = getattr(args, name, None)
        if val is not None:
            upd[key] = val
    if getattr(args, "stage1_iters", None) is not None:
        upd["stage1_iters"] = args.stage1_iters
        upd["two_stage"] = args.stage1_iters > 0
    if args.gamma is not None:
        upd["prior"] = replace(sol.prior, gamma=args.gamma)
    if args.seed is not None:
        upd["seed"] = args.seed
        cfg.network = replace(cfg.network, seed=args.seed)
        cfg.phantom_seed = args.seed
    if args.deterministic:
        upd["deterministic"] = True
    cfg.solver = replace(sol, **upd)
    if args.views is not None:
        cfg.views = args.views
    if args.arc_degrees is not None:
        cfg.arc_degrees = args.arc_degrees
    if args.png_slices is not None:
        cfg.png_slices = tuple(args.png_slices)
    cfg.out_dir = args.out
    return cfg


def _simulate(cfg: RunConfig) -> tuple[SinogramSet, np.ndarray]:
    gt = make_phantom(random_phantom(cfg.dims, seed=cfg.phantom_seed))
    geom = parallel_geometry(gt.shape[1:], view_angles(cfg.kind, cfg.views, cfg.arc_degrees),
                             cfg.pixel_spacing)
    sino = project_volume(gt, geom)
    if cfg.noise_sigma > 0:
        sino = add_gaussian_noise(sino, cfg.noise_sigma, cfg.noise_seed)
    return sino, gt


def _load_sinogram(path: str) -> SinogramSet:
    data, header = read_volume(path)
    if "geometry" not in header:
        raise FormatError(f"{path} has no geometry in its header")
    return SinogramSet(data, Geometry.from_dict(header["geometry"]))


def _export_pngs(out: Path, volume: np.ndarray, slices, prefix: str = "slice") -> list[dict]:
    picks = sorted({volume.shape[0] // 2, *slices})
    records = []
    for s in picks:
        if not 0 <= s < volume.shape[0]:
            raise CliError("dimension_mismatch", f"slice {s} outside volume with {volume.shape[0]} slices")
        records.append(write_png(out / f"{prefix}_{s:03d}.png", volume[s]))
    return records


def _check_run_dir(out: Path) -> None:
    missing = [f for f in REQUIRED_RUN_FILES if not (out / f).exists()]
    if missing:
        raise CliError("incomplete_run", f"run directory lacks {missing}")


def execute_run(cfg: RunConfig, measurements, operator, ground_truth=None,
                fbp_only: bool = False, geometry: Geometry | None = None,
                warm: WarmStart | None = None) -> dict:
    """Run one reconstruction and write the run directory; returns the metrics.

    ``warm`` reuses a first stage computed for the same measurements.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    cfg_dict["mode_label"] = "fbp" if fbp_only else cfg.solver.mode
    atomic_write_text(out / "config.json", json.dumps(cfg_dict, indent=2))
    t0 = time.perf_counter()
    y = measurements.data if isinstance(measurements, SinogramSet) else np.asarray(measurements)
    if fbp_only:
        volume = operator.pseudo_inverse(y)
        log_text = "iter,F,G,Ls_pre,Ls_post,dz_norm,psnr,seconds\n"
        atomic_write_text(out / "log.csv", log_text)
    else:
        result = run(y, operator, cfg.solver, ground_truth=ground_truth, network=cfg.network,
                     warm=warm)
        volume = result.volume
        result.log.to_csv(out / "log.csv")
        result.params.save(out / "network")
    metrics: dict = {"mode": cfg_dict["mode_label"], "seconds": time.perf_counter() - t0}
    if ground_truth is not None:
        metrics["volume"] = evaluate(volume, ground_truth).__dict__
        if geometry is not None:
            rep = reprojection_metrics(volume, ground_truth, geometry, cfg.n_novel)
            metrics.update(rep)
    if geometry is not None:
        write_volume(out / "reproj_given", project_volume(volume, geometry).data,
                     dims_order="slice,angle,detector", geometry=geometry, config=cfg_dict)
        novel = geometry.with_angles(novel_view_angles(cfg.n_novel, geometry.angles))
        write_volume(out / "reproj_novel", project_volume(volume, novel).data,
                     dims_order="slice,angle,detector", geometry=novel, config=cfg_dict)
    pngs = _export_pngs(out, volume, cfg.png_slices)
    write_volume(out / "volume", volume, config=cfg_dict, extra={"png": pngs})
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2, default=float))
    _check_run_dir(out)
    return metrics


def _cmd_phantom(args) -> dict:
    if args.spec:
        spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
    elif args.kind == "shepp_logan":
        spec = shepp_logan_3d(tuple(args.dims))
    else:
        spec = random_phantom(tuple(args.dims), args.n_inclusions, args.seed)
    vol = make_phantom(spec)
    path = write_volume(args.out, vol, config=spec.to_dict())
    png = write_png(Path(path).with_suffix(".png"), vol[vol.shape[0] // 2])
    return {"volume": str(path), "dims": list(vol.shape), "png": png}


def _cmd_project(args) -> dict:
    vol, _ = read_volume(args.volume)
    if vol.ndim != 3:
        raise CliError("dimension_mismatch", f"expected a (S, H, W) volume, got {vol.shape}")
    geom = parallel_geometry(vol.shape[1:], view_angles(args.geometry, args.views, args.arc_degrees),
                             args.pixel_spacing)
    sino = project_volume(vol, geom)
    if args.noise_sigma > 0:
        sino = add_gaussian_noise(sino, args.noise_sigma, args.seed)
    path = write_volume(args.out, sino.data, dtype=args.dtype, dims_order="slice,angle,detector",
                        geometry=geom, config=vars(args))
    return {"sinogram": str(path), "dims": list(sino.data.shape)}


def _cmd_fbp(args) -> dict:
    sino = _load_sinogram(args.sinogram)
    vol = fbp(sino, window=args.window)
    path = write_volume(args.out, vol, config=vars(args))
    return {"volume": str(path), "dims": list(vol.shape)}


def _cmd_denoise(args) -> dict:
    cfg = _run_config(args)
    cfg.kind = "denoise"
    clean = read_volume(args.clean)[0] if args.clean else None
    if args.input:
        noisy = read_volume(args.input)[0]
    elif clean is not None:
        noisy = add_gaussian_noise(clean, args.sigma, cfg.noise_seed)
    else:
        raise CliError("missing_input", "denoise needs --input or --clean")
    if noisy.ndim == 2:
        noisy = noisy[None]
    if args.config is None:
        # Denoising defaults: warm up the network on the noisy image, then the
        # larger step capped by the curvature estimate.
        s1 = DENOISE_STAGE1_ITERS if args.stage1_iters is None else args.stage1_iters
        cfg.solver = replace(cfg.solver, z_init="measurements", two_stage=s1 > 0,
                             stage1_iters=s1, beta_safeguard=args.safeguard or "lipschitz",
                             beta_step=args.beta if args.beta is not None else 0.9)
        if noisy.shape[0] == 1:
            # a single image has no slice neighbours: difference along rows
            cfg.solver = replace(cfg.solver, prior=replace(cfg.solver.prior, axis=1))
    if clean is not None:
        clean = clean[None] if clean.ndim == 2 else clean
        if clean.shape != noisy.shape:
            raise CliError("dimension_mismatch", f"clean {clean.shape} vs noisy {noisy.shape}")
    metrics = execute_run(cfg, noisy, IdentityOperator(), clean, fbp_only=args.mode == "fbp")
    if clean is not None:
        metrics["noisy_input"] = evaluate(noisy, clean).__dict__
        atomic_write_text(Path(cfg.out_dir) / "metrics.json", json.dumps(metrics, indent=2))
    return metrics


def _reconstruct_inputs(args, cfg: RunConfig):
    if args.sinogram:
        sino = _load_sinogram(args.sinogram)
        gt = read_volume(args.ground_truth)[0] if args.ground_truth else None
    else:
        sino, gt = _simulate(cfg)
    if gt is not None and gt.shape != (sino.num_slices,) + tuple(sino.geometry.image_size):
        raise CliError("dimension_mismatch", f"ground truth {gt.shape} does not match sinogram")
    return sino, gt


def _cmd_reconstruct(args) -> dict:
    cfg = _run_config(args)
    sino, gt = _reconstruct_inputs(args, cfg)
    op = ParallelBeamOperator(sino.geometry)
    return execute_run(cfg, sino, op, gt, fbp_only=args.mode == "fbp", geometry=sino.geometry)


def _cmd_eval(args) -> dict:
    a, _ = read_volume(args.a)
    b, _ = read_volume(args.b)
    if a.shape != b.shape:
        raise CliError("dimension_mismatch", f"{a.shape} vs {b.shape}")
    report = evaluate(a, b, args.data_range)
    if args.out:
        atomic_write_text(args.out, report.csv_row(header=True))
    return report.__dict__


def _cmd_sweep(args) -> dict:
    base = _run_config(args)
    sino, gt = _reconstruct_inputs(args, base)
    if gt is None:
        raise CliError("missing_input", "sweep needs a ground truth to score")
    op = ParallelBeamOperator(sino.geometry)
    # The first stage does not involve the swept parameters when sweeping gamma.
    warm = warm_start(sino.data, op, base.solver, base.network) if args.param == "gamma" else None
    rows = []
    for val in args.values:
        cfg = RunConfig.from_dict(base.to_dict())
        if args.param == "gamma":
            cfg.solver = replace(cfg.solver, prior=replace(cfg.solver.prior, gamma=val))
        else:
            cfg.solver = replace(cfg.solver, lambda_ae=val)
        cfg.out_dir = str(Path(base.out_dir) / f"{args.param}_{val:g}")
        m = execute_run(cfg, sino, op, gt, geometry=sino.geometry, warm=warm)
        rows.append({args.param: val, "given_psnr": m["given"]["psnr"],
                     "given_ms_ssim": m["given"]["ms_ssim"], "novel_psnr": m["novel"]["psnr"],
                     "novel_ms_ssim": m["novel"]["ms_ssim"]})
    best = int(np.argmax([r[args.metric] for r in rows]))
    for i, r in enumerate(rows):
        r["argmax"] = int(i == best)
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(Path(base.out_dir) / "sweep.csv", buf.getvalue())
    return {"rows": rows, "argmax": rows[best][args.param], "metric": args.metric}


COMMANDS = {
    "phantom": _cmd_phantom, "project": _cmd_project, "fbp": _cmd_fbp, "denoise": _cmd_denoise,
    "reconstruct": _cmd_reconstruct, "eval": _cmd_eval, "sweep": _cmd_sweep,
}


def _classify(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, FormatError):
        return "malformed_input"
    if isinstance(exc, FileNotFoundError):
        return "missing_input"
    if isinstance(exc, FloatingPointError) or "non-finite" in str(exc):
        return "non_finite"
    if "shape" in str(exc) or "dimension" in str(exc):
        return "dimension_mismatch"
    return type(exc).__name__


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # reported as JSON, never as a traceback
        err = {"error": _classify(exc), "message": str(exc), "command": args.command}
        text = json.dumps(err)
        print(text, file=sys.stderr)
        out = getattr(args, "out", None)
        if out and Path(out).is_dir():
            atomic_write_text(Path(out) / "error.json", text)
        return 2
    print(json.dumps(result, indent=2, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
