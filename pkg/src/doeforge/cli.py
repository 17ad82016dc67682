"""``doeforge`` command line: PSF simulation, rendering, DOE design, training and evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import doe as doe_mod
from .dataset import SceneSpec, generate_scene, illuminate, load_hsdc, load_illuminants, read_hsdc, save_hsdc
from .imaging import HsdScene, render_sensor_image
from .optics import CameraConfig, CameraResponse, DepthSet, PhaseMap, WavelengthSet, make_depths, make_wavelengths, phase_to_height
from .previews import psf_montage, write_pfm, write_png16
from .psf import psf_stack
from .reconstructor import metrics, reconstruct

log = logging.getLogger("doeforge")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _split_range(text: str, what: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"{what} must look like min:max:n, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be numeric, got {text!r}") from None


def lambdas_arg(text: str) -> WavelengthSet:
    """``min:max:step`` in nm."""
    lo, hi, step = _split_range(text, "--lambdas")
    try:
        return make_wavelengths(lo, hi, step)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def depths_arg(text: str) -> DepthSet:
    """``min:max:count`` in m, uniform in disparity."""
    lo, hi, count = _split_range(text, "--depths")
    if count != int(count):
        raise argparse.ArgumentTypeError("depth count must be an integer")
    try:
        return make_depths(lo, hi, int(count))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _camera(args) -> CameraConfig:
    if args.camera == "prototype":
        return CameraConfig.prototype()
    if args.camera == "bench":
        return CameraConfig.bench(args.features, args.crop)
    return CameraConfig.desk(args.features, args.crop)


def _load_doe(spec: str, camera: CameraConfig, depths: DepthSet) -> PhaseMap:
    """``fresnel``, ``spiral``, a ``.npy`` phase map or a checkpoint directory."""
    z0 = 2.0 / (1 / depths.z_min + 1 / depths.z_max)
    if spec == "fresnel":
        return doe_mod.fresnel_phase(camera, 550.0, z0)
    if spec == "spiral":
        return doe_mod.spiral_phase(camera, 550.0, z0)
    p = Path(spec)
    if p.is_dir():
        p = p / "phase.npy"
    if not p.exists():
        raise FileNotFoundError(f"DOE {spec!r}: expected fresnel, spiral, a .npy phase map or a checkpoint directory")
    phase = PhaseMap(np.load(p), label=p.stem)
    if phase.shape[0] != camera.feature_grid_size:
        raise ValueError(f"phase map {phase.shape} does not match the {camera.feature_grid_size}-feature camera")
    return phase


def _height(phase: PhaseMap, camera: CameraConfig):
    return phase_to_height(phase, camera.dispersion, camera.feature_pitch_m)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _metrics_table(rows: dict[str, dict]) -> str:
    keys = ["psnr_db", "ssim", "depth_rmse_m", "depth_mae_m"]
    lines = [f"{'':16s}" + "".join(f"{k:>14s}" for k in keys)]
    for name, m in rows.items():
        lines.append(f"{name:16s}" + "".join(f"{m[k]:14.4f}" for k in keys))
    return "\n".join(lines)


# subcommand handlers return the list of files they wrote


def cmd_simulate_psf(args) -> list[Path]:
    cam = _camera(args)
    phase = _load_doe(args.doe, cam, args.depths)
    stack = psf_stack(_height(phase, cam), cam, args.lambdas, args.depths, jobs=args.jobs)
    print(f"{len(stack)} PSF slices ({len(args.lambdas)} wavelengths x {len(args.depths)} depths), {cam.psf_crop_px} px")
    out = Path(args.out)
    save_hsdc(stack, out, extra={"doe": phase.label})
    written = [out]
    if args.preview:
        write_png16(args.preview, psf_montage(stack.psfs))
        written.append(Path(args.preview))
    return written


def cmd_render(args) -> list[Path]:
    cam = _camera(args)
    scene = load_hsdc(args.scene)
    if not isinstance(scene, HsdScene):
        raise ValueError(f"{args.scene} is not a scene file")
    if scene.domain == "reflectance":
        scene = illuminate(scene, load_illuminants(wavelengths=scene.wavelengths)[args.illuminant])
    phase = _load_doe(args.doe, cam, args.depths)
    stack = psf_stack(_height(phase, cam), cam, scene.wavelengths, args.depths, jobs=args.jobs)
    img = render_sensor_image(stack, scene, CameraResponse.default(scene.wavelengths), args.noise, args.seed)
    out = Path(args.out)
    save_hsdc(img.J, out, "rgb", extra={"noise_sigma": args.noise, "seed": args.seed, "doe": phase.label})
    written = [out]
    if args.preview:
        write_png16(args.preview, np.clip(img.J, 0, None))
        written.append(Path(args.preview))
    return written


def cmd_optimize_fisher(args) -> list[Path]:
    cam = _camera(args)
    init = _load_doe(args.init, cam, args.depths)
    opts = doe_mod.FisherOptions(iterations=args.iterations, lr=args.lr, eps_rel=args.eps_rel)
    res = doe_mod.optimize_fisher_doe(init, cam, args.lambdas, args.depths, args.sigma, opts)
    print(f"mean A-optimality: {res.initial:.6g} -> {res.best:.6g} (best iteration {res.best_iteration})")
    out = Path(args.out)
    np.save(out, res.phase.phi)
    trace = out.with_suffix(".trace.json")
    _write_json(trace, {"trace": res.trace, "best_iteration": res.best_iteration, "brightness": res.brightness})
    return [out, trace]


def cmd_crlb(args) -> list[Path]:
    cam = _camera(args)
    scores = {}
    for spec in args.doe:
        phase = _load_doe(spec, cam, args.depths)
        scores[spec] = doe_mod.crlb_score(phase, cam, args.lambdas, args.depths, args.sigma)
        tag = " (approximate)" if spec == "spiral" else ""
        print(f"{spec}{tag}: CRLB score {scores[spec]:.6g}")
    if args.out:
        _write_json(Path(args.out), scores)
        return [Path(args.out)]
    return []


def _scenes_from(args, wavelengths) -> list[HsdScene]:
    if args.scenes:
        files = sorted(Path(args.scenes).glob("*.hsdc"))
        if not files:
            raise FileNotFoundError(f"no .hsdc scenes in {args.scenes}")
        return [load_hsdc(f) for f in files]
    z = args.depths
    spec = lambda i: SceneSpec(args.scene_size, args.scene_size, seed=args.seed * 100_003 + i)  # noqa: E731
    return [generate_scene(spec(i), wavelengths, (z.z_min, z.z_max)) for i in range(args.generate)]


def cmd_train(args) -> list[Path]:
    from .train import TrainConfig, train_e2e

    cfg = TrainConfig(
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch_size,
        patch_px=args.patch,
        lr_doe=args.lr_doe,
        lr_net=args.lr_net,
        doe_freeze_epoch=args.freeze_epoch,
        train_doe=not args.fixed_doe,
        seed=args.seed,
        wavelengths=args.lambdas.values,
        depths=args.depths.depths_m,
        levels=args.levels,
        width=args.width,
        features=args.features,
        crop=args.crop,
        init=args.init,
        fisher_iterations=args.fisher_iterations,
        dtype=args.dtype,
    )
    scenes = _scenes_from(args, cfg.wavelength_set)
    n_val = min(args.val_count, len(scenes) - 1)
    train, val = scenes[: len(scenes) - n_val], scenes[len(scenes) - n_val :]
    out = Path(args.out)
    phase, net, tlog = train_e2e(train, cfg, val, out_dir=out, resume=args.resume)
    np.save(out / "phase.npy", phase.phi)
    best = next((e for e in tlog.epochs if e["epoch"] == tlog.best_epoch), None)
    if best is not None and "psnr_db" in best:
        print(_metrics_table({f"epoch {tlog.best_epoch}": best}))
    elif tlog.epochs:
        print(f"final training loss {tlog.epochs[-1]['train_loss']:.6g}")
    return [out / "phase.npy", out / "log.jsonl"]


def cmd_reconstruct(args) -> list[Path]:
    from .train import load_checkpoint

    _, net, cfg = load_checkpoint(args.checkpoint)
    f = read_hsdc(args.image)
    if f.planes.shape[0] != 3:
        raise ValueError(f"{args.image}: expected a 3-channel sensor image, found {f.planes.shape[0]} planes")
    rec = reconstruct(f.planes, net)
    spectral = np.clip(rec.spectral, 0, None)
    depth = rec.depth
    scene = HsdScene(spectral, depth, np.ones(depth.shape, np.float32), cfg.wavelength_set, "radiance")
    out = Path(args.out)
    save_hsdc(scene, out, "radiance")
    written = [out]
    if args.depth_pfm:
        write_pfm(args.depth_pfm, depth)
        written.append(Path(args.depth_pfm))
    return written


def cmd_evaluate(args) -> list[Path]:
    truth = load_hsdc(args.truth)
    if not isinstance(truth, HsdScene):
        raise ValueError(f"{args.truth} is not a scene file")
    rows = {}
    if args.per_illuminant:
        from .imaging import render_sensor_image as _render
        from .psf import PsfStack
        from .train import load_checkpoint

        if not args.checkpoint:
            raise ValueError("--per-illuminant needs --checkpoint")
        phase, net, cfg = load_checkpoint(args.checkpoint)
        cam = cfg.camera()
        if truth.wavelengths != cfg.wavelength_set:
            raise ValueError("scene and checkpoint use different wavelength sets")
        stack = psf_stack(_height(phase, cam), cam, cfg.wavelength_set, cfg.depth_set, jobs=args.jobs)
        resp = CameraResponse.default(cfg.wavelength_set)
        for name, ill in load_illuminants(wavelengths=truth.wavelengths).items():
            scene = illuminate(truth, ill) if truth.domain == "reflectance" else truth
            img = _render(stack, scene, resp, args.noise, args.seed)
            rec = reconstruct(img.J, net)
            rows[name] = metrics(rec.spectral, rec.inv_depth, scene.radiance, scene.depth, scene.valid_mask)
    else:
        if not args.pred:
            raise ValueError("evaluate needs --pred (or --per-illuminant with --checkpoint)")
        pred = load_hsdc(args.pred)
        if not isinstance(pred, HsdScene):
            raise ValueError(f"{args.pred} is not a scene file")
        if pred.radiance.shape != truth.radiance.shape:
            raise ValueError(f"prediction {pred.radiance.shape} and ground truth {truth.radiance.shape} differ in shape")
        rows["prediction"] = metrics(pred.radiance, 1.0 / np.asarray(pred.depth, float), truth.radiance, truth.depth, truth.valid_mask)
    print(_metrics_table(rows))
    if args.out:
        _write_json(Path(args.out), rows)
        return [Path(args.out)]
    return []


def cmd_export_doe(args) -> list[Path]:
    cam = _camera(args)
    phase = _load_doe(args.doe, cam, args.depths)
    out = doe_mod.export_doe(_height(phase, cam), args.out, args.levels, args.step, args.upsample, cam.dispersion)
    grid = doe_mod.load_doe_bundle(out)
    print(f"fabrication grid {grid.shape[0]}x{grid.shape[1]}, {args.levels} levels of {args.step * 1e9:.1f} nm")
    return [out / "metadata.json", out / "height.f32", out / "preview.pgm"]


def cmd_gen_dataset(args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z = args.depths

    def one(i):
        spec = SceneSpec(args.size, args.size, seed=args.seed * 100_003 + i)
        path = out / f"scene_{i:04d}.hsdc"
        save_hsdc(generate_scene(spec, args.lambdas, (z.z_min, z.z_max)), path)
        return path

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            paths = list(pool.map(one, range(args.count)))
    else:
        paths = [one(i) for i in range(args.count)]
    print(f"wrote {len(paths)} scenes to {out}")
    return paths


def cmd_gradcheck(args) -> list[Path]:
    from .train import pipeline_gradcheck

    errs = pipeline_gradcheck(args.size, args.seed, args.probes)
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} (phase {errs['phase']:.3e}, network {errs['theta']:.3e})")
    if args.out:
        _write_json(Path(args.out), errs)
    args._status = 0 if worst <= 1e-3 else EXIT_RUNTIME
    return [Path(args.out)] if args.out else []


def _common(p, camera=True, doe=False, lambdas=None, depths="0.4:2.0:7"):
    if camera:
        p.add_argument("--camera", choices=["desk", "bench", "prototype"], default="desk", help="camera preset")
        p.add_argument("--features", type=int, default=64, help="DOE features per side (desk and bench cameras)")
        p.add_argument("--crop", type=int, default=33, help="PSF crop in sensor pixels (desk and bench cameras)")
    if doe:
        p.add_argument("--doe", default="fresnel", help="fresnel, spiral, a .npy phase map or a checkpoint directory")
    if lambdas:
        p.add_argument("--lambdas", type=lambdas_arg, default=lambdas_arg(lambdas), help=f"min:max:step nm (default {lambdas})")
    if depths:
        p.add_argument("--depths", type=depths_arg, default=depths_arg(depths), help=f"min:max:count m (default {depths})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="doeforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"doeforge {__version__}")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads (1 is deterministic)")
    parser.add_argument("--seed", type=int, default=0, help="random seed (DOEFORGE_SEED overrides)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate-psf", help="PSF stack of a DOE over wavelength and depth")
    _common(p, doe=True, lambdas="420:660:10")
    p.add_argument("--out", required=True, help="output HSDC file")
    p.add_argument("--preview", help="optional PNG montage")
    p.set_defaults(func=cmd_simulate_psf)

    p = sub.add_parser("render", help="sensor image of a scene through a DOE")
    _common(p, doe=True)
    p.add_argument("--scene", required=True, help="input HSDC scene")
    p.add_argument("--illuminant", default="D65", help="illuminant for reflectance scenes")
    p.add_argument("--noise", type=float, default=0.005, help="Gaussian noise sigma")
    p.add_argument("--out", required=True, help="output HSDC image")
    p.add_argument("--preview", help="optional PNG preview")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("optimize-fisher", help="Fisher-information DOE design")
    _common(p, lambdas="460:640:90", depths="0.4:2.0:3")
    p.add_argument("--init", default="fresnel", help="initial DOE")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--sigma", type=float, default=0.005)
    p.add_argument("--eps-rel", type=float, default=1e-6, help="Tikhonov weight relative to the smallest Fisher diagonal")
    p.add_argument("--out", required=True, help="output .npy phase map")
    p.set_defaults(func=cmd_optimize_fisher)

    p = sub.add_parser("crlb", help="CRLB score of one or more DOEs")
    _common(p, lambdas="460:640:90", depths="0.4:2.0:3")
    p.add_argument("--doe", nargs="+", default=["fresnel"], help="DOEs to score")
    p.add_argument("--sigma", type=float, default=0.005)
    p.add_argument("--out", help="optional JSON output")
    p.set_defaults(func=cmd_crlb)

    p = sub.add_parser("train", help="joint DOE and network training")
    _common(p, camera=False, lambdas="420:660:30", depths="0.4:2.0:3")
    p.add_argument("--features", type=int, default=64)
    p.add_argument("--crop", type=int, default=33)
    p.add_argument("--scenes", help="directory of HSDC scenes (default: generate)")
    p.add_argument("--generate", type=int, default=24, help="synthetic scenes when --scenes is absent")
    p.add_argument("--scene-size", type=int, default=160)
    p.add_argument("--val-count", type=int, default=4)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--patch", type=int, default=128)
    p.add_argument("--lr-doe", type=float, default=1e-4)
    p.add_argument("--lr-net", type=float, default=1e-4)
    p.add_argument("--freeze-epoch", type=int, default=12)
    p.add_argument("--fixed-doe", action="store_true", help="train the network only")
    p.add_argument("--init", default="fisher", help="fisher, fresnel, spiral or a .npy phase map")
    p.add_argument("--fisher-iterations", type=int, default=200)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="spectral cube and depth from a sensor image")
    p.add_argument("--image", required=True, help="3-channel HSDC sensor image")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True, help="output HSDC scene")
    p.add_argument("--depth-pfm", help="optional PFM depth map")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="metrics of a prediction against ground truth")
    p.add_argument("--truth", required=True, help="ground-truth HSDC scene")
    p.add_argument("--pred", help="predicted HSDC scene")
    p.add_argument("--per-illuminant", action="store_true", help="render and reconstruct under every shipped illuminant")
    p.add_argument("--checkpoint", help="checkpoint for --per-illuminant")
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--out", help="optional metrics JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-doe", help="fabrication bundle for a DOE")
    _common(p, doe=True, depths="0.4:2.0:7")
    p.add_argument("--levels", type=int, default=62)
    p.add_argument("--step", type=float, default=21.5e-9, help="height of one level (m)")
    p.add_argument("--upsample", type=int, default=8)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_doe)

    p = sub.add_parser("gen-dataset", help="synthetic HS-D scenes")
    _common(p, camera=False, lambdas="420:660:10", depths="0.4:2.0:7")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--size", type=int, default=8, help="DOE features per side")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--out", help="optional JSON output")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest", help="manifest JSON written by an earlier run")
    p.set_defaults(func=None)
    return parser


def _serialize(v):
    if isinstance(v, WavelengthSet):
        return {"wavelengths_nm": list(v)}
    if isinstance(v, DepthSet):
        return {"depths_m": list(v)}
    return v


def _deserialize(v):
    if isinstance(v, dict) and "wavelengths_nm" in v:
        return WavelengthSet(tuple(v["wavelengths_nm"]))
    if isinstance(v, dict) and "depths_m" in v:
        return DepthSet(tuple(v["depths_m"]))
    return v


def _manifest_path(outputs: list[Path], args) -> Path | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _execute(args, argv) -> int:
    t0 = time.time()
    outputs = args.func(args)
    config = {k: _serialize(v) for k, v in vars(args).items() if k not in ("func", "_status", "verbose")}
    path = _manifest_path(outputs, args)
    if path is not None:
        _write_json(
            path,
            {
                "subcommand": args.command,
                "config": config,
                "tool_version": __version__,
                "seed": args.seed,
                "inputs": {k: v for k, v in config.items() if k in ("scene", "scenes", "image", "checkpoint", "truth", "pred", "doe", "init")},
                "outputs": [str(p) for p in outputs],
                "argv": list(argv),
                "wall_clock_s": time.time() - t0,
            },
        )
    return getattr(args, "_status", 0)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "replay":
            manifest = json.loads(Path(args.manifest).read_text())
            cfg = {k: _deserialize(v) for k, v in manifest["config"].items()}
            cfg["jobs"] = 1
            replay_args = argparse.Namespace(**cfg, verbose=args.verbose)
            sub = build_parser()._subparsers._group_actions[0].choices[manifest["subcommand"]]
            replay_args.func = sub.get_default("func")
            return _execute(replay_args, ["replay", args.manifest])
        if "DOEFORGE_SEED" in os.environ:
            args.seed = int(os.environ["DOEFORGE_SEED"])
        if args.jobs < 1:
            print("doeforge: error: --jobs must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        torch.manual_seed(args.seed)
        return _execute(args, argv)
    except (ValueError, OSError, KeyError, FloatingPointError, np.linalg.LinAlgError, json.JSONDecodeError) as e:
        print(f"doeforge {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


run = main

if __name__ == "__main__":
    sys.exit(main())
