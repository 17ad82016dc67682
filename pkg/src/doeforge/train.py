"""Joint optimization of the DOE phase and the reconstruction network."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import doe as doe_mod
from .dataset import illuminate, load_illuminants, rescale_scene
from .imaging import HsdScene, masks_tensor, render
from .optics import CameraConfig, CameraResponse, DepthSet, PhaseMap, WavelengthSet, make_depths, make_wavelengths
from .psf import psf_stack_from_phase
from .reconstructor import DualDecoderUNet, build_network, load_params, loss, metrics, save_params

log = logging.getLogger(__name__)

PATCH_VALID_FRACTION = 0.9
PATCH_RETRIES = 200


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int | None = None  # None: one pass over the training scenes
    batch_size: int = 8
    patch_px: int = 128
    lr_doe: float = 1e-4
    lr_net: float = 1e-4
    decay_factor: float = 0.1
    doe_decay_period: int = 10
    net_decay_period: int = 20
    doe_freeze_epoch: int = 12
    train_doe: bool = True
    noise_range: tuple[float, float] = (0.002, 0.01)
    seed: int = 0
    wavelengths: tuple[float, ...] = field(default_factory=lambda: make_wavelengths(420, 660, 30).values)
    depths: tuple[float, ...] = field(default_factory=lambda: make_depths(0.4, 2.0, 3).depths_m)
    levels: int = 3
    width: int = 16
    features: int = 64
    crop: int = 33
    init: str = "fisher"  # fisher | fresnel | spiral | path to a .npy phase
    fisher_iterations: int = 200
    alpha: float = 1.0
    beta: float = 1e-2
    gamma: float = 1e-2
    mask_blur_px: float = 1.0
    depth_shift_m: float = 0.2
    scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    illuminants: tuple[str, ...] | None = None  # None: every shipped illuminant
    val_noise: float = 0.005
    dtype: str = "float32"

    def __post_init__(self):
        if self.patch_px % 2**self.levels:
            raise ValueError(f"patch_px {self.patch_px} not divisible by 2^{self.levels}")
        if not (self.lr_doe > 0 and self.lr_net > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        lo, hi = self.noise_range
        if not 0 <= lo <= hi:
            raise ValueError("invalid noise range")
        self.noise_range = (float(lo), float(hi))
        self.wavelengths = tuple(float(x) for x in self.wavelengths)
        self.depths = tuple(float(x) for x in self.depths)
        self.scales = tuple(float(x) for x in self.scales)
        if self.illuminants is not None:
            self.illuminants = tuple(self.illuminants)

    @property
    def wavelength_set(self) -> WavelengthSet:
        return WavelengthSet(self.wavelengths)

    @property
    def depth_set(self) -> DepthSet:
        return DepthSet(self.depths)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def camera(self) -> CameraConfig:
        return CameraConfig.desk(self.features, self.crop)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("noise_range", "wavelengths", "depths", "scales"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    checkpoints: list[str] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])


def sample_patches(scene: HsdScene, patch_px: int, count: int, rng: np.random.Generator) -> list[HsdScene]:
    """Random crops whose validity mask covers at least 90% of the patch."""
    h, w = scene.shape
    if patch_px > h or patch_px > w:
        raise ValueError(f"scene {h}x{w} smaller than patch {patch_px}")
    valid = np.asarray(scene.valid_mask, float)
    # integral image for O(1) coverage queries
    ii = np.pad(valid.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    need = PATCH_VALID_FRACTION * patch_px * patch_px
    out = []
    for _ in range(count):
        for _ in range(PATCH_RETRIES):
            y, x = int(rng.integers(0, h - patch_px + 1)), int(rng.integers(0, w - patch_px + 1))
            cover = ii[y + patch_px, x + patch_px] - ii[y, x + patch_px] - ii[y + patch_px, x] + ii[y, x]
            if cover >= need - 1e-9:
                break
        else:
            raise ValueError(f"no patch with {PATCH_VALID_FRACTION:.0%} valid pixels after {PATCH_RETRIES} tries")
        sl = (slice(y, y + patch_px), slice(x, x + patch_px))
        out.append(HsdScene(scene.radiance[(slice(None),) + sl], scene.depth[sl], scene.valid_mask[sl], scene.wavelengths, scene.domain))
    return out


def lr_at(config: TrainConfig, epoch: int) -> tuple[float, float]:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    lr_net = config.lr_net * config.decay_factor ** (epoch // config.net_decay_period)
    if not config.train_doe or epoch >= config.doe_freeze_epoch:
        return 0.0, lr_net
    return config.lr_doe * config.decay_factor ** (epoch // config.doe_decay_period), lr_net


def initial_phase(config: TrainConfig, camera: CameraConfig, response: CameraResponse | None = None) -> PhaseMap:
    depths = config.depth_set
    if config.init == "fresnel":
        return doe_mod.default_fresnel(camera, depths)
    if config.init == "spiral":
        z0 = 2.0 / (1 / depths.z_min + 1 / depths.z_max)
        return doe_mod.spiral_phase(camera, 550.0, z0)
    if config.init == "fisher":
        res = doe_mod.optimize_fisher_doe(
            doe_mod.default_fresnel(camera, depths),
            camera,
            config.wavelength_set,
            depths,
            opts=doe_mod.FisherOptions(iterations=config.fisher_iterations),
            response=response,
        )
        return res.phase
    return PhaseMap(np.load(config.init), label=Path(config.init).stem)


def _augment(scene: HsdScene, config: TrainConfig, illums: list, rng: np.random.Generator) -> HsdScene:
    """Spatial scale, illuminant and global depth translation, then one patch."""
    scales = [s for s in config.scales if min(scene.shape) * s >= config.patch_px] or [1.0]
    scene = rescale_scene(scene, float(scales[rng.integers(len(scales))]))
    if scene.domain == "reflectance":
        scene = illuminate(scene, illums[rng.integers(len(illums))])
    (patch,) = sample_patches(scene, config.patch_px, 1, rng)
    shift = rng.uniform(-config.depth_shift_m, config.depth_shift_m)
    zmin, zmax = config.depths[0], config.depths[-1]
    depth = np.where(patch.valid_mask > 0, np.clip(patch.depth + shift, zmin, zmax), patch.depth)
    return HsdScene(patch.radiance, depth, patch.valid_mask, patch.wavelengths, patch.domain)


def _batch_tensors(patches: Sequence[HsdScene], config: TrainConfig):
    dt = config.torch_dtype
    radiance = torch.from_numpy(np.stack([p.radiance for p in patches])).to(dt)
    depth = np.stack([np.asarray(p.depth, np.float64) for p in patches])
    masks = masks_tensor(depth, config.depth_set, config.mask_blur_px, dt)
    inv = torch.from_numpy(1.0 / np.clip(depth, config.depths[0], config.depths[-1])).to(dt)
    return radiance, masks, inv


def validation_set(scenes: Sequence[HsdScene], config: TrainConfig) -> list[HsdScene]:
    """Deterministic held-out patches under D65 (center crop of each scene)."""
    d65 = load_illuminants(wavelengths=config.wavelength_set)["D65"]
    out = []
    p = config.patch_px
    for s in scenes:
        if s.domain == "reflectance":
            s = illuminate(s, d65)
        h, w = s.shape
        y, x = (h - p) // 2, (w - p) // 2
        sl = (slice(y, y + p), slice(x, x + p))
        out.append(HsdScene(s.radiance[(slice(None),) + sl], s.depth[sl], s.valid_mask[sl], s.wavelengths, s.domain))
    return out


def evaluate(phase: torch.Tensor, net: DualDecoderUNet, val: Sequence[HsdScene], config: TrainConfig, camera: CameraConfig, omega: torch.Tensor, psfs=None) -> dict:
    """Mean metrics over ``val`` with a fixed noise draw."""
    if not val:
        return {}
    was = net.training
    net.eval()
    g = torch.Generator().manual_seed(config.seed + 7919)
    rows = []
    with torch.no_grad():
        if psfs is None:
            psfs = psf_stack_from_phase(phase, camera, config.wavelengths, config.depths)
        for i in range(0, len(val), config.batch_size):
            chunk = val[i : i + config.batch_size]
            radiance, masks, inv = _batch_tensors(chunk, config)
            J = render(radiance, masks, psfs, omega, config.val_noise, g)
            spec_hat, inv_hat = net(J)
            for k, p in enumerate(chunk):
                rows.append(metrics(spec_hat[k].numpy(), inv_hat[k].numpy(), p.radiance, p.depth, p.valid_mask))
    net.train(was)
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _save_checkpoint(path: Path, phase: torch.Tensor, net, config: TrainConfig, extra: dict | None = None) -> None:
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "phase.npy", phase.detach().cpu().numpy())
    save_params(net, path / "net.dfnp")
    (path / "config.json").write_text(json.dumps({"config": config.to_json(), **(extra or {})}, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[PhaseMap, DualDecoderUNet, TrainConfig]:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    return PhaseMap(np.load(path / "phase.npy"), label="checkpoint"), load_params(path / "net.dfnp"), TrainConfig.from_json(meta["config"])


def _dump_nan(out_dir: Path | None, step: int, radiance, inv, phase) -> str:
    target = (out_dir or Path(".")) / f"nan_step{step}.npz"
    target.parent.mkdir(parents=True, exist_ok=True)
    np.savez(target, radiance=radiance.numpy(), inv_depth=inv.numpy(), phase=phase.detach().numpy())
    return str(target)


def train_e2e(
    scenes: Sequence[HsdScene],
    config: TrainConfig,
    val_scenes: Sequence[HsdScene] = (),
    out_dir=None,
    init_phase: PhaseMap | None = None,
    resume: bool = False,
    response: CameraResponse | None = None,
):
    """Alternate patch sampling, differentiable rendering and reconstruction; Adam on (phase, theta).

    Returns ``(PhaseMap, network, TrainLog)`` for the best validation PSNR
    (the last epoch when no validation scenes are given).
    """
    if not scenes:
        raise ValueError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    camera = config.camera()
    full_response = response or CameraResponse.default()
    response = full_response.on(config.wavelength_set)
    dt = config.torch_dtype
    omega = torch.from_numpy(np.array(response.matrix)).to(dt)
    illums = load_illuminants(wavelengths=config.wavelength_set)
    illums = [illums[n] for n in (config.illuminants or illums.keys())]

    start_epoch = 0
    tlog = TrainLog()
    if resume and out_dir is not None and (out_dir / "last" / "state.pt").exists():
        phase0, net, _ = load_checkpoint(out_dir / "last")
        state = torch.load(out_dir / "last" / "state.pt", weights_only=False)
        start_epoch = state["epoch"] + 1
        tlog = TrainLog(**state["log"])
    else:
        phase0 = init_phase or initial_phase(config, camera, full_response)
        net = build_network(response, config.depth_set, config.levels, config.width, seed=config.seed)
        state = None
    net = net.to(dt)
    phase = torch.tensor(np.array(phase0.phi), dtype=dt, requires_grad=True)
    opt_doe = torch.optim.Adam([phase], lr=config.lr_doe, betas=(0.9, 0.999), eps=1e-8)
    opt_net = torch.optim.Adam(net.parameters(), lr=config.lr_net, betas=(0.9, 0.999), eps=1e-8)
    best_psnr = -math.inf
    best = (phase0, None)
    if state is not None:
        opt_doe.load_state_dict(state["opt_doe"])
        opt_net.load_state_dict(state["opt_net"])
        best_psnr = state["best_psnr"]
        if (out_dir / "best").exists():
            bp, bn, _ = load_checkpoint(out_dir / "best")
            best = (bp, bn.to(dt))

    if config.epochs == 0 or start_epoch >= config.epochs:
        final_net = best[1] if best[1] is not None else net
        return PhaseMap(phase.detach().numpy(), phase0.design_wavelength_nm, phase0.label), final_net, tlog

    steps = config.steps_per_epoch or max(1, math.ceil(len(scenes) / config.batch_size))
    val = validation_set(val_scenes, config)
    step = len(tlog.steps)
    cached = None
    logfile = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logfile = open(out_dir / "log.jsonl", "a" if start_epoch > 0 else "w")
    try:
        for epoch in range(start_epoch, config.epochs):
            lr_doe, lr_net = lr_at(config, epoch)
            for g in opt_doe.param_groups:
                g["lr"] = lr_doe
            for g in opt_net.param_groups:
                g["lr"] = lr_net
            rng = np.random.default_rng([config.seed, epoch])
            gen = torch.Generator().manual_seed(config.seed * 1_000_003 + epoch)
            if lr_doe == 0 and cached is None:
                with torch.no_grad():
                    cached = psf_stack_from_phase(phase, camera, config.wavelengths, config.depths)
            net.train()
            t0 = time.time()
            for _ in range(steps):
                picks = rng.integers(0, len(scenes), config.batch_size)
                patches = [_augment(scenes[i], config, illums, rng) for i in picks]
                radiance, masks, inv = _batch_tensors(patches, config)
                sigma = torch.from_numpy(rng.uniform(*config.noise_range, config.batch_size)).to(dt)
                opt_doe.zero_grad()
                opt_net.zero_grad()
                psfs = cached if cached is not None else psf_stack_from_phase(phase, camera, config.wavelengths, config.depths)
                J = render(radiance, masks, psfs, omega, sigma, gen)
                spec_hat, inv_hat = net(J)
                spec_t = radiance
                terms = {
                    "spectral": (spec_hat - spec_t).abs().mean(),
                    "depth": (inv_hat - inv).abs().mean(),
                }
                total = loss(spec_hat, inv_hat, spec_t, inv, config.alpha, config.beta, config.gamma)
                if not torch.isfinite(total):
                    dump = _dump_nan(out_dir, step, radiance, inv, phase)
                    raise FloatingPointError(f"non-finite loss at step {step}; batch and phase written to {dump}")
                total.backward()
                if cached is None:
                    opt_doe.step()
                opt_net.step()
                rec = {"step": step, "epoch": epoch, "loss": total.item(), **{k: v.item() for k, v in terms.items()}, "lr_doe": lr_doe, "lr_net": lr_net}
                tlog.steps.append(rec)
                if logfile:
                    logfile.write(json.dumps(rec) + "\n")
                step += 1
            val_metrics = evaluate(phase, net, val, config, camera, omega, cached)
            erec = {"epoch": epoch, "train_loss": float(np.mean(tlog.losses()[-steps:])), **val_metrics}
            tlog.epochs.append(erec)
            log.info("epoch %d (%.1f s): %s", epoch, time.time() - t0, erec)
            if logfile:
                logfile.write(json.dumps({"epoch_summary": erec}) + "\n")
                logfile.flush()
            score = val_metrics.get("psnr_db", -tlog.epochs[-1]["train_loss"])
            snapshot = PhaseMap(phase.detach().numpy().astype(np.float64), phase0.design_wavelength_nm, "e2e" if config.train_doe else phase0.label)
            if score >= best_psnr:
                best_psnr = score
                tlog.best_epoch = epoch
                net_copy = build_network(response, config.depth_set, config.levels, config.width).to(dt)
                net_copy.load_state_dict(net.state_dict())
                best = (snapshot, net_copy)
                if out_dir is not None:
                    _save_checkpoint(out_dir / "best", phase, net, config, {"epoch": epoch, "metrics": val_metrics})
                    tlog.checkpoints.append(str(out_dir / "best"))
            if out_dir is not None:
                _save_checkpoint(out_dir / "last", phase, net, config, {"epoch": epoch})
                torch.save(
                    {"epoch": epoch, "opt_doe": opt_doe.state_dict(), "opt_net": opt_net.state_dict(), "best_psnr": best_psnr, "log": asdict(tlog)},
                    out_dir / "last" / "state.pt",
                )
    finally:
        if logfile:
            logfile.close()
    if best[1] is None:
        best = (PhaseMap(phase.detach().numpy().astype(np.float64), phase0.design_wavelength_nm, phase0.label), net)
    best[1].eval()
    return best[0], best[1], tlog


def pipeline_gradcheck(size: int = 8, seed: int = 0, probes: int = 10, eps: float = 1e-6) -> dict:
    """Finite-difference check of phase -> PSF -> render -> network -> loss in float64.

    ``size`` DOE features, 3 wavelengths, 2 depths, two 16x16 patches. Returns the
    worst relative error over ``probes`` phase entries and ``probes`` network entries.
    """
    from .autodiff import finite_diff_check
    from .dataset import SceneSpec, generate_scene

    camera = CameraConfig.desk(size, 9)
    lam = WavelengthSet((460.0, 550.0, 640.0))
    depths = DepthSet((0.5, 1.5))
    response = CameraResponse.default(lam)
    omega = torch.from_numpy(np.array(response.matrix))
    scenes = [generate_scene(SceneSpec(16, 16, seed=seed + i), lam, (0.5, 1.5)) for i in range(2)]
    radiance = torch.from_numpy(np.stack([s.radiance for s in scenes])).double()
    depth = np.stack([np.asarray(s.depth, np.float64) for s in scenes])
    masks = masks_tensor(depth, depths, 1.0, torch.float64)
    inv = torch.from_numpy(1.0 / depth)
    net = build_network(response, depths, levels=2, width=4, seed=seed).double().train()
    names = [n for n, _ in net.named_parameters()]
    rng = np.random.default_rng(seed)
    phase0 = torch.from_numpy(doe_mod.default_fresnel(camera, depths).phi.copy()) + torch.from_numpy(rng.uniform(-0.5, 0.5, (size, size)))
    theta0 = [p.detach().clone() for p in net.parameters()]

    def program(phase, *theta):
        params = dict(zip(names, theta))
        psfs = psf_stack_from_phase(phase, camera, lam, depths)
        J = render(radiance, masks, psfs, omega, 0.005, torch.Generator().manual_seed(seed))
        spec_hat, inv_hat = torch.func.functional_call(net, params, (J,))
        return loss(spec_hat, inv_hat, radiance, inv)

    params = [phase0, *theta0]
    return {
        "phase": finite_diff_check(program, params, eps=eps, probes=probes, seed=seed, wrt=[0]),
        "theta": finite_diff_check(program, params, eps=eps, probes=probes, seed=seed + 1, wrt=range(1, len(params))),
    }
