"""Reverse-mode differentiation helpers.

The tape is torch's autograd graph; this module pins down the pieces the
pipeline relies on: the straight-through phase wrap, a ``value_and_grad``
front end, a finite-difference checker, and the closed list of primitives the
pipeline is built from (each one is exercised by the gradient test-suite).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

TWO_PI = 2.0 * math.pi


class _WrapPhase(torch.autograd.Function):
    @staticmethod
    def forward(ctx, phi):
        return torch.remainder(phi, TWO_PI)

    @staticmethod
    def backward(ctx, grad):
        return grad


def wrap_phase(phi: torch.Tensor) -> torch.Tensor:
    """``phi mod 2 pi`` with d/dphi taken as 1 everywhere (straight-through)."""
    return _WrapPhase.apply(phi)


def value_and_grad(program: Callable[..., torch.Tensor], params: Sequence[torch.Tensor]):
    """Evaluate ``program(*params)`` and the gradient w.r.t. every param.

    Returns ``(value, grads)`` with ``value`` a python float and ``grads`` a list
    of tensors shaped like ``params``. Params are copied into fresh leaves so
    the caller's tensors are never mutated.
    """
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    out = program(*leaves)
    if not torch.is_tensor(out) or out.numel() != 1:
        raise ValueError("program must return a scalar tensor")
    if not torch.isfinite(out).all():
        raise FloatingPointError(f"non-finite program output: {out.item()}")
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]
    return out.item(), grads


def finite_diff_check(
    program: Callable[..., torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-4,
    probes: int = 10,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``probes`` coordinates are drawn at random over the params listed in ``wrt``
    (all params by default). Error per probe is
    ``|g_fd - g| / max(|g_fd|, |g|, 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if probes < 1:
        raise ValueError("need at least one probe")
    params = [p.detach().clone() for p in params]
    _, grads = value_and_grad(program, params)
    wrt = list(range(len(params))) if wrt is None else list(wrt)
    sizes = np.array([params[i].numel() for i in wrt])
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            j = wrt[rng.choice(len(wrt), p=sizes / sizes.sum())]
            idx = int(rng.integers(params[j].numel()))
            flat = params[j].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = program(*params).item()
            flat[idx] = orig - eps
            down = program(*params).item()
            flat[idx] = orig
            g_fd = (up - down) / (2 * eps)
            g = grads[j].reshape(-1)[idx].item()
            err = abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-12)
            worst = max(worst, err)
    return worst


def _real(rng, *shape):
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64)


def _bilinear(x):
    from .psf import bilinear_weights

    w = torch.tensor(bilinear_weights(np.linspace(-2.3, 2.6, 5), 1.0, x.shape[-1]), dtype=x.dtype)
    return w @ x @ w.T


def _fftconv(x, k):
    from .imaging import convolve_same

    return convolve_same(x, k, method="fft")


# name -> (program taking tensors and returning a scalar, input shapes)
PRIMITIVES: dict[str, tuple[Callable, tuple[tuple[int, ...], ...]]] = {
    "add": (lambda a, b: ((a + b) ** 2).sum(), ((4, 4), (4, 4))),
    "mul": (lambda a, b: (a * b * a).sum(), ((4, 4), (4, 4))),
    "complex_exp": (lambda a: (torch.exp(1j * a) * torch.linspace(0.1, 1.0, 16, dtype=torch.float64).view(4, 4)).real.sum(), ((4, 4),)),
    "fft2": (lambda a: (torch.fft.fft2(torch.exp(1j * a)) * torch.arange(16, dtype=torch.float64).view(4, 4)).imag.sum(), ((4, 4),)),
    "ifft2": (lambda a: (torch.fft.ifft2(torch.exp(1j * a)).abs() ** 2 * torch.arange(16, dtype=torch.float64).view(4, 4)).sum(), ((4, 4),)),
    "abs2": (lambda a: ((a * (1 + 0.5j)).abs() ** 2).sum(), ((4, 4),)),
    "wrap_phase": (lambda a: torch.sin(wrap_phase(a) + 0.3 * a).sum(), ((4, 4),)),
    "bilinear_resample": (lambda a: (_bilinear(a) ** 2).sum(), ((6, 6),)),
    "upsample_nearest": (lambda a: (torch.repeat_interleave(torch.repeat_interleave(a, 2, 0), 2, 1) ** 3).sum(), ((3, 3),)),
    "reflect_pad": (lambda a: (F.pad(a, (2, 2, 2, 2), mode="reflect") ** 2 * torch.arange(100, dtype=torch.float64).view(1, 1, 10, 10)).sum(), ((1, 1, 6, 6),)),
    "conv2d": (lambda a, w: (F.conv2d(a, w, padding=1) ** 2).sum(), ((2, 3, 5, 5), (4, 3, 3, 3))),
    "fft_conv": (lambda a, k: (_fftconv(a, k) ** 2).sum(), ((1, 2, 8, 8), (2, 3, 5, 5))),
    "conv_transpose": (lambda a, w: (F.conv_transpose2d(a, w, stride=2) ** 2).sum(), ((2, 3, 3, 3), (3, 2, 2, 2))),
    "max_pool": (lambda a: (F.max_pool2d(a, 2) ** 2).sum(), ((1, 2, 4, 4),)),
    "batch_norm": (lambda a, g: (F.batch_norm(a, None, None, g, None, training=True) * torch.arange(2 * 3 * 9, dtype=torch.float64).view(2, 3, 3, 3)).sum(), ((2, 3, 3, 3), (3,))),
    "prelu": (lambda a, s: (F.prelu(a, s) ** 2).sum(), ((2, 3, 4, 4), (3,))),
    "sigmoid": (lambda a: torch.sigmoid(a).pow(2).sum(), ((5,),)),
    "mean_abs": (lambda a: (a - 0.1).abs().mean(), ((5, 5),)),
    "weighted_sum": (lambda a, w: torch.einsum("cl,blhw->bchw", w, a).pow(2).sum(), ((2, 4, 3, 3), (3, 4))),
    "matrix_inverse": (lambda a: torch.trace(torch.linalg.inv(a @ a.T + torch.eye(3, dtype=a.dtype))), ((3, 3),)),
}


def primitive_inputs(name: str, seed: int = 0) -> list[torch.Tensor]:
    rng = np.random.default_rng(seed)
    return [_real(rng, *shape) for shape in PRIMITIVES[name][1]]
