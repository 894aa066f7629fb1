"""Central finite-difference checks of every hand-written or composed backward.

Each check draws random small double-precision instances, compares the
autograd gradient with central differences (step 1e-5) and reports the
worst norm-wise relative error. Instances whose L1 terms sit within
``KINK_MARGIN`` of a kink are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .dsp import SpectrogramConfig, mel_frames
from .losses import (adversarial_and_feature_losses, covariance_loss, discriminator_loss,
                     multiscale_mel_loss, normalized_covariance)
from .model.activations import Snake
from .model.conv import Conv1d, ConvTranspose1d
from .model.rvq import ResidualVQ

FD_STEP = 1e-5
KINK_MARGIN = 1e-6
TOLERANCE = 1e-4


def fd_gradient(f: Callable[[], torch.Tensor], x: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """Central differences of scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            keep = flat[i].item()
            flat[i] = keep + step
            up = float(f())
            flat[i] = keep - step
            down = float(f())
            flat[i] = keep
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def autograd_gradients(f: Callable[[], torch.Tensor], tensors: list[torch.Tensor]) -> list[torch.Tensor]:
    for t in tensors:
        t.grad = None
    f().backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def compare(f: Callable[[], torch.Tensor], tensors: list[torch.Tensor]) -> float:
    analytic = autograd_gradients(f, tensors)
    return max(relative_error(a, fd_gradient(f, t)) for a, t in zip(analytic, tensors))


@dataclass
class CheckResult:
    name: str
    instances: int
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= TOLERANCE


# ---------------------------------------------------------------- instances

def _conv(rng: np.random.Generator) -> float:
    c_in, c_out = (int(v) for v in rng.integers(1, 4, 2))
    k = int(rng.integers(1, 6))
    stride, dilation = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    length = int(rng.integers(dilation * (k - 1) + 1, 16)) + 1
    layer = Conv1d(c_in, c_out, k, stride=stride, padding=pad, dilation=dilation).double()
    x = torch.from_numpy(rng.standard_normal((2, c_in, length))).requires_grad_()
    w = torch.from_numpy(rng.standard_normal((1, c_out, 1)))

    def f():
        y = layer(x)
        return (y * w).sum() + 0.5 * y.pow(2).sum()
    return compare(f, [x, layer.weight, layer.bias])


def _conv_transpose(rng: np.random.Generator) -> float:
    c_in, c_out = (int(v) for v in rng.integers(1, 4, 2))
    stride = int(rng.integers(1, 4))
    k = int(rng.integers(stride, 2 * stride + 2))
    pad = int(rng.integers(0, (k + 1) // 2))
    out_pad = int(rng.integers(0, stride))
    length = int(rng.integers(2, 10))
    layer = ConvTranspose1d(c_in, c_out, k, stride=stride, padding=pad, output_padding=out_pad).double()
    if layer.output_length(length) < 1:
        return _conv_transpose(rng)
    x = torch.from_numpy(rng.standard_normal((2, c_in, length))).requires_grad_()

    def f():
        y = layer(x)
        return (y * torch.linspace(-1, 1, y.shape[-1], dtype=y.dtype)).sum() + 0.5 * y.pow(2).sum()
    return compare(f, [x, layer.weight, layer.bias])


def _snake(rng: np.random.Generator) -> float:
    c = int(rng.integers(1, 4))
    act = Snake(c).double()
    with torch.no_grad():
        act.alpha.copy_(torch.from_numpy(rng.uniform(0.2, 3.0, (c, 1))))
    x = torch.from_numpy(rng.standard_normal((2, c, 12)) * 2).requires_grad_()

    def f():
        y = act(x)
        return (y * y.detach().sign()).sum() + y.pow(2).sum()
    return compare(f, [x, act.alpha])


class _FrozenStraightThrough:
    """One RVQ forward with codes and every stop-gradient quantity frozen at a base point.

    Its exact derivative is what the straight-through estimator reports.
    """

    def __init__(self, rvq: ResidualVQ, latents: torch.Tensor):
        with torch.no_grad():
            self.codes = rvq(latents).codes
            residual = latents.clone()
            self.residuals, self.entries = [], []
            for i in range(rvq.n_codebooks):
                entry = rvq.codebook(i)[self.codes[:, i]].transpose(1, 2)
                self.residuals.append(residual)
                self.entries.append(entry)
                residual = residual - entry
        self.rvq = rvq

    def __call__(self, latents: torch.Tensor):
        residual, quantized = latents, 0
        cb_loss = commit = 0
        for i, (sg_residual, sg_entry) in enumerate(zip(self.residuals, self.entries)):
            entry = self.rvq.codebook(i)[self.codes[:, i]].transpose(1, 2)
            cb_loss = cb_loss + (sg_residual - entry).pow(2).mean()
            commit = commit + (residual - sg_entry).pow(2).mean()
            stage = residual + (sg_entry - sg_residual)
            quantized = quantized + stage
            residual = residual - stage
        return quantized, cb_loss, commit


def _rvq(rng: np.random.Generator) -> float:
    dim, size, n_cb = int(rng.integers(2, 5)), 8, int(rng.integers(1, 4))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng.integers(1 << 31)))
        rvq = ResidualVQ(n_cb, size, dim).double()
    z = torch.from_numpy(rng.standard_normal((1, dim, 5))).requires_grad_()
    w = torch.from_numpy(rng.standard_normal((1, dim, 5)))
    surrogate = _FrozenStraightThrough(rvq, z)
    # surrogate and real forward agree at the base point
    real = rvq(z)
    if not torch.allclose(surrogate(z)[0], real.quantized):
        raise AssertionError("frozen surrogate disagrees with the quantizer forward")

    def f_real():
        out = rvq(z)
        return (out.quantized * w).sum() + out.codebook_loss + 0.25 * out.commitment_loss

    def f_frozen():
        q, cb, cm = surrogate(z)
        return (q * w).sum() + cb + 0.25 * cm

    params = [z] + list(rvq.codebooks)
    analytic = autograd_gradients(f_real, params)
    return max(relative_error(a, fd_gradient(f_frozen, t)) for a, t in zip(analytic, params))


_MEL_SCALES = [SpectrogramConfig(16, 4, 3, sample_rate=8000), SpectrogramConfig(32, 8, 5, sample_rate=8000)]


def _mel(rng: np.random.Generator) -> float:
    ref = torch.from_numpy(rng.standard_normal((2, 48)))
    rec = torch.from_numpy(rng.standard_normal((2, 48))).requires_grad_()
    with torch.no_grad():
        gap = min(float((torch.log(mel_frames(ref, c) + 1e-5) - torch.log(mel_frames(rec, c) + 1e-5)).abs().min())
                  for c in _MEL_SCALES)
    if gap < KINK_MARGIN:
        return _mel(rng)
    return compare(lambda: multiscale_mel_loss(ref, rec, _MEL_SCALES), [rec])


def _covariance(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 5))
    ref = torch.from_numpy(rng.standard_normal((n, 10)))
    rec = torch.from_numpy(rng.standard_normal((n, 10))).requires_grad_()
    with torch.no_grad():
        diff = (normalized_covariance(ref) - normalized_covariance(rec)).abs()
        off = diff[~torch.eye(n, dtype=torch.bool)]
    if float(off.min()) < KINK_MARGIN:
        return _covariance(rng)
    return compare(lambda: covariance_loss(ref, rec), [rec])


def _adversarial(rng: np.random.Generator) -> float:
    def outputs():
        return [(torch.from_numpy(rng.standard_normal((2, 3, 4))).requires_grad_(),
                 [torch.from_numpy(rng.standard_normal((2, 3, k))).requires_grad_() for k in (5, 3)])
                for _ in range(2)]
    real, fake = outputs(), outputs()
    with torch.no_grad():
        gaps = [float((a - b).abs().min()) for (_, fr), (_, ff) in zip(real, fake) for a, b in zip(fr, ff)]
    if min(gaps) < KINK_MARGIN:
        return _adversarial(rng)
    # real feature maps are constants of the feature-matching term (stop-gradient)
    leaves = [out[0] for out in real] + [t for out in fake for t in [out[0], *out[1]]]

    def f():
        adv_g, adv_d, feat = adversarial_and_feature_losses(real, fake)
        return adv_g + 0.7 * adv_d + 2.0 * feat + 0.3 * discriminator_loss(real, fake)
    return compare(f, leaves)


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv1d": _conv,
    "conv_transpose1d": _conv_transpose,
    "snake": _snake,
    "rvq_straight_through": _rvq,
    "mel_loss": _mel,
    "covariance_loss": _covariance,
    "adversarial_losses": _adversarial,
}


def run_checks(instances: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = max(CHECKS[name](rng) for _ in range(instances))
        results.append(CheckResult(name, instances, worst))
    return results
