"""Generator-side losses: multi-scale mel, inter-channel covariance, GAN terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .dsp import MEL_SCALES, SpectrogramConfig, mel_frames, multiscale_configs

COV_EPS = 1e-9
LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class LossWeights:
    mel: float = 15.0
    feature_matching: float = 2.0
    adversarial: float = 1.0
    codebook: float = 1.0
    commitment: float = 0.25
    covariance: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------- covariance

def sample_covariance(x: torch.Tensor) -> torch.Tensor:
    """Channel covariance of ``[..., n, L]`` with divisor ``L - 1``."""
    if x.shape[-1] < 2:
        raise ValueError("need at least two samples per channel")
    xc = x - x.mean(dim=-1, keepdim=True)
    return xc @ xc.transpose(-1, -2) / (x.shape[-1] - 1)


def _normalize(cov: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    var = torch.diagonal(cov, dim1=-2, dim2=-1)
    denom = torch.sqrt(var[..., :, None] * var[..., None, :] + COV_EPS)
    r = cov / denom
    # self-correlation is 1 by definition; eps only guards the off-diagonal terms
    eye = torch.eye(cov.shape[-1], dtype=cov.dtype, device=cov.device)
    return r * (1 - eye) + eye, denom


def normalized_covariance(x: torch.Tensor) -> torch.Tensor:
    """Pearson correlation matrix; ``sqrt(C_ii C_jj + eps)`` guards silent channels."""
    return _normalize(sample_covariance(torch.as_tensor(x)))[0]


def _check_pair(reference: torch.Tensor, reconstruction: torch.Tensor) -> None:
    if reference.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch: {tuple(reference.shape)} vs {tuple(reconstruction.shape)}")


def covariance_loss_value(reference: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """Half the L1 distance between correlation matrices, averaged over any batch axes."""
    _check_pair(reference, reconstruction)
    r = normalized_covariance(reference)
    r_hat = normalized_covariance(reconstruction)
    per_item = 0.5 * (r - r_hat).abs().sum(dim=(-1, -2))
    return per_item.mean()


def covariance_loss_backward(reference: torch.Tensor, reconstruction: torch.Tensor,
                             grad_out: torch.Tensor | float = 1.0) -> torch.Tensor:
    """Gradient of :func:`covariance_loss_value` with respect to ``reconstruction``.

    The L1 subgradient is taken as 0 where the two correlations coincide.
    """
    _check_pair(reference, reconstruction)
    y = reconstruction
    r = normalized_covariance(reference)
    yc = y - y.mean(dim=-1, keepdim=True)
    cov = yc @ yc.transpose(-1, -2) / (y.shape[-1] - 1)
    r_hat, denom = _normalize(cov)
    n_items = math.prod(y.shape[:-2])
    # dL/dr_hat
    g = -0.5 * torch.sign(r - r_hat) / n_items
    var = torch.diagonal(cov, dim1=-2, dim2=-1)
    h = g * cov / denom.pow(3)
    # each variance enters every denominator of its row and column
    g_var = -0.5 * (h @ var[..., :, None] + h.transpose(-1, -2) @ var[..., :, None]).squeeze(-1)
    g_cov = g / denom + torch.diag_embed(g_var)
    grad = (g_cov + g_cov.transpose(-1, -2)) @ yc / (y.shape[-1] - 1)
    return grad * grad_out


class _CovarianceLossFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, reference, reconstruction):
        ctx.save_for_backward(reference, reconstruction)
        return covariance_loss_value(reference, reconstruction)

    @staticmethod
    def backward(ctx, grad_out):
        reference, reconstruction = ctx.saved_tensors
        grad = covariance_loss_backward(reference, reconstruction, grad_out)
        return None, grad


def covariance_loss(reference: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """Covariance-structure loss; differentiable in ``reconstruction`` only.

    Both inputs are ``[n, L]`` or ``[B, n, L]``. A single channel gives 0.
    """
    reference = torch.as_tensor(reference)
    reconstruction = torch.as_tensor(reconstruction)
    return _CovarianceLossFn.apply(reference.detach(), reconstruction)


# ---------------------------------------------------------------- mel

def multiscale_mel_loss(reference: torch.Tensor, reconstruction: torch.Tensor,
                        scales: list[SpectrogramConfig] | None = None,
                        sample_rate: int = 44100, per_item: bool = False) -> torch.Tensor:
    """Log-mel L1 distance, averaged over scales, then over channels (and batch).

    Inputs are ``[n, L]`` or ``[B, n, L]``; each channel is scored on its own.
    With ``per_item`` the batch mean is skipped and a ``[B]`` vector returned.
    """
    _check_pair(reference, reconstruction)
    if scales is None:
        scales = multiscale_configs(sample_rate, MEL_SCALES)
    total = 0.0
    for cfg in scales:
        with torch.no_grad():
            ref = torch.log(mel_frames(reference.detach(), cfg) + LOG_FLOOR)
        rec = torch.log(mel_frames(reconstruction, cfg) + LOG_FLOOR)
        # mean over frames and bands -> one value per channel
        total = total + (ref - rec).abs().mean(dim=(-1, -2))
    per_channel = total / len(scales)
    if per_item:
        return per_channel.mean(dim=-1)
    return per_channel.mean()


# ---------------------------------------------------------------- adversarial

def _check_structure(real, fake):
    if len(real) != len(fake):
        raise ValueError("real and fake discriminator outputs differ in length")
    for (lr, fr), (lf, ff) in zip(real, fake):
        if lr.shape != lf.shape or len(fr) != len(ff):
            raise ValueError("real and fake discriminator outputs differ in structure")
        for a, b in zip(fr, ff):
            if a.shape != b.shape:
                raise ValueError("feature map shapes differ between real and fake passes")


def discriminator_loss(real, fake) -> torch.Tensor:
    """Least-squares discriminator objective, averaged over sub-discriminators."""
    terms = [(lr - 1).pow(2).mean() + lf.pow(2).mean() for (lr, _), (lf, _) in zip(real, fake)]
    return sum(terms) / len(terms)


def generator_adversarial_loss(fake) -> torch.Tensor:
    return sum((lf - 1).pow(2).mean() for lf, _ in fake) / len(fake)


def feature_matching_loss(real, fake) -> torch.Tensor:
    """L1 between real and fake feature maps: mean over layers, then over discriminators."""
    total = 0.0
    for (_, fr), (_, ff) in zip(real, fake):
        total = total + sum((a.detach() - b).abs().mean() for a, b in zip(fr, ff)) / len(fr)
    return total / len(real)


def adversarial_and_feature_losses(disc_outputs_real, disc_outputs_fake):
    """``(adv_g, adv_d, feat)`` for matching lists of ``(logits, features)``.

    Logits are per channel; every term is a plain mean, so it is the
    expectation over channels of the single-channel objective.
    """
    _check_structure(disc_outputs_real, disc_outputs_fake)
    return (generator_adversarial_loss(disc_outputs_fake),
            discriminator_loss(disc_outputs_real, disc_outputs_fake),
            feature_matching_loss(disc_outputs_real, disc_outputs_fake))


# ---------------------------------------------------------------- composite

class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term '{term}' is not finite ({value}){where}")
        self.term, self.value, self.step = term, value, step


def composite_generator_loss(terms: dict[str, torch.Tensor | float], weights: LossWeights | None = None,
                             step: int | None = None) -> torch.Tensor | float:
    """Weighted sum of loss terms keyed by :class:`LossWeights` field names.

    A zero weight drops its term entirely, so it contributes no gradient.
    """
    weights = weights or LossWeights()
    w = weights.as_dict()
    total = 0.0
    for name, value in terms.items():
        if name not in w:
            raise KeyError(f"unknown loss term {name!r}")
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v, step)
        if w[name] != 0.0:
            total = total + w[name] * value
    return total
