"""Periodic snake activation, ``x + sin^2(alpha x) / alpha`` per channel."""

from __future__ import annotations

import torch
from torch import nn

_EPS = 1e-9


def snake(x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Reference (autograd-free) evaluation; ``alpha`` broadcasts as ``[C, 1]``."""
    return x + torch.sin(alpha * x).pow(2) / (alpha + _EPS)


def snake_backward(x: torch.Tensor, alpha: torch.Tensor, grad_out: torch.Tensor,
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(grad_x, grad_alpha)`` with ``grad_alpha`` shaped like ``alpha``."""
    ax = alpha * x
    inv = 1.0 / (alpha + _EPS)
    sin2 = torch.sin(2 * ax)
    grad_x = grad_out * (1.0 + sin2)
    d_alpha = x * sin2 * inv - torch.sin(ax).pow(2) * inv * inv
    grad_alpha = grad_out * d_alpha
    # reduce over the broadcast axes (batch and time)
    while grad_alpha.dim() > alpha.dim():
        grad_alpha = grad_alpha.sum(0)
    return grad_x, grad_alpha.sum(-1, keepdim=True)


class _SnakeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha):
        ctx.save_for_backward(x, alpha)
        return snake(x, alpha)

    @staticmethod
    def backward(ctx, grad_out):
        x, alpha = ctx.saved_tensors
        return snake_backward(x, alpha, grad_out)


class Snake(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _SnakeFn.apply(x, self.alpha)
