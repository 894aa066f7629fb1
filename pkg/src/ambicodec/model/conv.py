"""1-D convolution and transposed convolution with hand-written gradients.

The forward maps run on torch's native correlation kernels. The backward
maps are derived here and registered through custom autograd functions,
so every gradient flowing through the codec goes through this file.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def conv_output_length(length: int, kernel_size: int, stride: int = 1,
                       padding: int = 0, dilation: int = 1) -> int:
    return (length + 2 * padding - dilation * (kernel_size - 1) - 1) // stride + 1


def conv_transpose_output_length(length: int, kernel_size: int, stride: int = 1,
                                 padding: int = 0, output_padding: int = 0,
                                 dilation: int = 1) -> int:
    return (length - 1) * stride - 2 * padding + dilation * (kernel_size - 1) + output_padding + 1


def _check_input(x: torch.Tensor, channels: int) -> None:
    if x.dim() != 3:
        raise ValueError(f"expected [batch, channels, length] input, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"channel mismatch: layer expects {channels}, input has {x.shape[1]}")


def _tap_correlation(xp: torch.Tensor, grad_out: torch.Tensor, kernel_size: int,
                     stride: int, dilation: int) -> torch.Tensor:
    """``g[o, c, k] = sum_{b,l} grad_out[b, o, l] * xp[b, c, k*dilation + l*stride]``.

    Runs as one correlation with the batch axis as the reduction channel:
    the upstream gradient becomes the kernel, dilated by the forward stride.
    """
    g = F.conv1d(xp.transpose(0, 1), grad_out.transpose(0, 1), stride=dilation, dilation=stride)
    # g: [C, O, >= K]; the extra taps fall past the last kernel position
    g = g[..., :kernel_size]
    return g.transpose(0, 1)


def conv1d_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   stride: int = 1, padding: int = 0, dilation: int = 1,
                   check_finite: bool = True) -> torch.Tensor:
    """Multichannel valid cross-correlation.

    ``out[c] = bias[c] + sum_k weight[c, k] (*) x[k]`` with zero padding,
    stride and dilation applied.

    Args:
        x: input of shape ``[B, C_in, L]`` (or ``[C_in, L]``).
        weight: kernel of shape ``[C_out, C_in, K]``.
        bias: optional ``[C_out]``.
        check_finite: reject NaN/inf input. Layers skip the scan; the
            generator checks its activations once per pass instead.

    Returns:
        Tensor of shape ``[B, C_out, L_out]``.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    _check_input(x, weight.shape[1])
    if check_finite and not torch.isfinite(x).all():
        raise FloatingPointError("non-finite values in convolution input")
    if conv_output_length(x.shape[-1], weight.shape[-1], stride, padding, dilation) < 1:
        raise ValueError("input too short for kernel")
    out = F.conv1d(x, weight, bias, stride=stride, padding=padding, dilation=dilation)
    return out.squeeze(0) if squeeze else out


def conv1d_backward(x: torch.Tensor, weight: torch.Tensor, grad_out: torch.Tensor,
                    stride: int = 1, padding: int = 0, dilation: int = 1,
                    need_input_grad: bool = True,
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Gradients of :func:`conv1d_forward`.

    Returns ``(grad_weight, grad_bias, grad_input)``. The input gradient is
    the adjoint correlation (a transposed convolution with the same kernel),
    zero-extended over trailing samples a strided forward pass never read.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x, grad_out = x.unsqueeze(0), grad_out.unsqueeze(0)
    c_out, c_in, kernel_size = weight.shape
    b, length = x.shape[0], x.shape[-1]
    out_len = conv_output_length(length, kernel_size, stride, padding, dilation)
    if tuple(grad_out.shape) != (b, c_out, out_len):
        raise ValueError(f"upstream gradient shape {tuple(grad_out.shape)} "
                         f"does not match forward output {(b, c_out, out_len)}")
    xp = F.pad(x, (padding, padding)) if padding else x
    grad_weight = _tap_correlation(xp, grad_out, kernel_size, stride, dilation)
    grad_bias = grad_out.sum(dim=(0, 2))
    if not need_input_grad:
        return grad_weight, grad_bias, None
    # adjoint over the padded input, then drop the padding taps
    grad_xp = F.conv_transpose1d(grad_out, weight, stride=stride, dilation=dilation)
    covered = grad_xp.shape[-1]
    if covered < length + 2 * padding:
        grad_xp = F.pad(grad_xp, (0, length + 2 * padding - covered))
    grad_x = grad_xp[..., padding: padding + length]
    if squeeze:
        grad_x = grad_x.squeeze(0)
    return grad_weight, grad_bias, grad_x


def conv_transpose1d_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                             stride: int = 1, padding: int = 0, output_padding: int = 0,
                             dilation: int = 1) -> torch.Tensor:
    """Transposed convolution; ``weight`` has shape ``[C_in, C_out, K]``."""
    _check_input(x, weight.shape[0])
    if conv_transpose_output_length(x.shape[-1], weight.shape[-1], stride, padding,
                                    output_padding, dilation) < 1:
        raise ValueError("transposed convolution produces empty output")
    return F.conv_transpose1d(x, weight, bias, stride=stride, padding=padding,
                              output_padding=output_padding, dilation=dilation)


def conv_transpose1d_backward(x: torch.Tensor, weight: torch.Tensor, grad_out: torch.Tensor,
                              stride: int = 1, padding: int = 0, output_padding: int = 0,
                              dilation: int = 1) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Gradients of :func:`conv_transpose1d_forward`.

    The transposed layer is the adjoint of a strided correlation, so its
    input gradient is that correlation applied to the upstream gradient.
    """
    c_in, c_out, kernel_size = weight.shape
    length = x.shape[-1]
    # zero-extend the upstream gradient to the full (uncropped) output
    full_len = (length - 1) * stride + dilation * (kernel_size - 1) + 1
    right = full_len - padding - grad_out.shape[-1]
    grad_full = F.pad(grad_out, (padding, right)) if right >= 0 else F.pad(grad_out, (padding, 0))[..., :full_len]
    grad_x = F.conv1d(grad_full, weight, stride=stride, dilation=dilation)
    # g[i, o, k] = sum_{b,l} x[b, i, l] * grad_full[b, o, k*dilation + l*stride]
    grad_weight = _tap_correlation(grad_full, x, kernel_size, stride, dilation)
    grad_bias = grad_out.sum(dim=(0, 2))
    return grad_weight, grad_bias, grad_x


class _Conv1dFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, stride, padding, dilation):
        ctx.save_for_backward(x, weight)
        ctx.conf = (stride, padding, dilation)
        return conv1d_forward(x, weight, bias, stride, padding, dilation, check_finite=False)

    @staticmethod
    def backward(ctx, grad_out):
        x, weight = ctx.saved_tensors
        gw, gb, gx = conv1d_backward(x, weight, grad_out.contiguous(), *ctx.conf,
                                     need_input_grad=ctx.needs_input_grad[0])
        return gx, gw, (gb if ctx.needs_input_grad[2] else None), None, None, None


class _ConvTranspose1dFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, stride, padding, output_padding, dilation):
        ctx.save_for_backward(x, weight)
        ctx.conf = (stride, padding, output_padding, dilation)
        return conv_transpose1d_forward(x, weight, bias, *ctx.conf)

    @staticmethod
    def backward(ctx, grad_out):
        x, weight = ctx.saved_tensors
        gw, gb, gx = conv_transpose1d_backward(x, weight, grad_out.contiguous(), *ctx.conf)
        return gx, gw, gb, None, None, None, None


class Conv1d(nn.Module):
    """Drop-in 1-D convolution layer backed by :func:`conv1d_forward`."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, dilation: int = 1, bias: bool = True):
        super().__init__()
        if kernel_size < 1 or stride < 1 or dilation < 1:
            raise ValueError("kernel_size, stride and dilation must be >= 1")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.dilation = kernel_size, stride, padding, dilation
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.in_channels * self.kernel_size)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -bound, bound)

    def output_length(self, length: int) -> int:
        return conv_output_length(length, self.kernel_size, self.stride, self.padding, self.dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _Conv1dFn.apply(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def extra_repr(self) -> str:
        return (f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
                f"stride={self.stride}, padding={self.padding}, dilation={self.dilation}")


class ConvTranspose1d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, output_padding: int = 0, dilation: int = 1, bias: bool = True):
        super().__init__()
        if output_padding >= max(stride, dilation):
            raise ValueError("output_padding must be smaller than stride or dilation")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.output_padding, self.dilation = output_padding, dilation
        self.weight = nn.Parameter(torch.empty(in_channels, out_channels, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.out_channels * self.kernel_size)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -bound, bound)

    def output_length(self, length: int) -> int:
        return conv_transpose_output_length(length, self.kernel_size, self.stride, self.padding,
                                            self.output_padding, self.dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _ConvTranspose1dFn.apply(x, self.weight, self.bias, self.stride, self.padding,
                                        self.output_padding, self.dilation)

    def extra_repr(self) -> str:
        return (f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
                f"stride={self.stride}, padding={self.padding}, output_padding={self.output_padding}")
