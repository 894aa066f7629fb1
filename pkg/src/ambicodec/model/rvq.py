"""Residual vector quantizer with straight-through gradients."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn


class QuantizerOutput(NamedTuple):
    quantized: torch.Tensor  # [B, dim, T], straight-through w.r.t. the latents
    codes: torch.Tensor  # [B, n_codebooks, T], int64
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


def nearest_entry(residual: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the closest codebook row for every latent frame.

    ``residual`` is ``[B, dim, T]``, ``codebook`` is ``[size, dim]``; ties
    resolve to the lowest index.
    """
    flat = residual.transpose(1, 2).reshape(-1, residual.shape[1])
    dist = (flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ codebook.t()
            + codebook.pow(2).sum(1)[None, :])
    return dist.argmin(dim=1).reshape(residual.shape[0], residual.shape[2])


class ResidualVQ(nn.Module):
    """Greedy residual VQ.

    Entry 0 of every stage is held at the zero vector, so a stage can be
    skipped. Residual energy therefore never grows from one stage to the
    next, and :meth:`project` is total: the all-null tuple is a fixed point
    of quantize(dequantize(.)).
    """

    def __init__(self, n_codebooks: int, codebook_size: int, dim: int):
        super().__init__()
        if n_codebooks < 1 or codebook_size < 2 or dim < 1:
            raise ValueError("need n_codebooks >= 1, codebook_size >= 2, dim >= 1")
        self.n_codebooks, self.codebook_size, self.dim = n_codebooks, codebook_size, dim
        self.codebooks = nn.ParameterList(
            nn.Parameter(torch.randn(codebook_size, dim)) for _ in range(n_codebooks))
        keep = torch.ones(codebook_size, 1)
        keep[0] = 0.0
        self.register_buffer("_keep", keep, persistent=False)

    def codebook(self, stage: int) -> torch.Tensor:
        """Effective entries of ``stage`` (the pinned null row is zero)."""
        cb = self.codebooks[stage]
        return cb * self._keep.to(cb.dtype)

    def forward(self, latents: torch.Tensor) -> QuantizerOutput:
        squeeze = latents.dim() == 2
        if squeeze:
            latents = latents.unsqueeze(0)
        if latents.shape[1] != self.dim:
            raise ValueError(f"latent dim {latents.shape[1]} does not match quantizer dim {self.dim}")
        residual = latents
        quantized = torch.zeros_like(latents)
        codebook_loss = latents.new_zeros(())
        commitment_loss = latents.new_zeros(())
        codes = []
        for i in range(self.n_codebooks):
            codebook = self.codebook(i)
            idx = nearest_entry(residual.detach(), codebook.detach())
            entry = codebook[idx].transpose(1, 2)  # [B, dim, T]
            codebook_loss = codebook_loss + (residual.detach() - entry).pow(2).mean()
            commitment_loss = commitment_loss + (residual - entry.detach()).pow(2).mean()
            stage = residual + (entry - residual).detach()
            quantized = quantized + stage
            residual = residual - stage
            codes.append(idx)
        codes = torch.stack(codes, dim=1)
        if squeeze:
            quantized, codes = quantized.squeeze(0), codes.squeeze(0)
        return QuantizerOutput(quantized, codes, codebook_loss, commitment_loss)

    def dequantize(self, codes: torch.Tensor) -> torch.Tensor:
        """Sum of the selected entries; ``codes`` is ``[B, n_codebooks, T]``."""
        if codes.shape[-2] != self.n_codebooks:
            raise ValueError(f"expected {self.n_codebooks} codebooks, got {codes.shape[-2]}")
        out = 0
        for i in range(self.n_codebooks):
            out = out + self.codebook(i)[codes[..., i, :]].transpose(-1, -2)
        return out

    @torch.no_grad()
    def requantize(self, codes: torch.Tensor) -> torch.Tensor:
        return self(self.dequantize(codes)).codes

    @torch.no_grad()
    def project(self, codes: torch.Tensor, max_iter: int = 8) -> torch.Tensor:
        """Nearby codes ``c`` with ``requantize(c) == c`` for every frame.

        Iterates ``c <- requantize(c)``; frames that have not settled fall back
        to the longest prefix (later stages set to the null entry) that is a
        fixed point.
        """
        squeeze = codes.dim() == 2
        cur = codes.unsqueeze(0) if squeeze else codes
        for _ in range(max_iter):
            nxt = self.requantize(cur)
            if torch.equal(nxt, cur):
                break
            cur = nxt
        unstable = (self.requantize(cur) != cur).any(dim=1)  # [B, T]
        for keep in range(self.n_codebooks - 1, -1, -1):
            if not unstable.any():
                break
            trial = cur.clone()
            trial[:, keep:, :] = 0
            trial_ok = (self.requantize(trial) == trial).all(dim=1)
            take = unstable & trial_ok
            cur = torch.where(take[:, None, :], trial, cur)
            unstable = unstable & ~take
        return cur.squeeze(0) if squeeze else cur


def rvq_quantize(rvq: ResidualVQ, latents: torch.Tensor) -> QuantizerOutput:
    return rvq(latents)
