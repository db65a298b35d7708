"""Anchor conditioning: inject condition-decoder features into the first
diffusion encoder stage through a spatial attention gate.

Two variants share the gate; they differ only in whether the anchor feature
is relaxed first:

* ``sa``  - plain spatial attention on the raw anchor feature.
* ``usa`` - the anchor is smoothed by a learnable Gaussian kernel and
  max-combined with itself before gating, widening activations without
  losing peaks.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class GaussianSmoother(nn.Module):
    """Depthwise blur with a single learnable sigma (kernel rebuilt per call).

    The kernel stays genuinely Gaussian: positive entries summing to 1,
    symmetric under 90-degree rotation. Boundary handling is reflect padding.
    """

    def __init__(self, kernel_size: int = 5, init_sigma: float = 1.0):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.log_sigma = nn.Parameter(torch.tensor(math.log(init_sigma)))

    def kernel(self) -> torch.Tensor:
        sigma = self.log_sigma.exp()
        c = (self.kernel_size - 1) / 2.0
        coords = torch.arange(self.kernel_size, dtype=sigma.dtype, device=sigma.device) - c
        sq = coords[:, None] ** 2 + coords[None, :] ** 2
        k = torch.exp(-sq / (2.0 * sigma**2))
        return k / k.sum()

    def blur(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        channels = x.shape[1]
        k = self.kernel().to(x.dtype)
        weight = k.expand(channels, 1, -1, -1)
        pad = self.kernel_size // 2
        padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        out = F.conv2d(padded, weight, groups=channels)
        return out.squeeze(0) if squeeze else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Smoothed anchor: elementwise max of the blur and the input."""
        return torch.maximum(self.blur(x), x)


class AnchorAttention(nn.Module):
    """Sigmoid spatial gate from the anchor feature, applied residually.

    out = sigmoid(conv1x1(f_anc)) * f_d + f_d, the single-channel gate
    broadcast over the channels of f_d.
    """

    def __init__(self, anchor_channels: int, mode: str = "usa", kernel_size: int = 5):
        super().__init__()
        if mode not in ("sa", "usa"):
            raise ValueError(f"mode must be sa|usa, got {mode!r}")
        self.mode = mode
        self.smoother = GaussianSmoother(kernel_size) if mode == "usa" else None
        self.proj = nn.Conv2d(anchor_channels, 1, kernel_size=1)

    def gate(self, f_anc: torch.Tensor) -> torch.Tensor:
        squeeze = f_anc.ndim == 3
        if squeeze:
            f_anc = f_anc.unsqueeze(0)
        a = torch.sigmoid(self.proj(f_anc))
        return a.squeeze(0) if squeeze else a

    def forward(self, f_c: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
        if f_c.shape[-2:] != f_d.shape[-2:]:
            raise ValueError(
                f"anchor spatial size {tuple(f_c.shape[-2:])} != target {tuple(f_d.shape[-2:])}"
            )
        f_anc = self.smoother(f_c) if self.smoother is not None else f_c
        return self.gate(f_anc) * f_d + f_d


def apply_usa(f_c: torch.Tensor, f_d: torch.Tensor, attention: AnchorAttention) -> torch.Tensor:
    """Smoothed-anchor gating (attention must be in ``usa`` mode)."""
    if attention.mode != "usa":
        raise ValueError("attention module is not in usa mode")
    return attention(f_c, f_d)


def apply_sa(f_c: torch.Tensor, f_d: torch.Tensor, attention: AnchorAttention) -> torch.Tensor:
    """Plain spatial-attention gating (no smoothing)."""
    if attention.mode != "sa":
        raise ValueError("attention module is not in sa mode")
    return attention(f_c, f_d)
