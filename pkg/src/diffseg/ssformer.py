"""Frequency-domain cross-attention between the condition embedding and the
diffusion embedding.

Token grids are Fourier-transformed per feature channel; query/key
projections are real linear maps applied to the real and imaginary planes
independently, and the affinity is the complex inner product of the
projected spectra (conjugate on the key side, 1/sqrt(d) scale, no softmax).
A coordinate-conditioned filter network produces a (0,1) gate over the
affinity lattice, adapted to the diffusion timestep by per-block
scale/shift; the gated affinity is inverse-transformed and applied to the
value tokens in token space.

Spectra and affinities are carried as explicit (real, imag) pairs.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class Spectrum(NamedTuple):
    """Complex-valued grid as separate real/imaginary planes."""

    real: torch.Tensor
    imag: torch.Tensor


def fft2(tokens: torch.Tensor) -> Spectrum:
    """2-D DFT over the token-grid axes of [..., n_h, n_w, d], per channel."""
    out = torch.fft.fft2(tokens, dim=(-3, -2))
    return Spectrum(out.real, out.imag)


def ifft2(spec: Spectrum) -> torch.Tensor:
    """Inverse 2-D DFT over the token-grid axes; returns the real part."""
    z = torch.complex(spec.real, spec.imag)
    return torch.fft.ifft2(z, dim=(-3, -2)).real


def _flatten_tokens(grid: torch.Tensor) -> torch.Tensor:
    return grid.reshape(*grid.shape[:-3], grid.shape[-3] * grid.shape[-2], grid.shape[-1])


def fourier_affinity(
    spec_q: Spectrum, spec_k: Spectrum, w_q: torch.Tensor, w_k: torch.Tensor
) -> Spectrum:
    """Scaled complex query-key product of projected spectra.

    Tokens are flattened to [..., n, d] before the product; the key side is
    conjugated, so self-affinity with identity weights is Hermitian.
    """
    q_re, q_im = (_flatten_tokens(p) @ w_q for p in spec_q)
    k_re, k_im = (_flatten_tokens(p) @ w_k for p in spec_k)
    if q_re.shape[-1] != k_re.shape[-1] or q_re.shape[-2] != k_re.shape[-2]:
        raise ValueError(
            f"spectra disagree: {tuple(q_re.shape[-2:])} vs {tuple(k_re.shape[-2:])}"
        )
    scale = q_re.shape[-1] ** -0.5
    kt_re = k_re.transpose(-2, -1)
    kt_im = k_im.transpose(-2, -1)
    real = (q_re @ kt_re + q_im @ kt_im) * scale
    imag = (q_im @ kt_re - q_re @ kt_im) * scale
    return Spectrum(real, imag)


def filtered_attend(
    affinity: Spectrum,
    gate: torch.Tensor,
    values: torch.Tensor,
    w_v: torch.Tensor,
    refine: nn.Module | None = None,
) -> torch.Tensor:
    """Gate the affinity, invert it to token space, and mix the values.

    The gate multiplies both complex components (a real-valued band-pass);
    the gated map is inverse-transformed over its two lattice axes and its
    real part weights the projected value tokens. ``refine`` is applied
    residually to the attention result.
    """
    if gate.shape[-2:] != affinity.real.shape[-2:]:
        raise ValueError(
            f"gate shape {tuple(gate.shape[-2:])} != affinity {tuple(affinity.real.shape[-2:])}"
        )
    gated = torch.complex(gate * affinity.real, gate * affinity.imag)
    weights = torch.fft.ifft2(gated, dim=(-2, -1)).real
    v = _flatten_tokens(values) @ w_v
    if weights.shape[-1] != v.shape[-2]:
        raise ValueError("affinity key axis does not match value token count")
    attn = weights @ v
    if refine is not None:
        attn = attn + refine(attn)
    return attn.reshape(*values.shape[:-3], *values.shape[-3:-1], -1)


class PatchEmbed(nn.Module):
    """Non-overlapping patchification + linear projection to token width."""

    def __init__(self, in_channels: int, patch_size: int, token_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(in_channels * patch_size**2, token_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        b, c, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"spatial size {(h, w)} not divisible by patch size {p}")
        x = x.reshape(b, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, h // p, w // p, c * p * p)
        tokens = self.proj(x)
        return tokens.squeeze(0) if squeeze else tokens


class TokenUnembed(nn.Module):
    """Project tokens back to feature-map layout (inverse of PatchEmbed)."""

    def __init__(self, token_dim: int, out_channels: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.proj = nn.Linear(token_dim, out_channels * patch_size**2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.ndim == 3
        if squeeze:
            tokens = tokens.unsqueeze(0)
        b, nh, nw, _ = tokens.shape
        p, c = self.patch_size, self.out_channels
        x = self.proj(tokens).reshape(b, nh, nw, c, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, c, nh * p, nw * p)
        return x.squeeze(0) if squeeze else x


class _ScaleShiftBlock(nn.Module):
    """conv -> normalize -> (1 + scale) * x + shift -> activation."""

    def __init__(self, in_ch: int, out_ch: int, t_dim: int, mlp_hidden: int = 32):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.GroupNorm(1, out_ch)
        self.scale_mlp = nn.Sequential(nn.Linear(t_dim, mlp_hidden), nn.SiLU(), nn.Linear(mlp_hidden, 1))
        self.shift_mlp = nn.Sequential(nn.Linear(t_dim, mlp_hidden), nn.SiLU(), nn.Linear(mlp_hidden, 1))

    def forward(self, x: torch.Tensor, t_embed: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x))
        scale = self.scale_mlp(t_embed)[..., None, None]
        shift = self.shift_mlp(t_embed)[..., None, None]
        return F.silu(h * (1.0 + scale) + shift)


class NBPFilter(nn.Module):
    """Timestep-adaptive band-pass gate over the affinity lattice.

    A stack of ``n_blocks`` scale/shift blocks reads a fixed normalized
    coordinate map and the timestep embedding, ending in a sigmoid, so the
    gate is a smooth (0,1) map over affinity positions.
    """

    def __init__(self, lattice: int, t_dim: int, hidden: int = 16, n_blocks: int = 6):
        super().__init__()
        if lattice == 1:
            coords = torch.zeros(1, 2, 1, 1)
        else:
            axis = torch.linspace(-1.0, 1.0, lattice)
            rows = axis[:, None].expand(lattice, lattice)
            cols = axis[None, :].expand(lattice, lattice)
            coords = torch.stack([rows, cols])[None]
        self.register_buffer("coords", coords)
        blocks = []
        ch = 2
        for _ in range(n_blocks):
            blocks.append(_ScaleShiftBlock(ch, hidden, t_dim))
            ch = hidden
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(hidden, 1, 1)

    def forward(self, t_embed: torch.Tensor) -> torch.Tensor:
        """Gate map in (0,1); [n, n] for a vector embedding, [B, n, n] batched."""
        squeeze = t_embed.ndim == 1
        if squeeze:
            t_embed = t_embed.unsqueeze(0)
        if t_embed.shape[-1] != self.blocks[0].scale_mlp[0].in_features:
            raise ValueError("timestep embedding width mismatch")
        x = self.coords.expand(t_embed.shape[0], -1, -1, -1).to(t_embed.dtype)
        for block in self.blocks:
            x = block(x, t_embed)
        gate = torch.sigmoid(self.head(x)).squeeze(1)
        return gate.squeeze(0) if squeeze else gate


class FourierCrossAttention(nn.Module):
    """One gated cross-attention in the frequency domain."""

    def __init__(
        self,
        token_dim: int,
        lattice: int,
        t_dim: int,
        nbp_blocks: int = 6,
        nbp_hidden: int = 16,
        mlp_hidden: int = 128,
        enable_filter: bool = True,
        swap_query_key: bool = False,
    ):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(token_dim, token_dim))
        self.w_k = nn.Parameter(torch.empty(token_dim, token_dim))
        self.w_v = nn.Parameter(torch.empty(token_dim, token_dim))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)
        self.refine = nn.Sequential(
            nn.Linear(token_dim, mlp_hidden), nn.SiLU(), nn.Linear(mlp_hidden, token_dim)
        )
        self.nbp = NBPFilter(lattice, t_dim, hidden=nbp_hidden, n_blocks=nbp_blocks)
        self.enable_filter = enable_filter
        self.swap_query_key = swap_query_key

    def forward(
        self,
        q_tokens: torch.Tensor,
        k_tokens: torch.Tensor,
        v_tokens: torch.Tensor,
        t_embed: torch.Tensor,
    ) -> torch.Tensor:
        spec_q = fft2(q_tokens)
        spec_k = fft2(k_tokens)
        if self.swap_query_key:
            spec_q, spec_k = spec_k, spec_q
        affinity = fourier_affinity(spec_q, spec_k, self.w_q.to(q_tokens.dtype), self.w_k.to(q_tokens.dtype))
        gate = self.nbp(t_embed.to(q_tokens.dtype))
        if not self.enable_filter:
            gate = torch.ones_like(gate)
        return filtered_attend(affinity, gate, v_tokens, self.w_v.to(q_tokens.dtype), self.refine)


class SSFormerBlock(nn.Module):
    """Paired cross-attentions: noise into condition, then condition (as
    query) against the noise embedding as key and value."""

    def __init__(self, token_dim: int, lattice: int, t_dim: int, **attn_kwargs):
        super().__init__()
        self.mix_noise_into_cond = FourierCrossAttention(token_dim, lattice, t_dim, **attn_kwargs)
        self.project_to_noise = FourierCrossAttention(token_dim, lattice, t_dim, **attn_kwargs)

    def forward(
        self, c_tokens: torch.Tensor, e_tokens: torch.Tensor, t_embed: torch.Tensor
    ) -> torch.Tensor:
        c_mid = c_tokens + self.mix_noise_into_cond(c_tokens, e_tokens, c_tokens, t_embed)
        return c_mid + self.project_to_noise(c_mid, e_tokens, e_tokens, t_embed)


class SSFormer(nn.Module):
    """Chain of blocks propagating the condition embedding; the noise
    embedding is held fixed across blocks."""

    def __init__(
        self,
        channels: int,
        bottleneck: int,
        t_dim: int,
        n_blocks: int = 4,
        patch_size: int = 1,
        token_dim: int = 128,
        nbp_blocks: int = 6,
        nbp_hidden: int = 16,
        mlp_hidden: int = 128,
        enable_filter: bool = True,
        swap_query_key: bool = False,
    ):
        super().__init__()
        if bottleneck % patch_size:
            raise ValueError("bottleneck size not divisible by patch size")
        lattice = (bottleneck // patch_size) ** 2
        self.embed_cond = PatchEmbed(channels, patch_size, token_dim)
        self.embed_noise = PatchEmbed(channels, patch_size, token_dim)
        attn_kwargs = dict(
            nbp_blocks=nbp_blocks,
            nbp_hidden=nbp_hidden,
            mlp_hidden=mlp_hidden,
            enable_filter=enable_filter,
            swap_query_key=swap_query_key,
        )
        self.blocks = nn.ModuleList(
            SSFormerBlock(token_dim, lattice, t_dim, **attn_kwargs) for _ in range(n_blocks)
        )
        self.unembed = TokenUnembed(token_dim, channels, patch_size)

    def forward(
        self, c_map: torch.Tensor, e_map: torch.Tensor, t_embed: torch.Tensor
    ) -> torch.Tensor:
        c_tokens = self.embed_cond(c_map)
        e_tokens = self.embed_noise(e_map)
        for block in self.blocks:
            c_tokens = block(c_tokens, e_tokens, t_embed)
        return self.unembed(c_tokens)
