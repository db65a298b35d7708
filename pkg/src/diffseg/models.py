"""The two encoder-decoder networks and their wiring.

* ConditionNet: raw image -> anchor segmentation logits + per-scale decoder
  features + the deepest semantic embedding. No timestep dependence, so its
  output can be computed once per image and reused across sampling steps.
* DiffusionNet: noisy mask + timestep -> noise prediction, with the anchor
  feature injected at the first encoder stage and the fused bottleneck
  supplied by the spectrum-space transformer (or plain addition when it is
  disabled).

Both are depth-``depth`` residual UNets with width doubling capped at 8x,
group normalization and SiLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .anchor import AnchorAttention
from .config import RunConfig
from .schedule import NoiseSchedule, TimestepEmbedding
from .ssformer import SSFormer


@dataclass
class ConditionOutput:
    anchor_logits: torch.Tensor  # [B, 1, H, W]
    decoder_features: list[torch.Tensor]  # deep -> shallow, last is full-res
    semantic_embedding: torch.Tensor  # [B, C_deep, H/2^d, W/2^d]


@dataclass
class DiffusionEncoding:
    encoder_features: list[torch.Tensor]  # shallow -> deep skip connections
    bottleneck_embedding: torch.Tensor


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    """Pre-activation residual block with optional additive timestep input."""

    def __init__(self, in_ch: int, out_ch: int, t_dim: int | None = None):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.t_proj = nn.Linear(t_dim, out_ch) if t_dim else None

    def forward(self, x: torch.Tensor, t_embed: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.t_proj is not None and t_embed is not None:
            h = h + self.t_proj(t_embed)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNetCore(nn.Module):
    """Shared encoder/decoder plumbing for both networks."""

    def __init__(self, in_channels: int, base: int, depth: int, t_dim: int | None):
        super().__init__()
        self.depth = depth
        chs = [base * 2 ** min(i, 3) for i in range(depth)]
        self.channels = chs
        self.stem = nn.Conv2d(in_channels, chs[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chs[0]
        for ch in chs:
            self.enc_blocks.append(ResBlock(prev, ch, t_dim))
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid = ResBlock(prev, prev, t_dim)
        self.up_convs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for ch in reversed(chs):
            self.up_convs.append(nn.Conv2d(prev, ch, 3, padding=1))
            self.dec_blocks.append(ResBlock(2 * ch, ch, t_dim))
            prev = ch
        self.out_norm = _norm(chs[0])

    def encode(
        self,
        x: torch.Tensor,
        t_embed: torch.Tensor | None = None,
        first_stage_hook=None,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        if x.shape[-1] % 2**self.depth or x.shape[-2] % 2**self.depth:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by 2^{self.depth}"
            )
        h = self.stem(x)
        skips = []
        for i, (block, down) in enumerate(zip(self.enc_blocks, self.downs)):
            h = block(h, t_embed)
            if i == 0 and first_stage_hook is not None:
                h = first_stage_hook(h)
            skips.append(h)
            h = down(h)
        return skips, self.mid(h, t_embed)

    def decode(
        self,
        bottleneck: torch.Tensor,
        skips: list[torch.Tensor],
        t_embed: torch.Tensor | None = None,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        if len(skips) != self.depth:
            raise ValueError(f"expected {self.depth} skip features, got {len(skips)}")
        h = bottleneck
        features = []
        for up, block, skip in zip(self.up_convs, self.dec_blocks, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            if h.shape[-2:] != skip.shape[-2:]:
                raise ValueError(
                    f"decoder scale {tuple(h.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}"
                )
            h = block(torch.cat([h, skip], dim=1), t_embed)
            features.append(h)
        return features, F.silu(self.out_norm(h))


class ConditionNet(nn.Module):
    """Image encoder producing the anchor segmentation and semantic embedding."""

    def __init__(self, in_channels: int, base: int, depth: int):
        super().__init__()
        self.core = UNetCore(in_channels, base, depth, t_dim=None)
        self.anchor_head = nn.Conv2d(base, 1, 1)

    def forward(self, image: torch.Tensor) -> ConditionOutput:
        skips, bottleneck = self.core.encode(image)
        features, head_in = self.core.decode(bottleneck, skips)
        return ConditionOutput(
            anchor_logits=self.anchor_head(head_in),
            decoder_features=features,
            semantic_embedding=bottleneck,
        )


class DiffusionNet(nn.Module):
    """Noisy-mask encoder/decoder with anchor injection at the first stage."""

    def __init__(self, base: int, depth: int, t_dim: int, anchor_mode: str, anchor_kernel: int):
        super().__init__()
        self.core = UNetCore(1, base, depth, t_dim=t_dim)
        self.anchor_mode = anchor_mode
        self.anchor_attn = (
            AnchorAttention(base, mode=anchor_mode, kernel_size=anchor_kernel)
            if anchor_mode in ("sa", "usa")
            else None
        )
        self.eps_head = nn.Conv2d(base, 1, 1)

    def encode(
        self, x_t: torch.Tensor, t_embed: torch.Tensor, anchor_feature: torch.Tensor | None = None
    ) -> DiffusionEncoding:
        if not torch.isfinite(x_t).all():
            raise FloatingPointError("non-finite x_t")
        hook = None
        if anchor_feature is not None and self.anchor_attn is not None:
            hook = lambda h: self.anchor_attn(anchor_feature, h)
        skips, bottleneck = self.core.encode(x_t, t_embed, first_stage_hook=hook)
        return DiffusionEncoding(encoder_features=skips, bottleneck_embedding=bottleneck)

    def decode(
        self, fused: torch.Tensor, skips: list[torch.Tensor], t_embed: torch.Tensor
    ) -> torch.Tensor:
        # fused sits one downsample below the deepest skip
        if fused.shape[-1] * 2 != skips[-1].shape[-1] or fused.shape[-2] * 2 != skips[-1].shape[-2]:
            raise ValueError(
                f"fused embedding scale {tuple(fused.shape[-2:])} does not sit one level "
                f"below the deepest skip {tuple(skips[-1].shape[-2:])}"
            )
        _, head_in = self.core.decode(fused, skips, t_embed)
        return self.eps_head(head_in)


class SegDiffusionModel(nn.Module):
    """Full conditioned denoiser: eps(x_t, image, t)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        m = cfg.model
        self.schedule = NoiseSchedule(
            cfg.schedule.total_steps, cfg.schedule.beta_start, cfg.schedule.beta_end
        )
        self.time_embed = TimestepEmbedding(cfg.schedule.total_steps, m.time_embed_dim)
        self.condition = ConditionNet(m.in_channels, m.base_width, m.depth)
        self.diffusion = DiffusionNet(
            m.base_width, m.depth, m.time_embed_dim, m.anchor_mode, m.anchor_kernel_size
        )
        deep_ch = self.condition.core.channels[-1]
        bottleneck = m.image_size // 2**m.depth
        s = cfg.ssformer
        self.ssformer = (
            SSFormer(
                channels=deep_ch,
                bottleneck=bottleneck,
                t_dim=m.time_embed_dim,
                n_blocks=s.n_blocks,
                patch_size=s.patch_size,
                token_dim=s.token_dim,
                nbp_blocks=s.nbp_blocks,
                nbp_hidden=s.nbp_hidden,
                mlp_hidden=s.mlp_hidden,
                enable_filter=s.enable_filter,
                swap_query_key=s.swap_query_key,
            )
            if s.enabled
            else None
        )

    def noise_schedule(self) -> NoiseSchedule:
        return self.schedule

    def _t_embedding(self, t, batch: int) -> torch.Tensor:
        emb = self.time_embed(t)
        if emb.ndim == 1:
            emb = emb.unsqueeze(0).expand(batch, -1)
        return emb

    def condition_context(self, images: torch.Tensor) -> ConditionOutput:
        if images.ndim != 4:
            raise ValueError("images must be [B, C, H, W]")
        return self.condition(images)

    def anchor_feature(self, context: ConditionOutput) -> torch.Tensor | None:
        if self.diffusion.anchor_attn is None:
            return None
        return context.decoder_features[-1]

    def fuse(
        self, context: ConditionOutput, encoding: DiffusionEncoding, t_embed: torch.Tensor
    ) -> torch.Tensor:
        c0 = context.semantic_embedding
        e = encoding.bottleneck_embedding
        if self.ssformer is not None:
            return self.ssformer(c0, e, t_embed)
        return e + c0

    def predict_noise(self, x_t: torch.Tensor, t, context: ConditionOutput) -> torch.Tensor:
        t_embed = self._t_embedding(t, x_t.shape[0])
        encoding = self.diffusion.encode(x_t, t_embed, self.anchor_feature(context))
        fused = self.fuse(context, encoding, t_embed)
        return self.diffusion.decode(fused, encoding.encoder_features, t_embed)

    def forward(
        self, x_t: torch.Tensor, t, images: torch.Tensor
    ) -> tuple[torch.Tensor, ConditionOutput]:
        context = self.condition_context(images)
        return self.predict_noise(x_t, t, context), context


def build_model(cfg: RunConfig, init_seed: int | None = None) -> SegDiffusionModel:
    """Construct a model with a reproducible parameter initialization."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return SegDiffusionModel(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
