"""The four parameterized networks: teacher/auxiliary denoiser, adapter, generator.

All forwards are deterministic given parameters and inputs. The denoiser is
a small three-level encoder-decoder with skip connections, a sinusoidal
timestep embedding, a learned token per dataset class plus a learned null
token, and additive injection ports for adapter features at each encoder
resolution.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

CKPT_MAGIC = "structsr-ckpt-v1"


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 16
    width_mults: tuple[int, ...] = (1, 2, 4)
    emb_dim: int = 64
    num_classes: int = 5
    groups: int = 4

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.width_mults)

    @property
    def null_token(self) -> int:
        return self.num_classes


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=torch.float64, device=t.device)
            / half
        )
        args = t[:, None].to(torch.float64) * freqs[None]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Noise-prediction network with additive adapter-feature ports."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        e = cfg.emb_dim
        self.time_embed = SinusoidalTimeEmbedding(e)
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        # Index cfg.num_classes is the learned null token.
        self.token_embed = nn.Embedding(cfg.num_classes + 1, e)
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.enc = nn.ModuleList(
            [ResBlock(w[i], w[i], e, cfg.groups) for i in range(len(w))]
        )
        self.down = nn.ModuleList(
            [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(len(w) - 1)]
        )
        self.mid = ResBlock(w[-1], w[-1], e, cfg.groups)
        self.up = nn.ModuleList(
            [nn.Conv2d(w[i + 1], w[i], 3, padding=1) for i in range(len(w) - 1)]
        )
        self.dec = nn.ModuleList(
            [ResBlock(2 * w[i], w[i], e, cfg.groups) for i in range(len(w))]
        )
        self.out_norm = nn.GroupNorm(min(cfg.groups, w[0]), w[0])
        self.out_conv = nn.Conv2d(w[0], cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        # Learned scalar preconditioning per (t, token): an input passthrough
        # plus a multiplicative modulation of the conv head, both starting at
        # the values that keep the untrained prediction exactly zero. The
        # passthrough carries the near-identity optimum at high noise, which
        # the conv body alone represents poorly; the modulation lets the
        # body's contribution shrink there.
        self.gate = nn.Linear(cfg.emb_dim, 1)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)
        self.head_mod = nn.Linear(cfg.emb_dim, 1)
        nn.init.zeros_(self.head_mod.weight)
        nn.init.zeros_(self.head_mod.bias)

    def feature_channels(self) -> tuple[int, ...]:
        return self.cfg.widths

    def forward(self, zt, t, tokens, features=None):
        """Predict the noise component of zt.

        features, when given, is one tensor per encoder level, added to the
        activations after that level's block; None behaves identically to an
        all-zero stack.
        """
        if zt.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} channels, got {zt.shape[1]}")
        w = self.cfg.widths
        if features is not None and len(features) != len(w):
            raise ShapeError(f"expected {len(w)} feature maps, got {len(features)}")
        emb = self.time_mlp(self.time_embed(t).to(zt.dtype)) + self.token_embed(tokens)
        h = self.stem(zt)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb)
            if features is not None:
                if features[i].shape[-2:] != h.shape[-2:]:
                    raise ShapeError(
                        f"feature {i} spatial {tuple(features[i].shape[-2:])} "
                        f"!= activation {tuple(h.shape[-2:])}"
                    )
                h = h + features[i]
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        h = self.mid(h, emb)
        for i in reversed(range(len(self.dec))):
            if i < len(self.up):
                h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), emb)
        gate = self.gate(emb)[:, :, None, None]
        mod = 1.0 + self.head_mod(emb)[:, :, None, None]
        return mod * self.out_conv(F.silu(self.out_norm(h))) + gate * zt


class Adapter(nn.Module):
    """Convolutional pyramid mapping the 4-plane condition to encoder features.

    Each level's output head is zero-initialized, so an untrained adapter
    injects exactly nothing.
    """

    def __init__(self, feature_channels: tuple[int, ...], width: int = 16, groups: int = 4):
        super().__init__()
        self.stem = nn.Conv2d(4, width, 3, padding=1)
        body, heads, downs = [], [], []
        for i, ch in enumerate(feature_channels):
            body.append(
                nn.Sequential(
                    nn.GroupNorm(min(groups, width), width),
                    nn.SiLU(),
                    nn.Conv2d(width, width, 3, padding=1),
                )
            )
            head = nn.Conv2d(width, ch, 1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            heads.append(head)
            if i < len(feature_channels) - 1:
                downs.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
        self.body = nn.ModuleList(body)
        self.heads = nn.ModuleList(heads)
        self.downs = nn.ModuleList(downs)

    def forward(self, planes: torch.Tensor) -> list[torch.Tensor]:
        h = self.stem(planes)
        feats = []
        for i, block in enumerate(self.body):
            h = h + block(h)
            feats.append(self.heads[i](h))
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats


def cfg_combine(cond_pred, uncond_pred, guidance: float):
    """Classifier-free combination uncond + guidance * (cond - uncond).

    guidance 1 and 0 return the conditional/unconditional input unchanged.
    """
    if cond_pred.shape != uncond_pred.shape:
        raise ShapeError(
            f"cond shape {tuple(cond_pred.shape)} != uncond shape {tuple(uncond_pred.shape)}"
        )
    if guidance < 0:
        raise ParameterError(f"guidance must be >= 0, got {guidance}")
    if guidance == 1.0:
        return cond_pred
    if guidance == 0.0:
        return uncond_pred
    return uncond_pred + guidance * (cond_pred - uncond_pred)


class LoRAConv2d(nn.Module):
    """Frozen conv with a trainable low-rank weight delta.

    effective weight = base + multiplier * (up @ down), rank r factors;
    up is zero-initialized so the wrapped layer starts bit-identical to the
    base, as does any multiplier of 0.
    """

    def __init__(self, base: nn.Conv2d, rank: int = 4, multiplier: float = 1.0):
        super().__init__()
        if rank < 1:
            raise ParameterError(f"rank must be >= 1, got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.multiplier = multiplier
        cout, cin, kh, kw = base.weight.shape
        self.down = nn.Parameter(torch.empty(rank, cin * kh * kw))
        self.up = nn.Parameter(torch.zeros(cout, rank))
        nn.init.kaiming_uniform_(self.down, a=math.sqrt(5))

    def forward(self, x):
        w = self.base.weight
        if self.multiplier != 0.0:
            delta = (self.up @ self.down).view_as(w)
            w = w + self.multiplier * delta
        return F.conv2d(
            x,
            w,
            self.base.bias,
            stride=self.base.stride,
            padding=self.base.padding,
        )


def apply_lora(module: nn.Module, rank: int = 4, multiplier: float = 1.0) -> nn.Module:
    """Wrap every Conv2d under `module` with a low-rank delta, in place."""
    for name, child in module.named_children():
        if isinstance(child, nn.Conv2d):
            setattr(module, name, LoRAConv2d(child, rank=rank, multiplier=multiplier))
        else:
            apply_lora(child, rank=rank, multiplier=multiplier)
    return module


def lora_parameters(module: nn.Module):
    for m in module.modules():
        if isinstance(m, LoRAConv2d):
            yield m.down
            yield m.up


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class InputAdapter(nn.Module):
    """Residual conv stack conditioning the backbone on the upsampled input."""

    def __init__(self, channels: int = 3, width: int = 16, groups: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return x + self.net(x)


class Generator(nn.Module):
    """One-step upscaler: a denoiser clone evaluated at a fixed timestep.

    The low-quality input is bicubically upsampled, passed through a
    trainable input adapter, and denoised once; the latent prediction
    (h - b_t * eps_hat) / a_t is the super-resolution output.
    """

    def __init__(
        self,
        backbone: Denoiser,
        scale: int,
        t_fix: int,
        a_fix: float,
        b_fix: float,
        lora_rank: int = 4,
        lora_multiplier: float = 1.0,
        input_width: int = 16,
    ):
        super().__init__()
        if a_fix < 1e-8:
            raise ParameterError(f"a at t_fix too small: {a_fix}")
        self.backbone = apply_lora(
            freeze(copy.deepcopy(backbone)), rank=lora_rank, multiplier=lora_multiplier
        )
        self.input_adapter = InputAdapter(
            channels=backbone.cfg.in_channels, width=input_width
        )
        self.scale = scale
        self.t_fix = t_fix
        self.a_fix = a_fix
        self.b_fix = b_fix

    def forward_latent(self, lq: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Unclamped latent prediction, used inside the training losses."""
        u = F.interpolate(
            lq, scale_factor=self.scale, mode="bicubic", align_corners=False
        )
        h = self.input_adapter(u)
        t = torch.full((lq.shape[0],), self.t_fix, dtype=torch.long, device=lq.device)
        eps = self.backbone(h, t, tokens)
        return (h - self.b_fix * eps) / self.a_fix

    def forward(self, lq: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.forward_latent(lq, tokens).clamp(0.0, 1.0)


def save_checkpoint(path, kind: str, model: nn.Module, schedule_meta: dict,
                    config: dict, iteration: int, extra: dict | None = None) -> None:
    payload = {
        "magic": CKPT_MAGIC,
        "kind": kind,
        "state": model.state_dict(),
        "schedule": schedule_meta,
        "config": config,
        "iteration": iteration,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, kind: str | None = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("magic") != CKPT_MAGIC:
        raise ParameterError(f"{path} is not a recognized checkpoint")
    if kind is not None and payload.get("kind") != kind:
        raise ParameterError(
            f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}"
        )
    return payload
