"""Neural network building blocks: conditioned U-Net, encoders, classifier.

Everything is sized for CPU-scale experiments; channel widths come from the
model config rather than being hard-coded.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


def sinusoidal_grid(side: int, dim: int) -> torch.Tensor:
    """2D sinusoidal codes for a side x side grid, shape (side*side, dim).

    Frequencies are interleaved in groups of four (sin/cos of y, sin/cos of
    x), so any prefix of the embedding still covers both axes. Coordinates
    are normalized cell centers, which makes codes of different grid sizes
    spatially comparable.
    """
    coords = (torch.arange(side, dtype=torch.float32) + 0.5) / side
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    y = yy.reshape(-1, 1)
    x = xx.reshape(-1, 1)
    groups = []
    for i in range((dim + 3) // 4):
        f = math.pi * (2.0**i)
        groups.extend([torch.sin(f * y), torch.cos(f * y), torch.sin(f * x), torch.cos(f * x)])
    return torch.cat(groups, dim=1)[:, :dim]


class ResBlock(nn.Module):
    """Two 3x3 convs with group norm, SiLU, and an additive time projection."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from spatial positions onto a context sequence.

    The attention map starts out spatially aligned: queries carry fixed-init
    sinusoidal position codes, the key projection starts as an identity
    block over the context's matching position codes, and the output
    projection starts at zero. The noisy feature map alone carries no
    reliable location signal at high noise levels; without this alignment
    the module never learns a spatial correspondence to the context grid
    and content transfer from the context stays unreachable in practice.
    """

    def __init__(self, channels: int, ctx_dim: int, n_positions: int):
        super().__init__()
        side = int(round(math.sqrt(n_positions)))
        if side * side != n_positions:
            raise ValueError(f"n_positions must be a perfect square, got {n_positions}")
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(ctx_dim, channels, bias=False)
        self.to_v = nn.Linear(ctx_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        self.q_pos = nn.Parameter(sinusoidal_grid(side, channels).unsqueeze(0))
        with torch.no_grad():
            self.to_q.weight.mul_(0.2)
            self.to_k.weight.zero_()
            shared = min(channels, ctx_dim)
            self.to_k.weight[:shared, :shared] = torch.eye(shared)
            self.proj.weight.zero_()
            self.proj.bias.zero_()

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if h * w != self.q_pos.shape[1]:
            raise ValueError(f"expected {self.q_pos.shape[1]} positions, got {h * w}")
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2)) + self.q_pos
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.proj(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class UNetBackbone(nn.Module):
    """U-shaped denoiser with timestep embedding and cross-attention.

    Input is the noisy state channel-concatenated with the glyph features;
    the style context enters through cross-attention at the two deepest
    resolutions.
    """

    def __init__(
        self,
        in_channels: int,
        resolution: int,
        base_channels: int = 16,
        channel_mults: tuple[int, ...] = (1, 2, 4),
        ctx_dim: int = 128,
        time_dim: int | None = None,
    ):
        super().__init__()
        self.time_dim = time_dim or base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(self.time_dim, self.time_dim),
            nn.SiLU(),
            nn.Linear(self.time_dim, self.time_dim),
        )
        chans = [base_channels * m for m in channel_mults]
        self.stem = nn.Conv2d(in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, ch in enumerate(chans):
            prev = chans[max(i - 1, 0)]
            self.down_blocks.append(ResBlock(prev if i else ch, ch, self.time_dim))
            self.downsamples.append(
                nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chans) - 1 else nn.Identity()
            )

        n_attn = min(2, len(chans))
        self.attn_levels = set(range(len(chans) - n_attn, len(chans)))
        level_res = {i: resolution // (2**i) for i in range(len(chans))}
        self.down_attn = nn.ModuleDict(
            {str(i): CrossAttention(chans[i], ctx_dim, level_res[i] ** 2) for i in self.attn_levels}
        )

        # The deepest level's downsample is an identity, so the mid block
        # runs at the deepest level's resolution.
        mid_res = level_res[len(chans) - 1]
        self.mid1 = ResBlock(chans[-1], chans[-1], self.time_dim)
        self.mid_attn = CrossAttention(chans[-1], ctx_dim, mid_res**2)
        self.mid2 = ResBlock(chans[-1], chans[-1], self.time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(chans))):
            out_ch = chans[max(i - 1, 0)]
            self.up_blocks.append(ResBlock(chans[i] * 2, out_ch, self.time_dim))
            self.upsamples.append(
                nn.ConvTranspose2d(out_ch, out_ch, 2, stride=2) if i > 0 else nn.Identity()
            )
        self.out_norm = _norm(chans[0])
        self.out_conv = nn.Conv2d(chans[0], 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h = self.stem(x)
        skips = []
        for i, (block, down) in enumerate(zip(self.down_blocks, self.downsamples)):
            h = block(h, temb)
            if i in self.attn_levels:
                h = self.down_attn[str(i)](h, ctx)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), ctx), temb)
        for j, (block, up) in enumerate(zip(self.up_blocks, self.upsamples)):
            level = len(skips) - 1 - j
            h = block(torch.cat([h, skips[level]], dim=1), temb)
            h = up(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class GlyphEncoder(nn.Module):
    """Small conv net producing spatial glyph features at input resolution."""

    def __init__(self, out_channels: int = 4, hidden: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, out_channels, 3, padding=1),
        )

    def forward(self, x_g: torch.Tensor) -> torch.Tensor:
        return self.net(x_g)


class StyleEncoder(nn.Module):
    """Image-embedding conv net plus the linear alignment layer.

    Produces n_tokens context vectors of ctx_dim from a pooled spatial grid,
    with a learned positional embedding so tokens keep their grid identity.
    """

    def __init__(self, n_tokens: int = 4, ctx_dim: int = 128, base: int = 16):
        super().__init__()
        grid = int(round(math.sqrt(n_tokens)))
        if grid * grid != n_tokens:
            raise ValueError(f"n_tokens must be a perfect square, got {n_tokens}")
        self.grid = grid
        self.n_tokens = n_tokens
        # A single early downsample keeps the feature map fine enough for
        # large token grids; pooling to the grid happens at the very end.
        self.embed = nn.Sequential(
            nn.Conv2d(1, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base * 2, base * 4, 3, padding=1),
            nn.SiLU(),
        )
        self.align = nn.Linear(base * 4, ctx_dim)
        # Matches the sinusoidal query codes in CrossAttention so attention
        # starts out spatially aligned.
        self.pos = nn.Parameter(sinusoidal_grid(grid, ctx_dim).unsqueeze(0))

    def forward(self, x_s: torch.Tensor) -> torch.Tensor:
        h = self.embed(x_s)
        h = F.adaptive_avg_pool2d(h, self.grid)
        tokens = h.flatten(2).transpose(1, 2)  # (b, n_tokens, feat)
        return self.align(tokens) + self.pos


class DenoiserNet(nn.Module):
    """Encoder-decoder with skip connections; sigmoid-squashed output."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.enc1 = nn.Sequential(nn.Conv2d(1, base, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(base, base, 3, padding=1), nn.SiLU())
        self.down = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.enc2 = nn.Sequential(nn.Conv2d(base * 2, base * 2, 3, padding=1), nn.SiLU())
        self.up = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec = nn.Sequential(nn.Conv2d(base * 2, base, 3, padding=1), nn.SiLU(),
                                 nn.Conv2d(base, 1, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(F.silu(self.down(e1)))
        u = self.up(e2)
        return torch.sigmoid(self.dec(torch.cat([u, e1], dim=1)))


class SmallResNet(nn.Module):
    """Compact residual classifier with a penultimate feature tap."""

    def __init__(self, n_classes: int, base: int = 16, stages: int = 3):
        super().__init__()
        self.stem = nn.Conv2d(1, base, 3, padding=1)
        blocks = []
        ch = base
        for _ in range(stages):
            blocks.append(_ClsBlock(ch, ch * 2))
            ch *= 2
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = ch
        self.head = nn.Linear(ch, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(F.silu(self.stem(x)))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class _ClsBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=2)
        self.norm = _norm(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = self.conv2(h)
        return F.silu(self.norm(h + self.skip(x)))
