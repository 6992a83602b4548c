"""Small nn building blocks on top of :mod:`surgtoy.numerics`."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx


class Linear(nn.Module):
    """Affine map with uniform(+-1/sqrt(fan_in)) weights and zero bias."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        nx.uniform_fan_in_(self.weight)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        out = x @ self.weight.t()
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        return nx.layer_norm(x, self.gain, self.bias)


class Attention(nn.Module):
    """Projected multi-head attention; ``kv_width`` may differ from ``width``."""

    def __init__(self, width: int, n_heads: int = 1, kv_width: int | None = None):
        super().__init__()
        if width % n_heads:
            raise nx.ShapeError(f"{n_heads} heads do not divide width {width}")
        kv_width = width if kv_width is None else kv_width
        self.n_heads = n_heads
        self.q = Linear(width, width)
        self.k = Linear(kv_width, width)
        self.v = Linear(kv_width, width)
        self.o = Linear(width, width)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        out = nx.cross_attention(self.q(x), self.k(context), self.v(context), self.n_heads, mask)
        return self.o(out)


class MLP(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(width, hidden)
        self.fc2 = Linear(hidden, width)

    def forward(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, n_heads: int = 1, mlp_ratio: int = 2):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = Attention(width, n_heads)
        self.ln2 = LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio * width)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


def sinusoid(positions: torch.Tensor, width: int) -> torch.Tensor:
    """Fixed sin/cos encoding of integer positions, shape ``(len(positions), width)``."""
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    enc = torch.zeros(len(positions), width, dtype=torch.float64)
    enc[:, 0:2 * half:2] = torch.sin(angles)
    enc[:, 1:2 * half:2] = torch.cos(angles)
    return enc


def sinusoid_3d(coords: torch.Tensor, width: int) -> torch.Tensor:
    """Encode ``(t, y, x)`` integer coordinates by concatenating per-axis sinusoids.

    ``width`` is split as evenly as possible across the three axes.
    """
    parts = [width // 3, width // 3, width - 2 * (width // 3)]
    return torch.cat([sinusoid(coords[:, a], parts[a]) for a in range(3)], dim=1)
