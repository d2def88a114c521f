"""
Transformer building blocks composed from the numgrad primitives.
"""

from typing import Optional

import torch
import torch.nn as nn

from constants.config import RESIDUAL_INIT_SCALE
from utils import numgrad
from utils.errors import DimensionError, ParameterError


class LayerNorm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width, dtype=numgrad.DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=numgrad.DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return numgrad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    """
    Multi-head attention with an optional additive logit bias per head.

    The bias has shape [heads, q, n] (or [q, n], shared by all heads) and
    carries the relative-position terms of the context network.
    """

    def __init__(self, width: int, n_heads: int):
        super().__init__()
        if n_heads < 1 or width % n_heads != 0:
            raise ParameterError(f"width {width} is not divisible by {n_heads} heads")
        self.width = width
        self.n_heads = n_heads
        self.head_width = width // n_heads
        self.q_proj = nn.Linear(width, width, dtype=numgrad.DTYPE)
        self.k_proj = nn.Linear(width, width, dtype=numgrad.DTYPE)
        self.v_proj = nn.Linear(width, width, dtype=numgrad.DTYPE)
        self.out_proj = nn.Linear(width, width, dtype=numgrad.DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # [..., n, width] -> [..., heads, n, head_width]
        shape = x.shape[:-1] + (self.n_heads, self.head_width)
        return x.reshape(shape).transpose(-2, -3)

    def forward(
        self,
        query: torch.Tensor,
        context: torch.Tensor,
        bias: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if query.shape[-1] != self.width or context.shape[-1] != self.width:
            raise DimensionError(
                f"attention expects width {self.width}, got {tuple(query.shape)} and {tuple(context.shape)}"
            )
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        heads = numgrad.attention(q, k, v, bias=bias)
        merged = heads.transpose(-2, -3).reshape(query.shape[:-1] + (self.width,))
        return self.out_proj(merged)


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden: int, slope: float = numgrad.DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden, dtype=numgrad.DTYPE)
        self.fc2 = nn.Linear(hidden, width, dtype=numgrad.DTYPE)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(numgrad.leaky_relu(self.fc1(x), self.slope))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, width: int, n_heads: int, ff_mult: int = 2, slope: float = numgrad.DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.norm_attn = LayerNorm(width)
        self.attn = MultiHeadAttention(width, n_heads)
        self.norm_ff = LayerNorm(width)
        self.ff = FeedForward(width, width * ff_mult, slope)

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        normed = self.norm_attn(x)
        x = x + self.attn(normed, normed, bias=bias)
        return x + self.ff(self.norm_ff(x))


def init_parameters(
    module: nn.Module,
    generator: torch.Generator,
    std: float = 0.02,
    residual_scale: float = RESIDUAL_INIT_SCALE,
) -> None:
    """
    Deterministically (re)initialize every parameter of ``module``.

    Weight matrices/kernels: uniform in +-1/sqrt(fan_in). Biases: zero.
    LayerNorm gains: one. Other tensors (embeddings, tokens, bias tables):
    normal with the given std. The attention output and second feedforward
    weights of every TransformerBlock are then multiplied by ``residual_scale``.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                param.fill_(1.0)
            elif leaf == "bias":
                param.zero_()
            elif leaf == "weight" and param.dim() >= 2:
                fan_in = param[0].numel()
                bound = 1.0 / fan_in ** 0.5
                param.copy_((torch.rand(param.shape, generator=generator, dtype=param.dtype) * 2 - 1) * bound)
            else:
                param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
        for block in module.modules():
            if isinstance(block, TransformerBlock):
                block.attn.out_proj.weight.mul_(residual_scale)
                block.ff.fc2.weight.mul_(residual_scale)
