"""
Differentiable numerics core.

Arrays are float64 torch tensors; a DiffNode is a tensor that takes part in
the autograd graph. Every network module of the lab composes the primitives
below so that shape contracts and parameter checks live in one place.
"""

import logging
import math
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from utils.errors import ContractError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
COSINE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5
DEFAULT_LEAKY_SLOPE = 0.01


def as_node(data, requires_grad: bool = False) -> torch.Tensor:
    """
    Wrap array-like data as a float64 tensor.

    Args:
        data: numpy array, nested list, scalar or tensor
        requires_grad (bool): Whether the node collects a gradient

    Returns:
        torch.Tensor: float64 copy of the data
    """
    if isinstance(data, torch.Tensor):
        tensor = data.detach().to(DTYPE).clone()
    else:
        tensor = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    return tensor.requires_grad_(requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not agree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def leaky_relu(x: torch.Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> torch.Tensor:
    if slope < 0:
        raise ParameterError(f"leaky_relu slope must be >= 0, got {slope}")
    return F.leaky_relu(x, negative_slope=slope)


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity of two vectors, u.v / (|u||v| + eps).

    Args:
        u (torch.Tensor): Vector of length d
        v (torch.Tensor): Vector of length d

    Returns:
        torch.Tensor: Scalar similarity
    """
    if u.dim() != 1 or v.dim() != 1 or u.shape[0] != v.shape[0] or u.shape[0] < 1:
        raise DimensionError(f"cosine_similarity needs equal-length vectors, got {tuple(u.shape)} and {tuple(v.shape)}")
    return pairwise_cosine(u.unsqueeze(0), v.unsqueeze(0))[0, 0]


def pairwise_cosine(c: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity between every row of ``c`` and every row of ``mu``.

    Entry [..., t, k] depends only on c[..., t, :] and mu[k, :]; the product is
    reduced elementwise rather than through a matrix product so that changing
    one prototype never perturbs another column's bits.

    Args:
        c (torch.Tensor): [..., T, D] predictions
        mu (torch.Tensor): [K, D] prototype means

    Returns:
        torch.Tensor: [..., T, K] similarities
    """
    if c.shape[-1] != mu.shape[-1] or mu.dim() != 2:
        raise DimensionError(f"pairwise_cosine shapes do not agree: {tuple(c.shape)} vs {tuple(mu.shape)}")
    dots = (c.unsqueeze(-2) * mu).sum(dim=-1)
    c_norm = torch.sqrt((c * c).sum(dim=-1))
    mu_norm = torch.sqrt((mu * mu).sum(dim=-1))
    return dots / (c_norm.unsqueeze(-1) * mu_norm + COSINE_EPS)


def softmax(x: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    shifted = (x - x.max(dim=dim, keepdim=True).values.detach()) / temperature
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=dim, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if x.shape[-1] < 1 or gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(f"layer_norm width mismatch: x {tuple(x.shape)}, gain {tuple(gain.shape)}, bias {tuple(bias.shape)}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def attention(
    query: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Scaled dot-product attention for one head.

    Leading dimensions are treated as batch dimensions; the contracts below
    apply to the trailing two.

    Args:
        query (torch.Tensor): [..., q, d]
        keys (torch.Tensor): [..., n, d]
        values (torch.Tensor): [..., n, dv]
        bias (torch.Tensor, optional): Additive logit bias broadcastable to [..., q, n]

    Returns:
        torch.Tensor: [..., q, dv]
    """
    if query.shape[-1] != keys.shape[-1]:
        raise DimensionError(f"attention query/key width mismatch: {tuple(query.shape)} vs {tuple(keys.shape)}")
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionError(f"attention key/value length mismatch: {tuple(keys.shape)} vs {tuple(values.shape)}")
    logits = query @ keys.transpose(-1, -2) / math.sqrt(query.shape[-1])
    if bias is not None:
        if tuple(bias.shape[-2:]) != (query.shape[-2], keys.shape[-2]):
            raise DimensionError(
                f"attention bias must be {query.shape[-2]}x{keys.shape[-2]}, got {tuple(bias.shape)}"
            )
        logits = logits + bias
    return softmax(logits, dim=-1) @ values


def upsample_linear(x: torch.Tensor, factor: int) -> torch.Tensor:
    """
    Linear interpolation along the time axis (dim -2).

    Output frame j sits at source position j / factor; frames past the last
    source frame repeat it, so the output has exactly T * factor frames.

    Args:
        x (torch.Tensor): [..., T, d]
        factor (int): Positive integer upsampling factor

    Returns:
        torch.Tensor: [..., T * factor, d]
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ParameterError(f"upsample factor must be a positive integer, got {factor}")
    if x.dim() < 2 or x.shape[-2] < 1:
        raise DimensionError(f"upsample_linear needs at least one frame, got shape {tuple(x.shape)}")
    if factor == 1:
        return x
    length = x.shape[-2]
    positions = torch.arange(length * factor, dtype=DTYPE) / factor
    lower = torch.floor(positions).long()
    upper = torch.clamp(lower + 1, max=length - 1)
    weight = (positions - lower.to(DTYPE)).unsqueeze(-1)
    # Beyond the last source frame both neighbours are the last frame.
    weight = torch.where((lower >= length - 1).unsqueeze(-1), torch.zeros_like(weight), weight)
    return x.index_select(-2, lower) * (1.0 - weight) + x.index_select(-2, upper) * weight


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    """Explicit gradient reset between steps."""
    for param in params:
        param.grad = None


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """
    Populate gradients of every leaf reachable from ``loss``.

    Gradients accumulate across calls until zero_grad is used.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward(retain_graph=retain_graph)


def gradient_norm(params: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float((param.grad ** 2).sum())
    return math.sqrt(total)


def make_adamw(
    param_groups: Sequence[dict],
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> torch.optim.AdamW:
    """
    Build an AdamW optimizer (decoupled weight decay, bias-corrected moments).

    Args:
        param_groups: List of {"params": [...], "lr": float, "name": str}
        betas: Moment decay rates
        eps: Denominator guard
        weight_decay: Decoupled decay coefficient

    Returns:
        torch.optim.AdamW: The optimizer; moments start at zero
    """
    for group in param_groups:
        if group["lr"] <= 0:
            raise ParameterError(f"learning rate must be > 0, got {group['lr']} for group {group.get('name')}")
    return torch.optim.AdamW(
        list(param_groups), betas=betas, eps=eps, weight_decay=weight_decay, foreach=False
    )


def adamw_step(optimizer: torch.optim.AdamW) -> None:
    """One AdamW update of every parameter that holds a gradient."""
    for group in optimizer.param_groups:
        if group["lr"] <= 0:
            raise ParameterError(f"learning rate must be > 0, got {group['lr']}")
    optimizer.step()
