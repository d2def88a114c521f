"""
Dual-branch frame-level encoder.

A convolutional branch keeps full time resolution; a transformer branch
works on frequency-band x time-stride patches, is pooled over bands by
attention with a learnable query, and is brought back to full resolution by
linear upsampling. Both are projected to the embedding width and summed.
"""

import logging
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from utils import numgrad
from utils.errors import DimensionError
from utils.layers import LayerNorm, MultiHeadAttention, TransformerBlock
from utils.run_config import EncoderConfig

logger = logging.getLogger(__name__)


def _batched(features: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if features.dim() == 2:
        return features.unsqueeze(0), True
    if features.dim() == 3:
        return features, False
    raise DimensionError(f"Expected features [F, T] or [B, F, T], got {tuple(features.shape)}")


class ConvBranch(nn.Module):
    """Stride-1 temporal convolutions over the frequency-channel input."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.n_freq = config.n_freq
        self.slope = config.leaky_slope
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_channels = config.n_freq
        for channels in config.conv_channels:
            self.convs.append(
                nn.Conv1d(in_channels, channels, config.conv_kernel, padding=config.conv_kernel // 2, dtype=numgrad.DTYPE)
            )
            self.norms.append(LayerNorm(channels))
            in_channels = channels
        self.out_width = in_channels

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(features)
        if x.shape[1] != self.n_freq:
            raise DimensionError(f"Conv branch expects {self.n_freq} frequency bins, got {x.shape[1]}")
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x)
            x = numgrad.leaky_relu(norm(x.transpose(1, 2)), self.slope).transpose(1, 2)
        x = x.transpose(1, 2)  # [B, T, D1]
        return x[0] if squeeze else x


class TransformerBranch(nn.Module):
    """Band x time-patch tokens with per-band patch embeddings and learned band and time-position embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.n_freq = config.n_freq
        self.n_bands = config.n_bands
        self.band_width = config.n_freq // config.n_bands
        self.stride = config.time_downsample
        self.max_time_patches = config.max_time_patches
        # one patch embedding per band; band tokens keep their own spectral shape
        self.patch_embed = nn.ModuleList(
            [nn.Linear(self.band_width * self.stride, config.d_model, dtype=numgrad.DTYPE) for _ in range(config.n_bands)]
        )
        self.band_embedding = nn.Parameter(torch.zeros(config.n_bands, config.d_model, dtype=numgrad.DTYPE))
        self.time_embedding = nn.Parameter(torch.zeros(config.max_time_patches, config.d_model, dtype=numgrad.DTYPE))
        self.blocks = nn.ModuleList(
            [
                TransformerBlock(config.d_model, config.n_heads, config.ff_mult, config.leaky_slope)
                for _ in range(config.n_transformer_blocks)
            ]
        )

    def n_patches(self, n_frames: int) -> int:
        return -(-n_frames // self.stride)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """
        Args:
            features (torch.Tensor): [F, T] or [B, F, T]

        Returns:
            torch.Tensor: Tokens [B, T/u, n_bands, d_model] (batch axis dropped for 2-D input)
        """
        x, squeeze = _batched(features)
        batch, n_freq, n_frames = x.shape
        if n_freq != self.n_freq:
            raise DimensionError(f"Transformer branch expects {self.n_freq} frequency bins, got {n_freq}")
        n_patches = self.n_patches(n_frames)
        if n_patches > self.max_time_patches:
            raise DimensionError(f"{n_frames} frames need {n_patches} time patches, limit is {self.max_time_patches}")
        pad = n_patches * self.stride - n_frames
        if pad:
            x = F.pad(x, (0, pad), mode="replicate")
        patches = x.reshape(batch, self.n_bands, self.band_width, n_patches, self.stride)
        patches = patches.permute(0, 3, 1, 2, 4).reshape(batch, n_patches, self.n_bands, self.band_width * self.stride)
        embedded = torch.stack([embed(patches[:, :, b]) for b, embed in enumerate(self.patch_embed)], dim=2)
        tokens = embedded + self.band_embedding + self.time_embedding[:n_patches].unsqueeze(1)
        sequence = tokens.reshape(batch, n_patches * self.n_bands, -1)
        for block in self.blocks:
            sequence = block(sequence)
        tokens = sequence.reshape(batch, n_patches, self.n_bands, -1)
        return tokens[0] if squeeze else tokens


class FreqAttentionPool(nn.Module):
    """Attention pooling over frequency bands with a learnable query."""

    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(width, dtype=numgrad.DTYPE))
        self.attn = MultiHeadAttention(width, n_heads)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """[..., n_bands, d] -> [..., d]"""
        query = self.query.expand(tokens.shape[:-2] + (1, tokens.shape[-1]))
        return self.attn(query, tokens).squeeze(-2)


class DualBranchEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.conv = ConvBranch(config)
        self.transformer = TransformerBranch(config)
        self.pool = FreqAttentionPool(config.d_model, config.n_heads)
        self.proj_conv = nn.Linear(self.conv.out_width, config.embed_dim, dtype=numgrad.DTYPE)
        self.proj_transformer = nn.Linear(config.d_model, config.embed_dim, dtype=numgrad.DTYPE)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def conv_branch(self, features: torch.Tensor) -> torch.Tensor:
        return self.conv(features)

    def transformer_branch(self, features: torch.Tensor) -> torch.Tensor:
        return self.transformer(features)

    def freq_attention_pool(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.pool(tokens)

    def _restore_time(self, pooled: torch.Tensor, n_frames: int) -> torch.Tensor:
        return numgrad.upsample_linear(pooled, self.config.time_downsample)[..., :n_frames, :]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """
        Latent sequence for a clip or batch.

        Args:
            features (torch.Tensor): [F, T] or [B, F, T]

        Returns:
            torch.Tensor: [T, D] or [B, T, D]
        """
        n_frames = features.shape[-1]
        conv_out = self.conv_branch(features)
        pooled = self.freq_attention_pool(self.transformer_branch(features))
        restored = self._restore_time(pooled, n_frames)
        return self.proj_conv(conv_out) + self.proj_transformer(restored)

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        return self.forward(features)

    def initial_embeddings(self, features: torch.Tensor) -> torch.Tensor:
        """Transformer tokens averaged over bands and upsampled; no conv branch, no learned pooling."""
        tokens = self.transformer_branch(features)
        return self._restore_time(tokens.mean(dim=-2), features.shape[-1])

    def transformer_parameters(self) -> List[nn.Parameter]:
        return list(self.transformer.parameters())

    def conv_parameters(self) -> List[nn.Parameter]:
        return list(self.conv.parameters())
