"""
Masked audio model (the M-step).

Block-wise time masking, a transformer context network with a learned
relative-position bias, a linear predictor, and the self-supervised
objectives: prototype-wise BCE and the InfoNCE ablation. Prototype means are
constants during this step.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from utils import numgrad
from utils.encoder import DualBranchEncoder
from utils.errors import ContractError, DimensionError, NumericalError, ParameterError
from utils.layers import TransformerBlock
from utils.run_config import ContextConfig, EncoderConfig, MamLossConfig, MaskConfig, PretrainConfig
from utils.seeding import substream

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
TRAIN_LOG_COLUMNS = ["epoch", "split", "loss_sum", "loss_mean", "masked_frames"]


@dataclass
class MaskSpec:
    n_frames: int
    masked_indices: np.ndarray  # sorted, unique
    blocks: List[Tuple[int, int]] = field(default_factory=list)

    def as_bool(self) -> np.ndarray:
        mask = np.zeros(self.n_frames, dtype=bool)
        mask[self.masked_indices] = True
        return mask

    @property
    def fraction(self) -> float:
        return len(self.masked_indices) / self.n_frames

    @classmethod
    def full(cls, n_frames: int) -> "MaskSpec":
        return cls(n_frames, np.arange(n_frames), [(0, n_frames)])


def sample_block_mask(rng: np.random.Generator, n_frames: int, ratio: float, block: int) -> MaskSpec:
    """
    Union of length-``block`` intervals with uniform starts, grown until at
    least ceil(ratio * T) frames are covered. Intervals are clipped at T.
    """
    if not 0 < ratio <= 1:
        raise ParameterError(f"mask ratio must be in (0, 1], got {ratio}")
    if not 1 <= block <= n_frames:
        raise ParameterError(f"mask block must be in [1, {n_frames}], got {block}")
    target = math.ceil(ratio * n_frames - 1e-9)
    covered = np.zeros(n_frames, dtype=bool)
    blocks = []
    while covered.sum() < target:
        start = int(rng.integers(0, n_frames))
        end = min(start + block, n_frames)
        covered[start:end] = True
        blocks.append((start, end))
    return MaskSpec(n_frames, np.flatnonzero(covered), blocks)


def apply_mask(latent: torch.Tensor, mask: np.ndarray, mask_token: torch.Tensor) -> torch.Tensor:
    """
    Replace masked frames with the shared mask token.

    Args:
        latent (torch.Tensor): [T, D] or [B, T, D]
        mask: Boolean [T] / [B, T] array, or a MaskSpec
        mask_token (torch.Tensor): Learnable [D] vector

    Returns:
        torch.Tensor: Latent of the same shape
    """
    if isinstance(mask, MaskSpec):
        if len(mask.masked_indices) and (mask.masked_indices.min() < 0 or mask.masked_indices.max() >= latent.shape[-2]):
            raise ContractError(f"Mask indices out of range for {latent.shape[-2]} frames")
        if mask.n_frames != latent.shape[-2]:
            raise ContractError(f"Mask covers {mask.n_frames} frames, latent has {latent.shape[-2]}")
        mask = mask.as_bool()
    mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))
    if tuple(mask_t.shape) != tuple(latent.shape[:-1]):
        raise ContractError(f"Mask shape {tuple(mask_t.shape)} does not match latent {tuple(latent.shape)}")
    return torch.where(mask_t.unsqueeze(-1), mask_token.expand_as(latent), latent)


class RelativePositionBias(nn.Module):
    """Per-head learned bias b[clip(i - j, -M, M)] added to attention logits."""

    def __init__(self, n_heads: int, max_distance: int):
        super().__init__()
        self.max_distance = max_distance
        self.table = nn.Parameter(torch.zeros(n_heads, 2 * max_distance + 1, dtype=numgrad.DTYPE))

    def forward(self, n_frames: int) -> torch.Tensor:
        positions = torch.arange(n_frames)
        offsets = torch.clamp(positions[:, None] - positions[None, :], -self.max_distance, self.max_distance)
        return self.table[:, offsets + self.max_distance]  # [heads, T, T]


class ContextNetwork(nn.Module):
    def __init__(self, width: int, config: ContextConfig, slope: float = numgrad.DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.blocks = nn.ModuleList(
            [TransformerBlock(width, config.n_heads, config.ff_mult, slope) for _ in range(config.n_blocks)]
        )
        self.rel_bias = nn.ModuleList(
            [RelativePositionBias(config.n_heads, config.max_distance) for _ in range(config.n_blocks)]
        )

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        """[..., T, D] -> context representations [..., T, D]"""
        x = latent
        for block, rel in zip(self.blocks, self.rel_bias):
            x = block(x, bias=rel(x.shape[-2]))
        return x


class Predictor(nn.Module):
    def __init__(self, width: int, out_width: int):
        super().__init__()
        self.linear = nn.Linear(width, out_width, dtype=numgrad.DTYPE)

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        return self.linear(context)


class MaskedAudioModel(nn.Module):
    """Encoder + mask token + context network + predictor."""

    def __init__(self, encoder_config: EncoderConfig, context_config: ContextConfig, predictor_dim: Optional[int] = None):
        super().__init__()
        width = encoder_config.embed_dim
        self.encoder = DualBranchEncoder(encoder_config)
        self.mask_token = nn.Parameter(torch.zeros(width, dtype=numgrad.DTYPE))
        self.context = ContextNetwork(width, context_config, encoder_config.leaky_slope)
        self.predictor = Predictor(width, predictor_dim or width)

    def context_forward(self, masked_latent: torch.Tensor) -> torch.Tensor:
        return self.context(masked_latent)

    def predict(self, context: torch.Tensor) -> torch.Tensor:
        return self.predictor(context)

    def forward(self, features: torch.Tensor, mask: Optional[np.ndarray] = None) -> torch.Tensor:
        latent = self.encoder(features)
        if mask is not None:
            latent = apply_mask(latent, mask, self.mask_token)
        return self.predict(self.context_forward(latent))

    def parameter_groups(self, lr: float, lr_transformer: float, freeze_cnn: bool = False) -> List[dict]:
        transformer = {id(p) for p in self.encoder.transformer_parameters()}
        frozen = {id(p) for p in self.encoder.conv_parameters()} if freeze_cnn else set()
        rest = [p for p in self.parameters() if id(p) not in transformer and id(p) not in frozen]
        return [
            {"params": self.encoder.transformer_parameters(), "lr": lr_transformer, "name": "transformer"},
            {"params": rest, "lr": lr, "name": "rest"},
        ]


def _check_gamma(gamma: torch.Tensor) -> None:
    if (gamma < 0).any() or (gamma > 1).any():
        raise ContractError("Pseudo labels must lie in [0, 1]")


def prototype_probabilities(pred: torch.Tensor, means: torch.Tensor, cfg: MamLossConfig) -> torch.Tensor:
    """p = sigmoid((2 * leaky_relu(cos(c_t, mu_k)) - 1) / tau), clamped away from 0 and 1."""
    sims = numgrad.pairwise_cosine(pred, means)
    p = numgrad.sigmoid((2.0 * numgrad.leaky_relu(sims, cfg.leaky_slope) - 1.0) / cfg.tau)
    return torch.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def prototype_bce_loss(
    pred: torch.Tensor, means: torch.Tensor, gamma: torch.Tensor, cfg: MamLossConfig
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Prototype-wise binary cross-entropy.

    Args:
        pred (torch.Tensor): [..., D] predictions c_t
        means (torch.Tensor): [K, D] prototype means
        gamma (torch.Tensor): [..., K] pseudo labels
        cfg (MamLossConfig): tau and leaky slope

    Returns:
        (torch.Tensor, torch.Tensor): Sum over k of the terms, and the [..., K] terms
    """
    _check_gamma(gamma)
    p = prototype_probabilities(pred, means, cfg)
    terms = -gamma * torch.log(p) - (1.0 - gamma) * torch.log(1.0 - p)
    return terms.sum(dim=-1), terms


def info_nce_loss(pred: torch.Tensor, means: torch.Tensor, gamma: torch.Tensor, cfg: MamLossConfig) -> torch.Tensor:
    """-log softmax_k(sim / tau) at argmax_k gamma (first index on ties); shape [...]."""
    sims = numgrad.pairwise_cosine(pred, means)
    probs = numgrad.softmax(sims, temperature=cfg.tau, dim=-1)
    positive = torch.argmax(gamma, dim=-1, keepdim=True)
    return -torch.log(torch.gather(probs, -1, positive).squeeze(-1))


@dataclass
class MaskedLoss:
    mean: torch.Tensor
    total: torch.Tensor
    masked_frames: int
    n_terms: int


def masked_total_loss(
    predictions: torch.Tensor,
    masks: np.ndarray,
    gamma: torch.Tensor,
    means: torch.Tensor,
    cfg: MamLossConfig,
) -> MaskedLoss:
    """
    Loss summed over masked frames only, per clip then over the batch.

    The mean divides the sum by (masked frames x K) for prototype BCE and by
    masked frames for InfoNCE.

    Args:
        predictions (torch.Tensor): [B, T, D]
        masks (np.ndarray): Boolean [B, T]
        gamma (torch.Tensor): [B, T, K]
        means (torch.Tensor): [K, D]
        cfg (MamLossConfig): Loss settings

    Returns:
        MaskedLoss: mean and raw sum (tensors), masked frame and term counts
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != tuple(predictions.shape[:2]) or tuple(gamma.shape[:2]) != masks.shape:
        raise DimensionError(
            f"Loss inputs disagree: predictions {tuple(predictions.shape)}, masks {masks.shape}, gamma {tuple(gamma.shape)}"
        )
    masked_frames = int(masks.sum())
    if masked_frames == 0:
        raise ContractError("No masked frames in the batch; the masked objective is empty")
    per_clip = []
    for b in range(predictions.shape[0]):
        index = torch.as_tensor(np.flatnonzero(masks[b]))
        if len(index) == 0:
            continue
        pred_b = predictions[b].index_select(0, index)
        gamma_b = gamma[b].index_select(0, index)
        if cfg.loss_kind == "prototype_bce":
            frame_loss, _ = prototype_bce_loss(pred_b, means, gamma_b, cfg)
        elif cfg.loss_kind == "info_nce":
            frame_loss = info_nce_loss(pred_b, means, gamma_b, cfg)
        else:
            raise ParameterError(f"Unknown loss kind '{cfg.loss_kind}'")
        per_clip.append(frame_loss.sum())
    total = torch.stack(per_clip).sum()
    n_terms = masked_frames * (means.shape[0] if cfg.loss_kind == "prototype_bce" else 1)
    return MaskedLoss(mean=total / n_terms, total=total, masked_frames=masked_frames, n_terms=n_terms)


def batch_masks(seed: int, keys: Tuple[int, ...], clip_indices: Sequence[int], n_frames: int, config: MaskConfig) -> np.ndarray:
    """Per-clip-per-epoch masks; all frames when masking is disabled."""
    if not config.enabled:
        return np.ones((len(clip_indices), n_frames), dtype=bool)
    return np.stack(
        [
            sample_block_mask(substream(seed, "mask", *keys, index), n_frames, config.ratio, config.block).as_bool()
            for index in clip_indices
        ]
    )


def pretrain(
    model: MaskedAudioModel,
    clips: Sequence[Tuple[str, np.ndarray]],
    pseudo_labels: Mapping[str, np.ndarray],
    means: np.ndarray,
    optimizer: torch.optim.Optimizer,
    config: PretrainConfig,
    mask_config: MaskConfig,
    loss_config: MamLossConfig,
    seed: int,
    iteration: int = 1,
    log_path: Optional[str] = None,
) -> pd.DataFrame:
    """
    Run the masked-model training loop for ``config.epochs`` epochs.

    Masks are fresh each epoch per clip; with masking disabled the context
    network sees the unmasked latent and every frame is supervised.

    Args:
        model: The model to train in place
        clips: (clip_id, features F x T) training pairs
        pseudo_labels: clip_id -> T x K pseudo-label matrix
        means: K x D prototype means (constant)
        optimizer: AdamW over the model's parameter groups
        config, mask_config, loss_config: Stage settings
        seed (int): Master seed (mask and shuffle streams)
        iteration (int): E/M iteration number, keys the random streams
        log_path (str, optional): CSV training log destination

    Returns:
        pd.DataFrame: One row per epoch (epoch, split, loss_sum, loss_mean, masked_frames)
    """
    means_t = numgrad.as_node(means)
    if means_t.shape[1] != model.predictor.linear.out_features:
        raise DimensionError(
            f"Prototype width {means_t.shape[1]} does not match predictor width {model.predictor.linear.out_features}"
        )
    rows = []
    for epoch in range(config.epochs):
        model.train()
        order = substream(seed, "shuffle", iteration, epoch).permutation(len(clips))
        epoch_sum, epoch_terms, epoch_masked = 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [int(i) for i in order[start:start + config.batch_size]]
            features = numgrad.as_node(np.stack([clips[i][1] for i in batch]))
            gamma = numgrad.as_node(np.stack([pseudo_labels[clips[i][0]] for i in batch]))
            n_frames = features.shape[-1]
            masks = batch_masks(seed, (iteration, epoch), batch, n_frames, mask_config)
            predictions = model(features, masks if mask_config.enabled else None)
            loss = masked_total_loss(predictions, masks, gamma, means_t, loss_config)
            if not torch.isfinite(loss.total):
                raise NumericalError(f"Non-finite pretraining loss at epoch {epoch}")
            numgrad.zero_grad(model.parameters())
            numgrad.backward(loss.mean)
            numgrad.adamw_step(optimizer)
            epoch_sum += loss.total.detach().item()
            epoch_terms += loss.n_terms
            epoch_masked += loss.masked_frames
        mean = epoch_sum / max(epoch_terms, 1)
        rows.append({"epoch": epoch, "split": "train", "loss_sum": epoch_sum, "loss_mean": mean,
                     "masked_frames": epoch_masked})
        logger.info(
            f"Pretrain iter {iteration} epoch {epoch}: loss_sum {epoch_sum:.4f}, loss_mean {mean:.6f}, "
            f"masked_frames {epoch_masked}"
        )
    history = pd.DataFrame(rows, columns=TRAIN_LOG_COLUMNS)
    if log_path is not None:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        history.to_csv(log_path, index=False)
    return history
