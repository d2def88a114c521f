"""
Semi-supervised fine-tuning with a mean teacher.

The predictor is replaced by a sigmoid classifier head; strong clips get a
frame-level BCE, weak clips a clip-level BCE on max-pooled probabilities,
and every clip a consistency term against an EMA copy of the student.
"""

import copy
import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from utils import numgrad
from utils.checkpoint import Checkpoint, submodule_state
from utils.data_loader import DataLoader
from utils.encoder import DualBranchEncoder
from utils.errors import ContractError, DataError, LoadError, NumericalError, ParameterError
from utils.mam import ContextNetwork
from utils.run_config import ContextConfig, EncoderConfig, EvalConfig, FinetuneConfig, config_from_dict
from utils.seeding import substream, torch_generator

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
METRICS_COLUMNS = ["epoch", "sup_loss", "cons_loss", "val_frame_f1", "val_event_f1"]


class ClassifierHead(nn.Module):
    """Fully connected layer + sigmoid, one output per category."""

    def __init__(self, width: int, n_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(width, n_classes, dtype=numgrad.DTYPE))
        self.bias = nn.Parameter(torch.zeros(n_classes, dtype=numgrad.DTYPE))

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        return numgrad.sigmoid(context @ self.weight + self.bias)


class SedModel(nn.Module):
    """Pretrained encoder and context network topped by the classifier head."""

    def __init__(self, encoder_config: EncoderConfig, context_config: ContextConfig, n_classes: int):
        super().__init__()
        width = encoder_config.embed_dim
        self.encoder = DualBranchEncoder(encoder_config)
        self.context = ContextNetwork(width, context_config, encoder_config.leaky_slope)
        self.head = ClassifierHead(width, n_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Frame probabilities [T, C] or [B, T, C]."""
        return self.head(self.context(self.encoder(features)))

    def head_parameters(self) -> List[nn.Parameter]:
        return list(self.head.parameters())

    def body_parameters(self) -> List[nn.Parameter]:
        head = {id(p) for p in self.head.parameters()}
        return [p for p in self.parameters() if id(p) not in head]

    def parameter_groups(self, lr: float, lr_transformer: float) -> List[dict]:
        transformer = {id(p) for p in self.encoder.transformer_parameters()}
        return [
            {"params": self.encoder.transformer_parameters(), "lr": lr_transformer, "name": "transformer"},
            {"params": [p for p in self.parameters() if id(p) not in transformer], "lr": lr, "name": "rest"},
        ]


def init_head(head: ClassifierHead, generator: torch.Generator, scale: float) -> None:
    with torch.no_grad():
        head.weight.copy_((torch.rand(head.weight.shape, generator=generator, dtype=numgrad.DTYPE) * 2 - 1) * scale)
        head.bias.zero_()


def attach_classifier(
    checkpoint: Checkpoint,
    n_classes: int,
    seed: int,
    head_init_scale: float = 0.01,
    zero_init: bool = False,
) -> SedModel:
    """
    Build the detection model from a pretrained checkpoint.

    The predictor (and mask token) are dropped; encoder and context weights
    are loaded as-is and the head gets small uniform weights from the
    ``head`` stream.

    Args:
        checkpoint (Checkpoint): Stage ``iter<N>`` (0 = untrained encoder)
        n_classes (int): Category count of the dataset
        seed (int): Master seed
        head_init_scale (float): Half-width of the uniform head init
        zero_init (bool): All-zero head (every probability 0.5)

    Returns:
        SedModel: Model ready for fine-tuning
    """
    config = config_from_dict(checkpoint.config)
    model = SedModel(config.encoder, config.context, n_classes)
    for name in ("encoder", "context"):
        state = submodule_state(checkpoint.model_state, name)
        try:
            getattr(model, name).load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise LoadError(f"Checkpoint {name} weights do not fit the configured model: {e}") from e
    if zero_init:
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
    else:
        init_head(model.head, torch_generator(seed, "head"), head_init_scale)
    logger.info(f"Classifier head attached: {config.encoder.embed_dim} -> {n_classes} categories")
    return model


class MeanTeacher:
    """EMA copy of the student; only ema_update writes to it."""

    def __init__(self, student: nn.Module, ema_decay: float):
        if not 0 <= ema_decay <= 1:
            raise ParameterError(f"ema decay must be in [0, 1], got {ema_decay}")
        self.model = copy.deepcopy(student)
        for param in self.model.parameters():
            param.requires_grad_(False)
        self.ema_decay = ema_decay

    def __call__(self, features: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model(features)


def ema_update(teacher: MeanTeacher, student: nn.Module, alpha: Optional[float] = None) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    alpha = teacher.ema_decay if alpha is None else alpha
    if not 0 <= alpha <= 1:
        raise ParameterError(f"ema decay must be in [0, 1], got {alpha}")
    with torch.no_grad():
        for t_param, s_param in zip(teacher.model.parameters(), student.parameters()):
            if t_param.shape != s_param.shape:
                raise ContractError(f"Teacher/student shape mismatch {tuple(t_param.shape)} vs {tuple(s_param.shape)}")
            t_param.mul_(alpha).add_(s_param.detach(), alpha=1.0 - alpha)


def state_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _bce(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    p = torch.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -targets * torch.log(p) - (1.0 - targets) * torch.log(1.0 - p)


def clip_probabilities(frame_probs: torch.Tensor) -> torch.Tensor:
    """Per-category max over frames: [..., T, C] -> [..., C]."""
    return frame_probs.max(dim=-2).values


def supervised_loss(
    frame_probs: torch.Tensor,
    strong_labels: Optional[torch.Tensor] = None,
    weak_labels: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Mean BCE against strong frame labels or weak clip labels.

    Args:
        frame_probs (torch.Tensor): [..., T, C] frame probabilities
        strong_labels (torch.Tensor, optional): [..., T, C] binary frame labels
        weak_labels (torch.Tensor, optional): [..., C] binary clip labels

    Returns:
        torch.Tensor: Scalar mean over every (frame,) category term
    """
    if (strong_labels is None) == (weak_labels is None):
        raise ContractError("Pass exactly one of strong_labels or weak_labels")
    if strong_labels is not None:
        if strong_labels.shape != frame_probs.shape:
            raise DataError(f"Strong labels {tuple(strong_labels.shape)} do not match predictions {tuple(frame_probs.shape)}")
        return _bce(frame_probs, strong_labels).mean()
    clip_probs = clip_probabilities(frame_probs)
    if weak_labels.shape != clip_probs.shape:
        raise DataError(f"Weak labels {tuple(weak_labels.shape)} do not match categories {tuple(clip_probs.shape)}")
    return _bce(clip_probs, weak_labels).mean()


def consistency_loss(student_probs: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """MSE between student and (gradient-free) teacher frame probabilities."""
    if student_probs.shape != teacher_probs.shape:
        raise ContractError(
            f"Consistency inputs disagree: {tuple(student_probs.shape)} vs {tuple(teacher_probs.shape)}"
        )
    return ((student_probs - teacher_probs.detach()) ** 2).mean()


def consistency_weight(epoch: int, max_weight: float, rampup_epochs: int) -> float:
    if rampup_epochs <= 0:
        return max_weight
    return max_weight * min(1.0, epoch / rampup_epochs)


def set_body_trainable(model: SedModel, trainable: bool) -> None:
    for param in model.body_parameters():
        param.requires_grad_(trainable)


@dataclass
class FinetuneResult:
    model: SedModel
    history: pd.DataFrame
    best_epoch: int
    best_frame_f1: float


def predict_probabilities(model: nn.Module, features: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Frame probabilities [B, T, C] without gradient tracking."""
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(features), batch_size):
            outputs.append(model(numgrad.as_node(features[start:start + batch_size])).numpy())
    return np.concatenate(outputs, axis=0) if outputs else np.zeros((0,))


def finetune(
    model: SedModel,
    data: DataLoader,
    config: FinetuneConfig,
    eval_config: EvalConfig,
    seed: int,
    evaluate_fn: Callable[[nn.Module], Dict[str, float]],
    log_path: Optional[str] = None,
) -> FinetuneResult:
    """
    Mean-teacher fine-tuning.

    For the first ``freeze_epochs`` only the head is trainable. Each step adds
    the supervised loss of the batch's labeled clips and the ramped consistency
    loss; the teacher is EMA-updated after every optimizer step. The model
    with the best validation frame F1 is returned.

    Args:
        model (SedModel): Student, trained in place
        data (DataLoader): Dataset with strong, weak and unlabeled splits
        config (FinetuneConfig): Stage settings
        eval_config (EvalConfig): Post-processing used by ``evaluate_fn``
        seed (int): Master seed (shuffle stream)
        evaluate_fn: Returns {"frame_f1", "event_f1"} for a model on validation
        log_path (str, optional): Metrics CSV destination

    Returns:
        FinetuneResult: Best model, per-epoch metrics and best epoch
    """
    strong_ids = list(data.manifest.strong_clips)
    weak_ids = list(data.manifest.weak_clips)
    if not strong_ids and not weak_ids:
        raise DataError("Fine-tuning needs at least one strong or weak clip")
    train_ids = data.training_ids()
    strong_set = set(strong_ids)

    optimizer = numgrad.make_adamw(
        model.parameter_groups(config.lr, config.lr_transformer), weight_decay=config.weight_decay
    )
    teacher = MeanTeacher(model, config.ema_decay) if config.use_teacher else None

    rows = []
    best_f1, best_epoch, best_state = -1.0, -1, None
    for epoch in range(config.epochs):
        set_body_trainable(model, epoch >= config.freeze_epochs)
        weight = consistency_weight(epoch, config.consistency_max, config.rampup_epochs)
        order = substream(seed, "finetune", epoch).permutation(len(train_ids))
        sup_total, cons_total, steps = 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            model.train()
            batch_ids = [train_ids[int(i)] for i in order[start:start + config.batch_size]]
            features = numgrad.as_node(data.features(batch_ids))
            probs = model(features)

            sup_terms = []
            strong_rows = [i for i, cid in enumerate(batch_ids) if cid in strong_set]
            if strong_rows:
                labels = numgrad.as_node(np.stack([data.clip(batch_ids[i]).label_matrix.T for i in strong_rows]))
                sup_terms.append(supervised_loss(probs[strong_rows], strong_labels=labels))
            weak_rows = [i for i, cid in enumerate(batch_ids) if data.weak_vector(cid) is not None]
            if weak_rows:
                labels = numgrad.as_node(np.stack([data.weak_vector(batch_ids[i]) for i in weak_rows]))
                sup_terms.append(supervised_loss(probs[weak_rows], weak_labels=labels))
            sup_loss = torch.stack(sup_terms).sum() if sup_terms else torch.zeros((), dtype=numgrad.DTYPE)

            cons_loss = torch.zeros((), dtype=numgrad.DTYPE)
            if teacher is not None:
                rows_for_cons = list(range(len(batch_ids)))
                if not config.consistency_on_labeled:
                    rows_for_cons = [i for i in rows_for_cons if i not in strong_rows and i not in weak_rows]
                if rows_for_cons:
                    teacher_probs = teacher(features[rows_for_cons])
                    cons_loss = consistency_loss(probs[rows_for_cons], teacher_probs)

            loss = sup_loss + weight * cons_loss
            if not torch.isfinite(loss):
                raise NumericalError(f"Non-finite fine-tuning loss at epoch {epoch}")
            if loss.requires_grad:
                numgrad.zero_grad(model.parameters())
                numgrad.backward(loss)
                numgrad.adamw_step(optimizer)
            if teacher is not None:
                ema_update(teacher, model)
            sup_total += sup_loss.detach().item()
            cons_total += cons_loss.detach().item()
            steps += 1

        metrics = evaluate_fn(model)
        if teacher is not None and config.eval_teacher:
            teacher_metrics = evaluate_fn(teacher.model)
            if teacher_metrics["frame_f1"] > metrics["frame_f1"]:
                metrics = teacher_metrics
                candidate = teacher.model
            else:
                candidate = model
        else:
            candidate = model
        row = {
            "epoch": epoch,
            "sup_loss": sup_total / max(steps, 1),
            "cons_loss": cons_total / max(steps, 1),
            "val_frame_f1": metrics["frame_f1"],
            "val_event_f1": metrics["event_f1"],
        }
        rows.append(row)
        logger.info(
            f"Finetune epoch {epoch}: sup_loss {row['sup_loss']:.5f}, cons_loss {row['cons_loss']:.6f} "
            f"(weight {weight:.3f}), val frame F1 {row['val_frame_f1']:.4f}, val event F1 {row['val_event_f1']:.4f}"
        )
        if metrics["frame_f1"] >= best_f1:
            best_f1, best_epoch = metrics["frame_f1"], epoch
            best_state = copy.deepcopy(candidate.state_dict())

    set_body_trainable(model, True)
    if best_state is not None:
        model.load_state_dict(best_state)
    history = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    if log_path is not None:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        history.to_csv(log_path, index=False)
    return FinetuneResult(model=model, history=history, best_epoch=best_epoch, best_frame_f1=best_f1)
