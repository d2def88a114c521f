"""
Orchestration of the lab's subcommands.

Output layout under the run directory:

    data/                  manifest.yaml, clips/
    pretrain/iter<N>/      checkpoint.safetensors, prototypes.bin, pseudo_labels/, train_log.csv
    finetune/              checkpoint.safetensors, metrics.csv
    evaluate/              metrics.txt, metrics.csv, raw_probs.npz
    analyze/               correlation*.csv, permutation.csv, prototypes_above.yaml, timelines/
    experiment/            data/, cells/, cells.csv, results.csv
"""

import copy
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import yaml
from joblib import Parallel, delayed

from constants.config import CHECKPOINT_NAME, MANIFEST_NAME
from utils import numgrad
from utils.checkpoint import (
    FINETUNED_STAGE,
    Checkpoint,
    capture_rng_state,
    iteration_stage,
    load_checkpoint,
    save_checkpoint,
)
from utils.data_loader import DataLoader
from utils.env_loader import default_out_dir
from utils.errors import DataError, LoadError
from utils.evalkit import (
    detection_metrics,
    export_timeline,
    point_biserial_matrix,
    prototypes_above,
    reorder_prototypes,
    save_correlation_matrix,
    write_metrics_report,
)
from utils.finetune import FinetuneResult, SedModel, attach_classifier, finetune, predict_probabilities
from utils.layers import init_parameters
from utils.mam import MaskedAudioModel, Predictor, pretrain
from utils.proto import build_pseudo_labels, load_pseudo_labels
from utils.run_config import RunConfig, config_from_dict, config_to_dict, save_effective_config
from utils.seeding import substream, torch_generator
from utils.synthgen import DatasetManifest, build_dataset, polyphony_fraction

logger = logging.getLogger(__name__)

# The condition every ablation is compared against.
FULL_CONDITION = ("gmm", "prototype_bce", True)
CELL_COLUMNS = ["seed", "iteration", "proto", "loss", "mask", "frame_f1", "event_f1", "status"]
RESULT_COLUMNS = ["table", "condition", "iteration", "proto", "loss", "mask", "frame_f1", "event_f1", "n_seeds"]


@dataclass
class RunPaths:
    root: str
    data_override: Optional[str] = None

    @property
    def data(self) -> str:
        return self.data_override or os.path.join(self.root, "data")

    def pretrain(self, iteration: int) -> str:
        return os.path.join(self.root, "pretrain", iteration_stage(iteration))

    @property
    def finetune(self) -> str:
        return os.path.join(self.root, "finetune")

    @property
    def evaluate(self) -> str:
        return os.path.join(self.root, "evaluate")

    @property
    def analyze(self) -> str:
        return os.path.join(self.root, "analyze")

    @property
    def experiment(self) -> str:
        return os.path.join(self.root, "experiment")


def resolve_out_dir(config: RunConfig) -> str:
    return config.out_dir or default_out_dir()


def run_paths(config: RunConfig) -> RunPaths:
    paths = RunPaths(resolve_out_dir(config))
    save_effective_config(config, paths.root)
    return paths


def _open_dataset(paths: RunPaths, config: RunConfig) -> DataLoader:
    if not os.path.exists(os.path.join(paths.data, MANIFEST_NAME)):
        raise DataError(f"No dataset in {paths.data}; run gen-data first")
    data = DataLoader(paths.data)
    if data.n_freq != config.encoder.n_freq:
        raise DataError(f"Dataset has {data.n_freq} frequency bins, encoder expects {config.encoder.n_freq}")
    return data


# gen-data


def cmd_gen_data(config: RunConfig, paths: Optional[RunPaths] = None) -> DatasetManifest:
    """Generate the synthetic dataset and log its summary."""
    paths = paths or run_paths(config)
    manifest = build_dataset(config.data, config.data_seed, paths.data)
    data = DataLoader(paths.data)
    poly = polyphony_fraction(data.split("strong") + data.split("validation"))
    logger.info(
        f"Dataset summary: {config.data.n_classes} categories, {config.data.n_freq}x{config.data.n_frames} features, "
        f"polyphonic frame fraction {poly:.3f} (annotated splits)"
    )
    return manifest


# pretrain


def build_masked_model(config: RunConfig, predictor_dim: Optional[int] = None) -> MaskedAudioModel:
    model = MaskedAudioModel(config.encoder, config.context, predictor_dim)
    init_parameters(model, torch_generator(config.seed, "init"))
    return model


def _match_predictor(model: MaskedAudioModel, dim: int, seed: int, iteration: int) -> None:
    """Rebuild the predictor when the prototype space changes width."""
    if model.predictor.linear.out_features == dim:
        return
    logger.warning(
        f"Prototype width {dim} differs from predictor width {model.predictor.linear.out_features}; "
        f"rebuilding the predictor for iteration {iteration}"
    )
    model.predictor = Predictor(model.predictor.linear.in_features, dim)
    init_parameters(model.predictor, torch_generator(seed, "init", iteration))


def _embed_fn(model: MaskedAudioModel, initial: bool):
    def embed(features: np.ndarray) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            node = numgrad.as_node(features)
            out = model.encoder.initial_embeddings(node) if initial else model.encoder(node)
        return out.numpy()

    return embed


def _save_stage(path: str, stage: str, model: torch.nn.Module, config: RunConfig,
                optimizer: Optional[torch.optim.Optimizer] = None, counters: Optional[Dict[str, int]] = None,
                extra: Optional[Dict[str, object]] = None) -> None:
    save_checkpoint(
        path,
        Checkpoint(
            stage=stage,
            model_state=model.state_dict(),
            config=config_to_dict(config),
            optimizer_state=optimizer.state_dict() if optimizer is not None else None,
            rng_state=capture_rng_state(config.seed, **(counters or {})),
            extra=extra or {},
        ),
    )


def cmd_pretrain(config: RunConfig, paths: Optional[RunPaths] = None) -> List[str]:
    """
    Iterative E/M pretraining.

    Writes the untrained ``iter0`` checkpoint, then for every iteration fits
    the prototype model on the current embeddings (the initial embeddings on
    iteration 1), writes the pseudo labels and trains the masked model.

    Returns:
        list: Checkpoint paths, iter0 first
    """
    paths = paths or run_paths(config)
    data = _open_dataset(paths, config)
    model = build_masked_model(config)
    written = [os.path.join(paths.pretrain(0), CHECKPOINT_NAME)]
    _save_stage(written[0], iteration_stage(0), model, config, counters={"iteration": 0})

    clips = [(clip_id, data.clip(clip_id).features) for clip_id in data.training_ids()]
    if not clips:
        raise DataError("Pretraining needs at least one training clip")
    previous_means = None
    for iteration in range(1, config.pretrain.iterations + 1):
        out_dir = paths.pretrain(iteration)
        initial = iteration == 1
        init_means = None
        if config.proto.warm_start and previous_means is not None:
            init_means = previous_means
        labels, prototypes = build_pseudo_labels(
            clips,
            _embed_fn(model, initial),
            config.proto.kind,
            config.proto.n_prototypes,
            substream(config.seed, "proto", iteration),
            out_dir=out_dir,
            max_fit_frames=config.proto.max_fit_frames,
            max_iters=config.proto.max_iters,
            tol=config.proto.tol,
            variance_floor=config.proto.variance_floor,
            init_means=init_means,
        )
        _match_predictor(model, prototypes.dim, config.seed, iteration)
        optimizer = numgrad.make_adamw(
            model.parameter_groups(config.pretrain.lr, config.pretrain.lr_transformer, config.pretrain.freeze_cnn),
            betas=(config.pretrain.beta1, config.pretrain.beta2),
            eps=config.pretrain.eps,
            weight_decay=config.pretrain.weight_decay,
        )
        pretrain(
            model,
            clips,
            {clip_id: matrix.gamma for clip_id, matrix in labels.items()},
            prototypes.means,
            optimizer,
            config.pretrain,
            config.mask,
            config.loss,
            config.seed,
            iteration=iteration,
            log_path=os.path.join(out_dir, "train_log.csv"),
        )
        path = os.path.join(out_dir, CHECKPOINT_NAME)
        _save_stage(path, iteration_stage(iteration), model, config, optimizer,
                    counters={"iteration": iteration, "epoch": config.pretrain.epochs})
        written.append(path)
        if prototypes.dim == config.encoder.embed_dim:
            previous_means = prototypes.means
    return written


# finetune / evaluate


def _annotated(data: DataLoader, split: str) -> Tuple[List[str], np.ndarray, np.ndarray]:
    clips = data.split(split)
    if any(clip.label_matrix is None for clip in clips):
        raise DataError(f"Split '{split}' has no frame annotations")
    ids = [clip.clip_id for clip in clips]
    features = np.stack([clip.features for clip in clips]) if clips else np.zeros((0, data.n_freq, data.n_frames))
    truth = np.stack([clip.label_matrix.T for clip in clips]) if clips else np.zeros((0, data.n_frames, data.n_classes))
    return ids, features, truth


def score_model(model: torch.nn.Module, features: np.ndarray, truth: np.ndarray, config: RunConfig,
                median: Optional[bool] = None, window: Optional[int] = None) -> Dict[str, object]:
    if len(features) == 0:
        return {"frame_macro_f1": 0.0, "event_f1": 0.0, "per_category_f1": []}
    probs = predict_probabilities(model, features)
    return detection_metrics(
        probs,
        truth,
        threshold=config.eval.threshold,
        median=config.eval.median_filter if median is None else median,
        window=config.eval.median_window if window is None else window,
        rho=config.eval.rho,
    )


def _default_pretrained(paths: RunPaths, config: RunConfig) -> str:
    return os.path.join(paths.pretrain(config.pretrain.iterations), CHECKPOINT_NAME)


def cmd_finetune(config: RunConfig, checkpoint_path: Optional[str] = None,
                 paths: Optional[RunPaths] = None) -> FinetuneResult:
    """Attach the classifier to a pretrained checkpoint and run mean-teacher fine-tuning."""
    paths = paths or run_paths(config)
    data = _open_dataset(paths, config)
    source = load_checkpoint(checkpoint_path or _default_pretrained(paths, config))
    if source.stage == FINETUNED_STAGE:
        raise LoadError("Fine-tuning starts from a pretraining checkpoint, got a fine-tuned one")
    model = attach_classifier(source, data.n_classes, config.seed, config.finetune.head_init_scale)
    _, val_features, val_truth = _annotated(data, "validation")
    if len(val_features) == 0:
        logger.warning("No validation clips; model selection keeps the last epoch")

    def evaluate(candidate: torch.nn.Module) -> Dict[str, float]:
        metrics = score_model(candidate, val_features, val_truth, config)
        return {"frame_f1": metrics["frame_macro_f1"], "event_f1": metrics["event_f1"]}

    result = finetune(
        model,
        data,
        config.finetune,
        config.eval,
        config.seed,
        evaluate,
        log_path=os.path.join(paths.finetune, "metrics.csv"),
    )
    _save_stage(
        os.path.join(paths.finetune, CHECKPOINT_NAME),
        FINETUNED_STAGE,
        result.model,
        config,
        counters={"epoch": config.finetune.epochs},
        extra={"n_classes": data.n_classes, "best_epoch": result.best_epoch, "source_stage": source.stage},
    )
    return result


def load_sed_model(path: str) -> SedModel:
    checkpoint = load_checkpoint(path, expected_stage=FINETUNED_STAGE)
    config = config_from_dict(checkpoint.config)
    model = SedModel(config.encoder, config.context, int(checkpoint.extra["n_classes"]))
    try:
        model.load_state_dict(checkpoint.model_state, strict=True)
    except RuntimeError as e:
        raise LoadError(f"Checkpoint {path} does not fit its own configuration: {e}") from e
    return model


def cmd_evaluate(config: RunConfig, checkpoint_path: Optional[str] = None, split: str = "validation",
                 median: Optional[bool] = None, window: Optional[int] = None,
                 paths: Optional[RunPaths] = None) -> Dict[str, object]:
    """
    Score a fine-tuned model on an annotated split.

    Raw probabilities are dumped before post-processing, so toggling the
    median filter changes only the metrics.
    """
    paths = paths or run_paths(config)
    data = _open_dataset(paths, config)
    model = load_sed_model(checkpoint_path or os.path.join(paths.finetune, CHECKPOINT_NAME))
    ids, features, truth = _annotated(data, split)
    if not ids:
        raise DataError(f"Split '{split}' is empty")
    probs = predict_probabilities(model, features)
    os.makedirs(paths.evaluate, exist_ok=True)
    np.savez(os.path.join(paths.evaluate, "raw_probs.npz"), probs=probs, clip_ids=np.array(ids))
    metrics = detection_metrics(
        probs,
        truth,
        threshold=config.eval.threshold,
        median=config.eval.median_filter if median is None else median,
        window=config.eval.median_window if window is None else window,
        rho=config.eval.rho,
    )
    report = {"split": split, "n_clips": len(ids), **metrics}
    write_metrics_report(paths.evaluate, report)
    logger.info(
        f"Evaluation on {split} ({len(ids)} clips): frame macro-F1 {metrics['frame_macro_f1']:.4f}, "
        f"event F1 {metrics['event_f1']:.4f}"
    )
    return report


# analyze


def cmd_analyze(config: RunConfig, iteration: Optional[int] = None, paths: Optional[RunPaths] = None):
    """
    Correlate an iteration's pseudo labels with the strong annotations.

    Returns:
        (CorrelationMatrix, CorrelationMatrix, np.ndarray): raw matrix, reordered matrix, permutation
    """
    paths = paths or run_paths(config)
    data = _open_dataset(paths, config)
    iteration = config.pretrain.iterations if iteration is None else iteration
    if iteration < 1:
        raise DataError("Pseudo labels exist from iteration 1 onwards")
    clips = data.split("strong")
    if not clips:
        raise DataError("Analysis needs strongly annotated clips")
    labels = load_pseudo_labels(paths.pretrain(iteration), [clip.clip_id for clip in clips])
    pseudo = np.concatenate([labels[clip.clip_id].gamma for clip in clips], axis=0)
    truth = np.concatenate([clip.label_matrix.T for clip in clips], axis=0)

    matrix = point_biserial_matrix(pseudo, truth, include_none=True)
    if matrix.zero_variance.any():
        logger.warning(f"{int(matrix.zero_variance.sum())} correlation entries undefined (zero variance), reported as 0")
    reordered, permutation = reorder_prototypes(matrix)

    out = paths.analyze
    os.makedirs(os.path.join(out, "timelines"), exist_ok=True)
    save_correlation_matrix(os.path.join(out, "correlation.csv"), matrix)
    save_correlation_matrix(os.path.join(out, "correlation_reordered.csv"), reordered)
    pd.DataFrame({"position": np.arange(len(permutation)), "prototype": permutation}).to_csv(
        os.path.join(out, "permutation.csv"), index=False
    )
    above = prototypes_above(matrix, config.eval.correlation_threshold)
    with open(os.path.join(out, "prototypes_above.yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump({"threshold": config.eval.correlation_threshold, "prototypes": above}, f, sort_keys=False)
    for label, protos in above.items():
        logger.info(f"{label}: prototypes {protos} at r >= {config.eval.correlation_threshold}")

    for clip in clips[: config.eval.n_timelines]:
        export_timeline(
            os.path.join(out, "timelines", f"{clip.clip_id}.csv"), labels[clip.clip_id].gamma, clip.label_matrix.T
        )
    return matrix, reordered, permutation


# experiment


def _mask_tag(mask: Optional[bool]) -> str:
    if mask is None:
        return "-"
    return "on" if mask else "off"


def _cell_config(config: RunConfig, seed: int, root: str, proto: str, loss: str, mask: bool,
                 iterations: int) -> RunConfig:
    values = config_to_dict(config)
    values["seed"] = seed
    values["out_dir"] = root
    values["data"]["seed"] = config.data_seed
    values["proto"]["kind"] = proto
    values["loss"]["loss_kind"] = loss
    values["mask"]["enabled"] = mask
    values["pretrain"]["iterations"] = iterations
    return config_from_dict(values)


def _run_cell(config_values: dict, data_dir: str, seed: int, condition: Optional[Tuple[str, str, bool]],
              iterations: List[int]) -> List[dict]:
    """
    One pretraining run per (seed, condition), fine-tuned from each requested iteration.

    ``condition`` None is the iter0 baseline: fine-tuning only.
    """
    config = config_from_dict(copy.deepcopy(config_values))
    proto, loss, mask = condition or FULL_CONDITION
    name = f"s{seed}_" + ("iter0" if condition is None else f"{proto}_{loss}_{_mask_tag(mask)}")
    root = os.path.join(resolve_out_dir(config), "experiment", "cells", name)
    wanted = [0] if condition is None else [i for i in iterations if i > 0]
    rows = []
    try:
        cell = _cell_config(config, seed, root, proto, loss, mask, 0 if condition is None else max(wanted))
        paths = RunPaths(root, data_override=data_dir)
        save_effective_config(cell, root)
        checkpoints = cmd_pretrain(cell, paths)
        _, features, truth = _annotated(DataLoader(data_dir), "validation")
        for iteration in wanted:
            fine_paths = RunPaths(os.path.join(root, iteration_stage(iteration)), data_override=data_dir)
            result = cmd_finetune(cell, checkpoints[iteration], paths=fine_paths)
            metrics = score_model(result.model, features, truth, cell)
            rows.append({
                "seed": seed, "iteration": iteration, "proto": proto if condition else "-",
                "loss": loss if condition else "-", "mask": _mask_tag(mask if condition else None),
                "frame_f1": metrics["frame_macro_f1"], "event_f1": metrics["event_f1"], "status": "ok",
            })
    except Exception as e:
        logger.error(f"Experiment cell {name} failed: {e}")
        for iteration in wanted[len(rows):]:
            rows.append({
                "seed": seed, "iteration": iteration, "proto": proto if condition else "-",
                "loss": loss if condition else "-", "mask": _mask_tag(mask if condition else None),
                "frame_f1": np.nan, "event_f1": np.nan, "status": f"failed: {e}",
            })
    return rows


def _table_rows(summary: pd.DataFrame, last_iteration: int) -> pd.DataFrame:
    full = {"proto": FULL_CONDITION[0], "loss": FULL_CONDITION[1], "mask": _mask_tag(FULL_CONDITION[2])}
    ablations = {
        "full": full,
        "no_mask": {**full, "mask": "off"},
        "kmeans": {**full, "proto": "kmeans"},
        "infonce": {**full, "loss": "info_nce"},
    }
    tagged = []
    for _, row in summary.iterrows():
        record = row.to_dict()
        is_full = all(record[k] == v for k, v in full.items())
        if record["iteration"] == 0 or is_full:
            tagged.append({"table": "iterations", "condition": f"PMAM_iter{int(record['iteration'])}", **record})
        if record["iteration"] == last_iteration:
            for label, axes in ablations.items():
                if all(record[k] == v for k, v in axes.items()):
                    tagged.append({"table": "ablation", "condition": label, **record})
        tagged.append({"table": "grid", "condition": f"{record['proto']}/{record['loss']}/mask_{record['mask']}", **record})
    return pd.DataFrame(tagged, columns=RESULT_COLUMNS)


def cmd_experiment(config: RunConfig, paths: Optional[RunPaths] = None) -> pd.DataFrame:
    """
    Iterations x prototype model x loss x mask grid over several seeds.

    The dataset is generated once from the data seed; only the training seed
    varies between repetitions. Per-cell scores go to cells.csv and the
    median over seeds per condition to results.csv.

    Returns:
        pd.DataFrame: The results table
    """
    paths = paths or run_paths(config)
    exp = config.experiment
    out = paths.experiment
    data_dir = os.path.join(out, "data")
    build_dataset(config.data, config.data_seed, data_dir)

    iterations = sorted(set(exp.iterations))
    jobs = []
    for seed in exp.seeds:
        if 0 in iterations:
            jobs.append((seed, None))
        if any(i > 0 for i in iterations):
            for proto in exp.protos:
                for loss in exp.losses:
                    for mask in exp.masks:
                        jobs.append((seed, (proto, loss, bool(mask))))
    logger.info(f"Experiment grid: {len(jobs)} runs over seeds {list(exp.seeds)}, iterations {iterations}")

    values = config_to_dict(config)
    values["out_dir"] = paths.root
    cell_rows = Parallel(n_jobs=exp.n_jobs)(
        delayed(_run_cell)(values, data_dir, seed, condition, iterations) for seed, condition in jobs
    )
    cells = pd.DataFrame([row for rows in cell_rows for row in rows], columns=CELL_COLUMNS)
    os.makedirs(out, exist_ok=True)
    cells.to_csv(os.path.join(out, "cells.csv"), index=False)
    failed = cells[cells["status"] != "ok"]
    if len(failed):
        logger.warning(f"{len(failed)} experiment cells failed; see cells.csv")

    ok = cells[cells["status"] == "ok"]
    summary = (
        ok.groupby(["iteration", "proto", "loss", "mask"], sort=True)
        .agg(frame_f1=("frame_f1", "median"), event_f1=("event_f1", "median"), n_seeds=("seed", "count"))
        .reset_index()
    )
    results = _table_rows(summary, max(iterations) if iterations else 0)
    results.to_csv(os.path.join(out, "results.csv"), index=False)
    for _, row in results[results["table"] != "grid"].iterrows():
        logger.info(f"[{row['table']}] {row['condition']}: frame F1 {row['frame_f1']:.4f}, event F1 {row['event_f1']:.4f}")
    return results
