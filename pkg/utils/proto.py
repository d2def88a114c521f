"""
Prototypical distribution modelling (the E-step).

A diagonal-covariance Gaussian mixture is fitted by EM over pooled frame
embeddings; its per-frame responsibilities are the soft multi-label pseudo
labels. K-means with one-hot labels is kept as the ablation.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from constants.config import (
    PROTOTYPE_MODEL_NAME,
    PSEUDO_LABEL_DIR,
    PSEUDO_LABEL_FORMAT_VERSION,
    PSEUDO_LABEL_MAGIC,
)
from utils.errors import ContractError, DataError, LoadError, PersistenceError
from utils.seeding import child_seed

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PrototypeModel:
    priors: np.ndarray  # K
    means: np.ndarray  # K x D
    variances: np.ndarray  # K x D (diagonal covariances)
    variance_floor: float = 1e-6
    log_likelihood_trace: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        if abs(self.priors.sum() - 1.0) > 1e-9 or (self.priors < 0).any():
            raise ContractError("Prototype priors must be a probability vector")
        if (self.variances < self.variance_floor).any():
            raise ContractError("Prototype variances fell below the floor")


@dataclass
class PseudoLabelMatrix:
    gamma: np.ndarray  # T x K, rows on the simplex

    @property
    def n_frames(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_prototypes(self) -> int:
        return self.gamma.shape[1]


@dataclass
class KMeansModel:
    centroids: np.ndarray  # K x D
    inertia_trace: List[float] = field(default_factory=list)


def log_joint(model: PrototypeModel, embeddings: np.ndarray) -> np.ndarray:
    """log p(theta_k) + log N(z_t | mu_k, Sigma_k) for every frame and component, [N x K]."""
    x = np.asarray(embeddings, dtype=np.float64)
    out = np.empty((x.shape[0], model.n_components))
    for k in range(model.n_components):
        var = model.variances[k]
        maha = (((x - model.means[k]) ** 2) / var).sum(axis=1)
        out[:, k] = np.log(model.priors[k]) - 0.5 * (model.dim * LOG_2PI + np.log(var).sum() + maha)
    return out


def responsibilities(model: PrototypeModel, embeddings: np.ndarray) -> PseudoLabelMatrix:
    joint = log_joint(model, embeddings)
    return PseudoLabelMatrix(np.exp(joint - logsumexp(joint, axis=1, keepdims=True)))


def log_likelihood(model: PrototypeModel, embeddings: np.ndarray) -> float:
    return float(logsumexp(log_joint(model, embeddings), axis=1).sum())


def _check_fit_input(embeddings: np.ndarray, n_components: int) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"Embeddings must be N x D, got shape {x.shape}")
    if x.shape[0] < n_components:
        raise DataError(f"Need at least {n_components} embeddings to fit {n_components} prototypes, got {x.shape[0]}")
    if not np.isfinite(x).all():
        raise DataError("Embeddings contain non-finite values")
    return x


def fit_gmm(
    embeddings: np.ndarray,
    n_components: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
    variance_floor: float = 1e-6,
    init_means: Optional[np.ndarray] = None,
) -> PrototypeModel:
    """
    Fit a diagonal-covariance GMM by EM.

    Args:
        embeddings (np.ndarray): N x D frame embeddings
        n_components (int): K
        rng (np.random.Generator): Source for the k-means++ seeding
        max_iters (int): EM iteration cap
        tol (float): Stop when the relative log-likelihood gain falls below this
        variance_floor (float): Lower bound on every variance
        init_means (np.ndarray, optional): K x D warm-start means (skips seeding)

    Returns:
        PrototypeModel: Fitted model with its log-likelihood trace
    """
    x = _check_fit_input(embeddings, n_components)
    n, dim = x.shape
    if init_means is None:
        means, _ = kmeans_plusplus(x, n_components, random_state=child_seed(rng))
    else:
        means = np.array(init_means, dtype=np.float64)
        if means.shape != (n_components, dim):
            raise DataError(f"Warm-start means have shape {means.shape}, expected {(n_components, dim)}")
    spread = np.maximum(x.var(axis=0), variance_floor)
    model = PrototypeModel(
        priors=np.full(n_components, 1.0 / n_components),
        means=means.astype(np.float64),
        variances=np.tile(spread, (n_components, 1)),
        variance_floor=variance_floor,
    )

    previous = None
    for iteration in range(max_iters):
        # E-step: responsibilities of the current parameters.
        joint = log_joint(model, x)
        norm = logsumexp(joint, axis=1, keepdims=True)
        current = float(norm.sum())
        model.log_likelihood_trace.append(current)
        logger.debug(f"EM iteration {iteration}: log-likelihood {current:.6f}")
        if previous is not None and abs(current - previous) <= tol * abs(previous):
            model.converged = True
            break
        previous = current
        resp = np.exp(joint - norm)

        # M-step: responsibility-weighted priors, means and variances.
        weights = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
        model.priors = weights / weights.sum()
        model.means = (resp.T @ x) / weights[:, None]
        variances = np.empty_like(model.means)
        for k in range(n_components):
            variances[k] = (resp[:, k:k + 1] * (x - model.means[k]) ** 2).sum(axis=0) / weights[k]
        model.variances = np.maximum(variances, variance_floor)
    else:
        model.log_likelihood_trace.append(log_likelihood(model, x))

    logger.info(
        f"GMM fit: K={n_components}, N={n}, D={dim}, {len(model.log_likelihood_trace)} evaluations, "
        f"final log-likelihood {model.log_likelihood_trace[-1]:.4f}, converged={model.converged}"
    )
    return model


def _assign(x: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    distances = np.stack([((x - c) ** 2).sum(axis=1) for c in centroids], axis=1)
    labels = np.argmin(distances, axis=1)  # ties resolve to the lowest index
    return labels, distances[np.arange(x.shape[0]), labels]


def one_hot_labels(centroids: np.ndarray, embeddings: np.ndarray) -> PseudoLabelMatrix:
    labels, _ = _assign(np.asarray(embeddings, dtype=np.float64), centroids)
    gamma = np.zeros((len(labels), centroids.shape[0]))
    gamma[np.arange(len(labels)), labels] = 1.0
    return PseudoLabelMatrix(gamma)


def fit_kmeans(
    embeddings: np.ndarray,
    n_clusters: int,
    rng: np.random.Generator,
    max_iters: int = 100,
) -> Tuple[KMeansModel, PseudoLabelMatrix]:
    """
    Lloyd's algorithm with k-means++ seeding.

    Returns:
        (KMeansModel, PseudoLabelMatrix): Centroids with the per-iteration
        within-cluster sum of squares, and one-hot labels of the inputs
    """
    x = _check_fit_input(embeddings, n_clusters)
    centroids, _ = kmeans_plusplus(x, n_clusters, random_state=child_seed(rng))
    centroids = centroids.astype(np.float64)
    model = KMeansModel(centroids=centroids)
    labels = None
    for _ in range(max_iters):
        new_labels, dist = _assign(x, model.centroids)
        model.inertia_trace.append(float(dist.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        updated = model.centroids.copy()
        taken = set()
        for k in range(n_clusters):
            members = labels == k
            if members.any():
                updated[k] = x[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the worst-served point.
                order = np.argsort(-dist, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                updated[k] = x[pick]
                logger.warning(f"K-means cluster {k} was empty; re-seeded at point {pick}")
        model.centroids = updated
    return model, one_hot_labels(model.centroids, x)


def kmeans_as_prototypes(model: KMeansModel, embeddings: np.ndarray) -> PrototypeModel:
    """Express centroids as a PrototypeModel (cluster shares as priors, unit variances)."""
    gamma = one_hot_labels(model.centroids, embeddings).gamma
    counts = gamma.sum(axis=0)
    return PrototypeModel(
        priors=counts / counts.sum(),
        means=model.centroids.copy(),
        variances=np.ones_like(model.centroids),
        log_likelihood_trace=list(model.inertia_trace),
    )


# Persistence


def write_pseudo_labels(path: str, labels: PseudoLabelMatrix) -> None:
    n_frames, n_protos = labels.gamma.shape
    try:
        with open(path, "wb") as f:
            f.write(PSEUDO_LABEL_MAGIC)
            f.write(np.array([PSEUDO_LABEL_FORMAT_VERSION, n_frames, n_protos], dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(labels.gamma, dtype="<f8").tobytes())
    except OSError as e:
        raise PersistenceError(f"Cannot write pseudo labels {path}: {e}") from e


def read_pseudo_labels(path: str) -> PseudoLabelMatrix:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise PersistenceError(f"Cannot read pseudo labels {path}: {e}") from e
    if raw[: len(PSEUDO_LABEL_MAGIC)] != PSEUDO_LABEL_MAGIC:
        raise LoadError(f"{path} is not a pseudo-label file")
    offset = len(PSEUDO_LABEL_MAGIC)
    version, n_frames, n_protos = np.frombuffer(raw, dtype="<u4", count=3, offset=offset)
    if version != PSEUDO_LABEL_FORMAT_VERSION:
        raise LoadError(f"{path}: pseudo-label version {version}, expected {PSEUDO_LABEL_FORMAT_VERSION}")
    gamma = np.frombuffer(raw, dtype="<f8", count=int(n_frames * n_protos), offset=offset + 12)
    return PseudoLabelMatrix(gamma.reshape(int(n_frames), int(n_protos)).copy())


def write_prototype_model(path: str, model: PrototypeModel) -> None:
    """K and D as u32, then priors, means and variances as little-endian f64 blocks."""
    try:
        with open(path, "wb") as f:
            f.write(np.array([model.n_components, model.dim], dtype="<u4").tobytes())
            for block in (model.priors, model.means, model.variances):
                f.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    except OSError as e:
        raise PersistenceError(f"Cannot write prototype model {path}: {e}") from e


def read_prototype_model(path: str) -> PrototypeModel:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise PersistenceError(f"Cannot read prototype model {path}: {e}") from e
    n_components, dim = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2))
    values = np.frombuffer(raw, dtype="<f8", offset=8)
    if values.size != n_components * (1 + 2 * dim):
        raise LoadError(f"{path}: size does not match K={n_components}, D={dim}")
    priors = values[:n_components].copy()
    means = values[n_components:n_components * (1 + dim)].reshape(n_components, dim).copy()
    variances = values[n_components * (1 + dim):].reshape(n_components, dim).copy()
    return PrototypeModel(priors=priors, means=means, variances=variances,
                          variance_floor=float(min(variances.min(), 1e-6)))


def label_statistics(labels: Dict[str, PseudoLabelMatrix], n_prototypes: int) -> Dict[str, float]:
    gamma = np.concatenate([m.gamma for m in labels.values()], axis=0)
    entropy = -(gamma * np.log(np.clip(gamma, 1e-300, None))).sum(axis=1)
    usage = gamma.mean(axis=0)
    return {
        "mean_max_gamma": float(gamma.max(axis=1).mean()),
        "mean_entropy": float(entropy.mean()),
        "rare_prototypes": int((usage < 1.0 / (10 * n_prototypes)).sum()),
    }


def build_pseudo_labels(
    clips: Sequence[Tuple[str, np.ndarray]],
    embed_fn: Callable[[np.ndarray], np.ndarray],
    kind: str,
    n_prototypes: int,
    rng: np.random.Generator,
    out_dir: Optional[str] = None,
    max_fit_frames: int = 50000,
    max_iters: int = 100,
    tol: float = 1e-6,
    variance_floor: float = 1e-6,
    init_means: Optional[np.ndarray] = None,
) -> Tuple[Dict[str, PseudoLabelMatrix], PrototypeModel]:
    """
    Fit the prototype model on pooled embeddings and label every clip.

    Args:
        clips: (clip_id, features F x T) pairs of the training set
        embed_fn: Maps features to T x D embeddings (initial or current encoder, no masking)
        kind (str): "gmm" or "kmeans"
        n_prototypes (int): K
        rng (np.random.Generator): Subsampling and seeding source
        out_dir (str, optional): Directory for pseudo-label files and prototypes.bin
        max_fit_frames (int): Uniform subsample cap for the fit
        init_means (np.ndarray, optional): Warm-start means for the GMM

    Returns:
        (dict, PrototypeModel): Pseudo labels per clip id and the fitted model
    """
    embeddings = {clip_id: np.asarray(embed_fn(features), dtype=np.float64) for clip_id, features in clips}
    pooled = np.concatenate(list(embeddings.values()), axis=0)
    if pooled.shape[0] > max_fit_frames:
        keep = np.sort(rng.choice(pooled.shape[0], size=max_fit_frames, replace=False))
        pooled = pooled[keep]
    if kind == "gmm":
        model = fit_gmm(pooled, n_prototypes, rng, max_iters=max_iters, tol=tol,
                        variance_floor=variance_floor, init_means=init_means)
        labels = {clip_id: responsibilities(model, z) for clip_id, z in embeddings.items()}
    elif kind == "kmeans":
        kmeans, _ = fit_kmeans(pooled, n_prototypes, rng, max_iters=max_iters)
        model = kmeans_as_prototypes(kmeans, pooled)
        labels = {clip_id: one_hot_labels(kmeans.centroids, z) for clip_id, z in embeddings.items()}
    else:
        raise DataError(f"Unknown prototype model kind '{kind}'")

    stats = label_statistics(labels, n_prototypes)
    logger.info(
        f"Pseudo labels ({kind}, K={n_prototypes}) for {len(labels)} clips: "
        f"mean max-gamma {stats['mean_max_gamma']:.3f}, mean entropy {stats['mean_entropy']:.3f}, "
        f"{stats['rare_prototypes']} rare prototypes"
    )

    if out_dir is not None:
        label_dir = os.path.join(out_dir, PSEUDO_LABEL_DIR)
        os.makedirs(label_dir, exist_ok=True)
        for clip_id, matrix in labels.items():
            write_pseudo_labels(os.path.join(label_dir, f"{clip_id}.psl"), matrix)
        write_prototype_model(os.path.join(out_dir, PROTOTYPE_MODEL_NAME), model)
        logger.info(f"Pseudo labels and prototype model written to {out_dir}")
    return labels, model


def load_pseudo_labels(out_dir: str, clip_ids: Sequence[str]) -> Dict[str, PseudoLabelMatrix]:
    label_dir = os.path.join(out_dir, PSEUDO_LABEL_DIR)
    return {clip_id: read_pseudo_labels(os.path.join(label_dir, f"{clip_id}.psl")) for clip_id in clip_ids}
