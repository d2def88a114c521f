"""
Seeded synthetic polyphonic datasets.

Each category has a spectral signature; an event adds its (jittered)
signature to every frame it covers, so overlapping events sum. Clips are
written in a little-endian binary format with a plain-text event sidecar.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed

from constants.config import CLIP_DIR, CLIP_FORMAT_VERSION, CLIP_MAGIC, MANIFEST_NAME
from utils.errors import ContractError, LoadError, ParameterError, PersistenceError
from utils.run_config import DataConfig
from utils.seeding import substream

logger = logging.getLogger(__name__)

SPLITS = ("strong", "weak", "unlabeled", "validation")


@dataclass(frozen=True)
class EventInstance:
    category: int
    onset_frame: int
    offset_frame: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.onset_frame < self.offset_frame:
            raise ContractError(f"Invalid event interval [{self.onset_frame}, {self.offset_frame})")


@dataclass
class CategoryProfile:
    signature: np.ndarray
    signature_variance: np.ndarray
    duration_range: Tuple[int, int]
    second_signature: Optional[np.ndarray] = None

    def draw_signature(self, rng: np.random.Generator) -> np.ndarray:
        base = self.signature
        if self.second_signature is not None and rng.random() < 0.5:
            base = self.second_signature
        return base + rng.normal(0.0, np.sqrt(self.signature_variance))


@dataclass
class FeatureClip:
    clip_id: str
    features: np.ndarray  # F x T
    events: List[EventInstance] = field(default_factory=list)
    label_matrix: Optional[np.ndarray] = None  # C x T uint8, None when unannotated

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetManifest:
    strong_clips: List[str]
    weak_clips: Dict[str, List[int]]
    unlabeled_clips: List[str]
    validation_clips: List[str]
    config: Dict

    def split_ids(self, split: str) -> List[str]:
        if split == "weak":
            return list(self.weak_clips)
        return list(getattr(self, f"{split}_clips"))


def default_profiles(rng: np.random.Generator, config: DataConfig) -> List[CategoryProfile]:
    """
    Category signatures for the generator.

    Signatures are non-negative random spectra scaled by
    ``signature_scale``; the dual-mode category gets a second, independent one.
    """
    profiles = []
    variance = np.full(config.n_freq, config.jitter_std ** 2)
    for category in range(config.n_classes):
        signature = np.abs(rng.normal(0.0, 1.0, config.n_freq)) * config.signature_scale
        second = None
        if category == config.dual_mode_category:
            second = np.abs(rng.normal(0.0, 1.0, config.n_freq)) * config.signature_scale
        profiles.append(
            CategoryProfile(
                signature=signature,
                signature_variance=variance.copy(),
                duration_range=(config.min_duration, config.max_duration),
                second_signature=second,
            )
        )
    return profiles


def sample_events(
    rng: np.random.Generator,
    n_classes: int,
    n_frames: int,
    mean_events_per_clip: float,
    profiles: Sequence[CategoryProfile],
) -> List[EventInstance]:
    """Poisson event count, uniform categories and onsets, overlaps allowed."""
    if mean_events_per_clip < 0:
        raise ParameterError(f"mean_events_per_clip must be >= 0, got {mean_events_per_clip}")
    events = []
    for _ in range(int(rng.poisson(mean_events_per_clip))):
        category = int(rng.integers(0, n_classes))
        low, high = profiles[category].duration_range
        duration = int(rng.integers(low, high + 1))
        onset = int(rng.integers(0, n_frames))
        events.append(EventInstance(category, onset, min(onset + duration, n_frames)))
    return events


def rasterize(events: Sequence[EventInstance], n_classes: int, n_frames: int) -> np.ndarray:
    labels = np.zeros((n_classes, n_frames), dtype=np.uint8)
    for event in events:
        labels[event.category, event.onset_frame:event.offset_frame] = 1
    return labels


def render_features(
    rng: np.random.Generator,
    events: Sequence[EventInstance],
    profiles: Sequence[CategoryProfile],
    noise_std: float,
    n_freq: int,
    n_frames: int,
    clip_id: str = "",
) -> FeatureClip:
    """
    Compose a clip: sum of active event signatures plus Gaussian background.

    Returns:
        FeatureClip: features (F x T) and the rasterized label matrix
    """
    features = np.zeros((n_freq, n_frames))
    for event in events:
        if event.offset_frame > n_frames:
            raise ContractError(f"Event {event} extends past {n_frames} frames")
        signature = profiles[event.category].draw_signature(rng)
        features[:, event.onset_frame:event.offset_frame] += signature[:, None]
    if noise_std > 0:
        features += rng.normal(0.0, noise_std, size=(n_freq, n_frames))
    labels = rasterize(events, len(profiles), n_frames)
    return FeatureClip(clip_id=clip_id, features=features, events=list(events), label_matrix=labels)


def polyphony_fraction(clips: Sequence[FeatureClip]) -> float:
    """Fraction of frames with two or more active categories."""
    total = sum(clip.n_frames for clip in clips)
    if total == 0:
        return 0.0
    poly = sum(int((clip.label_matrix.sum(axis=0) >= 2).sum()) for clip in clips)
    return poly / total


# Clip file I/O


def write_clip(path: str, clip: FeatureClip, keep_annotations: bool = True) -> None:
    """
    Write a clip file: magic, version, F, T, C (u32), features (f64), labels
    (u8), then the event list. Unannotated clips are written with C = 0.
    """
    n_freq, n_frames = clip.features.shape
    has_labels = keep_annotations and clip.label_matrix is not None
    n_classes = clip.label_matrix.shape[0] if has_labels else 0
    events = clip.events if has_labels else []
    header = np.array([CLIP_FORMAT_VERSION, n_freq, n_frames, n_classes], dtype="<u4")
    event_block = np.array(
        [len(events)] + [v for e in events for v in (e.category, e.onset_frame, e.offset_frame)], dtype="<u4"
    )
    try:
        with open(path, "wb") as f:
            f.write(CLIP_MAGIC)
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(clip.features, dtype="<f8").tobytes())
            if has_labels:
                f.write(np.ascontiguousarray(clip.label_matrix, dtype="u1").tobytes())
            f.write(event_block.tobytes())
    except OSError as e:
        raise PersistenceError(f"Cannot write clip {path}: {e}") from e


def read_clip(path: str) -> FeatureClip:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise PersistenceError(f"Cannot read clip {path}: {e}") from e
    if raw[: len(CLIP_MAGIC)] != CLIP_MAGIC:
        raise LoadError(f"{path} is not a clip file")
    offset = len(CLIP_MAGIC)
    version, n_freq, n_frames, n_classes = np.frombuffer(raw, dtype="<u4", count=4, offset=offset)
    if version != CLIP_FORMAT_VERSION:
        raise LoadError(f"{path}: clip format version {version}, expected {CLIP_FORMAT_VERSION}")
    offset += 16
    features = np.frombuffer(raw, dtype="<f8", count=int(n_freq * n_frames), offset=offset)
    features = features.reshape(int(n_freq), int(n_frames)).astype(np.float64)
    offset += 8 * int(n_freq * n_frames)
    labels = None
    if n_classes:
        labels = np.frombuffer(raw, dtype="u1", count=int(n_classes * n_frames), offset=offset)
        labels = labels.reshape(int(n_classes), int(n_frames)).copy()
        offset += int(n_classes * n_frames)
    (n_events,) = np.frombuffer(raw, dtype="<u4", count=1, offset=offset)
    triples = np.frombuffer(raw, dtype="<u4", count=3 * int(n_events), offset=offset + 4).reshape(-1, 3)
    events = [EventInstance(int(c), int(on), int(off)) for c, on, off in triples]
    clip_id = os.path.basename(path).rsplit(".", 1)[0]
    return FeatureClip(clip_id=clip_id, features=features, events=events, label_matrix=labels)


def write_event_sidecar(path: str, clip: FeatureClip) -> None:
    frame = pd.DataFrame(
        [(e.category, e.onset_frame, e.offset_frame) for e in clip.events],
        columns=["category", "onset_frame", "offset_frame"],
    )
    frame.to_csv(path, sep="\t", index=False)


def save_manifest(path: str, manifest: DatasetManifest) -> None:
    document = {
        "config": manifest.config,
        "strong_clips": manifest.strong_clips,
        "weak_clips": {k: list(v) for k, v in manifest.weak_clips.items()},
        "unlabeled_clips": manifest.unlabeled_clips,
        "validation_clips": manifest.validation_clips,
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(document, f, sort_keys=False)
    except OSError as e:
        raise PersistenceError(f"Cannot write manifest {path}: {e}") from e


def load_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except OSError as e:
        raise PersistenceError(f"Cannot read manifest {path}: {e}") from e
    return DatasetManifest(
        strong_clips=list(document["strong_clips"]),
        weak_clips={k: list(v) for k, v in (document["weak_clips"] or {}).items()},
        unlabeled_clips=list(document["unlabeled_clips"]),
        validation_clips=list(document["validation_clips"]),
        config=dict(document["config"]),
    )


def _generate_clip(config: DataConfig, seed: int, clip_index: int, clip_id: str, profiles) -> FeatureClip:
    rng = substream(seed, "data", clip_index)
    events = sample_events(rng, config.n_classes, config.n_frames, config.mean_events_per_clip, profiles)
    return render_features(rng, events, profiles, config.noise_std, config.n_freq, config.n_frames, clip_id)


def build_dataset(config: DataConfig, seed: int, out_dir: str) -> DatasetManifest:
    """
    Generate and persist every split.

    Strong and validation clips keep frame annotations; weak clips keep only
    their category set (in the manifest); unlabeled clips keep nothing.

    Args:
        config (DataConfig): Generation parameters
        seed (int): Master seed of the data stream
        out_dir (str): Dataset directory (created if missing)

    Returns:
        DatasetManifest: Split bookkeeping, also written to manifest.yaml
    """
    clip_dir = os.path.join(out_dir, CLIP_DIR)
    try:
        os.makedirs(clip_dir, exist_ok=True)
    except OSError as e:
        raise PersistenceError(f"Cannot create {clip_dir}: {e}") from e

    profiles = default_profiles(substream(seed, "profiles"), config)
    counts = {
        "strong": config.n_strong,
        "weak": config.n_weak,
        "unlabeled": config.n_unlabeled,
        "validation": config.n_validation,
    }
    jobs = []
    clip_index = 0
    for split in SPLITS:
        for i in range(counts[split]):
            jobs.append((split, clip_index, f"{split}_{i:05d}"))
            clip_index += 1

    clips = Parallel(n_jobs=config.n_jobs)(
        delayed(_generate_clip)(config, seed, index, clip_id, profiles) for _, index, clip_id in jobs
    )

    ids = {split: [] for split in SPLITS}
    weak_labels: Dict[str, List[int]] = {}
    for (split, _, clip_id), clip in zip(jobs, clips):
        annotated = split in ("strong", "validation")
        write_clip(os.path.join(clip_dir, f"{clip_id}.clip"), clip, keep_annotations=annotated)
        if annotated:
            write_event_sidecar(os.path.join(clip_dir, f"{clip_id}.events.txt"), clip)
        if split == "weak":
            weak_labels[clip_id] = sorted({e.category for e in clip.events})
        ids[split].append(clip_id)

    manifest = DatasetManifest(
        strong_clips=ids["strong"],
        weak_clips=weak_labels,
        unlabeled_clips=ids["unlabeled"],
        validation_clips=ids["validation"],
        config={**vars(config), "seed": int(seed)},
    )
    save_manifest(os.path.join(out_dir, MANIFEST_NAME), manifest)
    logger.info(
        f"Dataset written to {out_dir}: {len(ids['strong'])} strong, {len(weak_labels)} weak, "
        f"{len(ids['unlabeled'])} unlabeled, {len(ids['validation'])} validation clips"
    )
    return manifest
