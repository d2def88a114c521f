import os
import logging
from typing import Dict, List, Optional

import numpy as np

from constants.config import CLIP_DIR, MANIFEST_NAME
from utils.errors import DataError
from utils.synthgen import FeatureClip, DatasetManifest, load_manifest, read_clip

logger = logging.getLogger(__name__)


class DataLoader:
    """Loads a generated dataset directory (manifest + clip files)."""

    def __init__(self, data_dir: str):
        """
        Initialize the loader.

        Args:
            data_dir (str): Directory produced by synthgen.build_dataset
        """
        self.data_dir = data_dir
        manifest_path = os.path.join(data_dir, MANIFEST_NAME)
        if not os.path.exists(manifest_path):
            raise DataError(f"No dataset manifest found at {manifest_path}")
        self.manifest: DatasetManifest = load_manifest(manifest_path)
        self._cache: Dict[str, FeatureClip] = {}

    @property
    def n_classes(self) -> int:
        return int(self.manifest.config["n_classes"])

    @property
    def n_frames(self) -> int:
        return int(self.manifest.config["n_frames"])

    @property
    def n_freq(self) -> int:
        return int(self.manifest.config["n_freq"])

    def clip(self, clip_id: str) -> FeatureClip:
        if clip_id not in self._cache:
            self._cache[clip_id] = read_clip(os.path.join(self.data_dir, CLIP_DIR, f"{clip_id}.clip"))
        return self._cache[clip_id]

    def split(self, split: str) -> List[FeatureClip]:
        return [self.clip(clip_id) for clip_id in self.manifest.split_ids(split)]

    def training_ids(self) -> List[str]:
        """Strong, weak and unlabeled clip ids, in manifest order."""
        m = self.manifest
        return list(m.strong_clips) + list(m.weak_clips) + list(m.unlabeled_clips)

    def weak_vector(self, clip_id: str) -> Optional[np.ndarray]:
        """Clip-level multi-hot label of a weak clip, None for other clips."""
        categories = self.manifest.weak_clips.get(clip_id)
        if categories is None:
            return None
        vector = np.zeros(self.n_classes)
        vector[list(categories)] = 1.0
        return vector

    def features(self, clip_ids: List[str]) -> np.ndarray:
        """Stacked features [B, F, T]."""
        return np.stack([self.clip(clip_id).features for clip_id in clip_ids])
