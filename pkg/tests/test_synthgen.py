import filecmp
import os

import numpy as np
import pandas as pd
import pytest

from utils.data_loader import DataLoader
from utils.errors import ContractError, DataError, LoadError, ParameterError
from utils.run_config import DataConfig
from utils.synthgen import (
    CategoryProfile,
    EventInstance,
    build_dataset,
    polyphony_fraction,
    rasterize,
    read_clip,
    render_features,
    sample_events,
    write_clip,
)


def _profiles(n_classes=3, n_freq=4, duration=(2, 5)):
    return [
        CategoryProfile(
            signature=np.arange(n_freq, dtype=float) + c,
            signature_variance=np.zeros(n_freq),
            duration_range=duration,
        )
        for c in range(n_classes)
    ]


def test_event_instance_rejects_empty_interval():
    with pytest.raises(ContractError):
        EventInstance(0, 5, 5)


def test_sample_events_zero_mean_is_empty():
    assert sample_events(np.random.default_rng(0), 3, 50, 0.0, _profiles()) == []


def test_sample_events_negative_mean():
    with pytest.raises(ParameterError):
        sample_events(np.random.default_rng(0), 3, 50, -1.0, _profiles())


def test_sample_events_count_and_bounds():
    rng = np.random.default_rng(1)
    counts = []
    for _ in range(10000):
        events = sample_events(rng, 3, 40, 3.0, _profiles())
        counts.append(len(events))
        assert all(0 <= e.onset_frame < e.offset_frame <= 40 for e in events)
    assert 2.9 <= np.mean(counts) <= 3.1


def test_render_features_empty_and_single_event():
    profiles = _profiles()
    empty = render_features(np.random.default_rng(0), [], profiles, 0.0, 4, 10)
    assert not empty.features.any()
    assert not empty.label_matrix.any()

    event = EventInstance(1, 2, 6)
    clip = render_features(np.random.default_rng(0), [event], profiles, 0.0, 4, 10)
    for t in range(10):
        expected = profiles[1].signature if 2 <= t < 6 else np.zeros(4)
        np.testing.assert_array_equal(clip.features[:, t], expected)


def test_render_features_overlap_sums():
    profiles = _profiles()
    events = [EventInstance(0, 0, 6), EventInstance(2, 4, 9)]
    clip = render_features(np.random.default_rng(0), events, profiles, 0.0, 4, 10)
    np.testing.assert_array_equal(clip.features[:, 5], profiles[0].signature + profiles[2].signature)
    assert clip.label_matrix[:, 5].tolist() == [1, 0, 1]


def test_rasterize_matches_brute_force():
    rng = np.random.default_rng(3)
    events = sample_events(rng, 4, 60, 6.0, _profiles(4))
    labels = rasterize(events, 4, 60)
    for c in range(4):
        for t in range(60):
            covered = any(e.category == c and e.onset_frame <= t < e.offset_frame for e in events)
            assert labels[c, t] == int(covered)


def test_clip_file_roundtrip_and_unannotated(tmp_path):
    clip = render_features(np.random.default_rng(0), [EventInstance(0, 1, 3)], _profiles(), 0.1, 4, 8, "c")
    path = str(tmp_path / "c.clip")
    write_clip(path, clip)
    back = read_clip(path)
    np.testing.assert_array_equal(back.features, clip.features)
    np.testing.assert_array_equal(back.label_matrix, clip.label_matrix)
    assert back.events == clip.events

    write_clip(path, clip, keep_annotations=False)
    bare = read_clip(path)
    assert bare.label_matrix is None and bare.events == []


def test_read_clip_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.clip"
    path.write_bytes(b"NOTACLIP" + bytes(32))
    with pytest.raises(LoadError):
        read_clip(str(path))


def _small_config(**kw):
    values = dict(n_classes=4, n_freq=8, n_frames=40, n_strong=10, n_weak=10, n_unlabeled=50, n_validation=20,
                  min_duration=5, max_duration=15)
    values.update(kw)
    return DataConfig(**values)


def test_build_dataset_counts_and_disjoint(tmp_path):
    manifest = build_dataset(_small_config(), 7, str(tmp_path))
    assert len(manifest.strong_clips) == 10
    assert len(manifest.weak_clips) == 10
    assert len(manifest.unlabeled_clips) == 50
    assert len(manifest.validation_clips) == 20
    ids = manifest.strong_clips + list(manifest.weak_clips) + manifest.unlabeled_clips + manifest.validation_clips
    assert len(set(ids)) == len(ids)


def test_build_dataset_weak_and_unlabeled_projection(tmp_path):
    config = _small_config()
    manifest = build_dataset(config, 7, str(tmp_path))
    data = DataLoader(str(tmp_path))
    for clip_id, categories in manifest.weak_clips.items():
        clip = data.clip(clip_id)
        assert clip.label_matrix is None and clip.events == []
        expected = np.zeros(config.n_classes)
        expected[categories] = 1
        np.testing.assert_array_equal(data.weak_vector(clip_id), expected)
    for clip_id in manifest.unlabeled_clips:
        assert data.clip(clip_id).label_matrix is None
        assert data.weak_vector(clip_id) is None
    sidecar = pd.read_csv(os.path.join(tmp_path, "clips", f"{manifest.strong_clips[0]}.events.txt"), sep="\t")
    assert list(sidecar.columns) == ["category", "onset_frame", "offset_frame"]


def test_build_dataset_is_deterministic_and_parallel_safe(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    build_dataset(_small_config(), 11, str(first))
    build_dataset(_small_config(n_jobs=2), 11, str(second))
    names = sorted(os.listdir(first / "clips"))
    assert names == sorted(os.listdir(second / "clips"))
    match, mismatch, errors = filecmp.cmpfiles(first / "clips", second / "clips", names, shallow=False)
    assert not mismatch and not errors


def test_polyphony_is_exercised(tmp_path):
    build_dataset(_small_config(n_frames=200, min_duration=10, max_duration=50), 0, str(tmp_path))
    data = DataLoader(str(tmp_path))
    assert polyphony_fraction(data.split("strong") + data.split("validation")) > 0


def test_data_loader_requires_manifest(tmp_path):
    with pytest.raises(DataError):
        DataLoader(str(tmp_path))
