"""Synthetic clip generator: determinism, ambiguity construction, formats."""

import numpy as np
import pytest

from depthact import synthvid as sv
from depthact.errors import ContractError, FormatError

CFG = sv.GenConfig()
SMALL = sv.GenConfig(height=32, width=32, raw_frames=8)


def test_generate_clip_determinism():
    a = sv.generate_clip(0, 123, CFG)
    b = sv.generate_clip(0, 123, CFG)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.depth, b.depth)
    assert a.label == b.label == 0


def test_generate_clip_values_in_range():
    for class_id in range(6):
        clip = sv.generate_clip(class_id, 77 + class_id, CFG)
        assert np.isfinite(clip.frames).all() and np.isfinite(clip.depth).all()
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
        assert clip.depth.min() >= 0.0 and clip.depth.max() <= 1.0
        assert clip.frames.shape == (CFG.raw_frames, CFG.height, CFG.width, 3)
        assert clip.depth.shape == (CFG.raw_frames, CFG.height, CFG.width)


def test_generate_clip_class_out_of_range():
    with pytest.raises(ContractError):
        sv.generate_clip(6, 0, CFG)


def test_approach_depth_mean_strictly_increasing():
    for seed in (1, 2, 3):
        clip = sv.generate_clip(0, seed, CFG)
        means = clip.depth.mean(axis=(1, 2))
        assert np.all(np.diff(means) > 0)


def test_approach_recede_rgb_identical_depth_differs():
    # partner classes share scene and noise streams, so the RGB frames are
    # bit-identical; only the depth channel can tell them apart
    for seed in range(100):
        a = sv.generate_clip(0, seed, SMALL)
        r = sv.generate_clip(1, seed, SMALL)
        assert np.array_equal(a.frames, r.frames)
        assert not np.array_equal(a.depth, r.depth)


def test_occluder_pair_rgb_identical_depth_differs():
    for seed in range(50):
        behind = sv.generate_clip(4, seed, SMALL)
        front = sv.generate_clip(5, seed, SMALL)
        assert np.array_equal(behind.frames, front.frames)
        assert not np.array_equal(behind.depth, front.depth)


def test_partner_relation_symmetric():
    for spec in sv.CLASS_SPECS:
        if spec.partner is not None:
            assert sv.CLASS_SPECS[spec.partner].partner == spec.class_id


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------

def test_sample_frames_static_stride():
    cfg = sv.GenConfig(raw_frames=32)
    clip = sv.generate_clip(2, 9, cfg)
    out = sv.sample_frames(clip, 8, 4)
    idx = [0, 4, 8, 12, 16, 20, 24, 28]
    assert np.array_equal(out.frames, clip.frames[idx])
    assert np.array_equal(out.depth, clip.depth[idx])


def test_sample_frames_single():
    clip = sv.generate_clip(2, 9, CFG)
    out = sv.sample_frames(clip, 1, 5)
    assert np.array_equal(out.frames, clip.frames[:1])


def test_sample_frames_identity():
    clip = sv.generate_clip(3, 11, CFG)
    out = sv.sample_frames(clip, CFG.raw_frames, 1)
    assert np.array_equal(out.frames, clip.frames)


def test_sample_frames_stride_overflow():
    clip = sv.generate_clip(0, 1, CFG)
    with pytest.raises(ContractError):
        sv.sample_frames(clip, 8, 4)  # (8-1)*4 >= 16


# ---------------------------------------------------------------------------
# depth proxies
# ---------------------------------------------------------------------------

def test_estimate_depth_ground_truth_identity():
    clip = sv.generate_clip(1, 5, CFG)
    out = sv.estimate_depth(clip, "ground_truth")
    assert out is clip.depth


def test_quantized_noisy_grid_value():
    # sigma=0 leaves only the quantizer: 0.5 snaps to 4/7 on the 8-level grid
    clip = sv.generate_clip(0, 5, CFG)
    clip.depth[:] = 0.5
    out = sv.estimate_depth(clip, "quantized_noisy", levels=8, sigma=0.0)
    assert np.allclose(out, 4.0 / 7.0)


def test_quantized_noisy_on_grid():
    clip = sv.generate_clip(0, 6, CFG)
    out = sv.estimate_depth(clip, "quantized_noisy", levels=8, sigma=0.05)
    grid = np.arange(8) / 7.0
    assert np.all(np.isclose(out[..., None], grid).any(axis=-1))


def test_quantized_noisy_deterministic():
    clip = sv.generate_clip(0, 6, CFG)
    a = sv.estimate_depth(clip, "quantized_noisy", levels=8, sigma=0.05)
    b = sv.estimate_depth(clip, "quantized_noisy", levels=8, sigma=0.05)
    assert np.array_equal(a, b)


def test_quantized_noisy_levels_validation():
    clip = sv.generate_clip(0, 6, CFG)
    with pytest.raises(ContractError):
        sv.estimate_depth(clip, "quantized_noisy", levels=1)


def test_pictorial_blind_to_pure_z_motion():
    # constant-footprint classes produce (near-)constant pictorial depth, so
    # approach and recede collapse onto the same estimate
    overlaps = 0
    for seed in range(50):
        a = sv.generate_clip(0, seed, SMALL)
        r = sv.generate_clip(1, seed, SMALL)
        pa = sv.estimate_depth(a, "pictorial")
        pr = sv.estimate_depth(r, "pictorial")
        if np.array_equal(pa, pr):
            overlaps += 1
    assert overlaps == 50


def test_estimate_depth_unknown_mode():
    clip = sv.generate_clip(0, 1, CFG)
    with pytest.raises(ContractError):
        sv.estimate_depth(clip, "lidar")


# ---------------------------------------------------------------------------
# dataset build + manifests
# ---------------------------------------------------------------------------

def test_build_dataset_arithmetic():
    train, val = sv.build_dataset(CFG, 100, 0.8, 0)
    assert len(train) == 480 and len(val) == 120
    for c in range(6):
        assert sum(1 for cid, _ in train if cid == c) == 80
        assert sum(1 for cid, _ in val if cid == c) == 20


def test_build_dataset_deterministic_and_disjoint():
    a = sv.build_dataset(CFG, 10, 0.8, 42)
    b = sv.build_dataset(CFG, 10, 0.8, 42)
    assert a == b
    train, val = a
    assert set(train).isdisjoint(val)


def test_build_dataset_validation():
    with pytest.raises(ContractError):
        sv.build_dataset(CFG, 1, 0.8, 0)
    with pytest.raises(ContractError):
        sv.build_dataset(CFG, 10, 1.0, 0)


def test_manifest_round_trip(tmp_path):
    train, val = sv.build_dataset(CFG, 4, 0.75, 3)
    path = tmp_path / "manifest.tsv"
    sv.write_manifest(path, train, val)
    rt_train, rt_val = sv.read_manifest(path)
    assert rt_train == train and rt_val == val


def test_manifest_bad_record(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("0\t12\ttest\n")
    with pytest.raises(FormatError):
        sv.read_manifest(path)


def test_clip_cache_round_trip(tmp_path):
    clip = sv.generate_clip(4, 99, SMALL)
    path = tmp_path / "clip.bin"
    sv.write_clip_cache(path, clip)
    back = sv.read_clip_cache(path)
    assert back.label == clip.label and back.seed == clip.seed
    # payload is float32 on disk
    assert np.allclose(back.frames, clip.frames, atol=1e-6)
    assert np.allclose(back.depth, clip.depth, atol=1e-6)


def test_clip_cache_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
    with pytest.raises(FormatError):
        sv.read_clip_cache(path)


def test_clip_cache_truncated(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(b"\0" * 4)
    with pytest.raises(FormatError):
        sv.read_clip_cache(path)


# ---------------------------------------------------------------------------
# separability rules (small-scale version of the acceptance property)
# ---------------------------------------------------------------------------

def rgb_rule(clip):
    """Best RGB statistic available: does the silhouette area trend up?"""
    area, _, _ = sv.silhouette_stats(clip.frames)
    return 0 if area[-1] > area[0] else 1


def depth_rule(clip):
    means = clip.depth.mean(axis=(1, 2))
    return 0 if means[-1] > means[0] else 1


def test_separability_small_sample():
    rgb_hits = depth_hits = total = 0
    for seed in range(50):
        for class_id in (0, 1):
            clip = sv.generate_clip(class_id, seed, SMALL)
            rgb_hits += rgb_rule(clip) == class_id
            depth_hits += depth_rule(clip) == class_id
            total += 1
    assert depth_hits / total >= 0.95
    assert abs(rgb_hits / total - 0.5) <= 0.15
