"""Procedural RGB+depth video clips with controllable depth dependence.

Six motion classes over a flat-shaded orthographic scene. Classes 0/1
(approach/recede) keep a constant 2D footprint, so their RGB frames are
identical for a shared seed and only the depth channel separates them.
Classes 4/5 share the object albedo with a static occluder bar, so passing
behind vs in front leaves the RGB union silhouette unchanged while the
depth buffer differs. Classes 2/3 (lateral motion) are RGB-separable on
purpose. Everything is a pure function of (class_id, seed, config).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

CLIP_MAGIC = b"DEARCLIP"
CLIP_VERSION = 1

DEPTH_MODES = ("ground_truth", "quantized_noisy", "pictorial")

_BG_ALBEDO = 0.25
_Z_BG = 4.0
_Z_OCCLUDER = 2.0

# sub-seed tags for the independent RNG streams of one clip
_TAG_SCENE = 17
_TAG_NOISE = 29
_TAG_DEPTH = 43


@dataclass(frozen=True)
class GenConfig:
    height: int = 64
    width: int = 64
    raw_frames: int = 16
    num_classes: int = 6
    shapes: tuple = ("disk", "square", "triangle")
    noise_rgb: float = 0.02
    depth_mode: str = "ground_truth"
    depth_levels: int = 8
    depth_noise: float = 0.05


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    partner: int | None  # RGB-ambiguous partner class
    uses_occluder: bool


CLASS_SPECS = (
    ClassSpec(0, "approach", 1, False),
    ClassSpec(1, "recede", 0, False),
    ClassSpec(2, "lateral_left", None, False),
    ClassSpec(3, "lateral_right", None, False),
    ClassSpec(4, "pass_behind", 5, True),
    ClassSpec(5, "pass_in_front", 4, True),
)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    depth: np.ndarray   # (T, H, W) normalized inverse depth, 1 = nearest
    label: int
    seed: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def _shape_mask(kind: str, xx, yy, cx: float, cy: float, r: float) -> np.ndarray:
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    # upward triangle: apex at cy - r, base at cy + r
    frac = (yy - (cy - r)) / (2.0 * r)
    return (frac >= 0.0) & (frac <= 1.0) & (np.abs(xx - cx) <= r * frac)


def _trajectory(spec: ClassSpec, cfg: GenConfig, scene: dict, t: np.ndarray):
    """Return per-frame (x, y, z) for normalized times t in [0, 1]."""
    w = cfg.width
    cx, cy = scene["cx"], scene["cy"]
    x = np.full_like(t, cx)
    y = np.full_like(t, cy)
    if spec.class_id == 0:  # approach: z shrinks, footprint constant
        z = 3.0 - 1.8 * t
    elif spec.class_id == 1:
        z = 1.2 + 1.8 * t
    elif spec.class_id == 2:
        x = 0.5 * w + 0.6 * w * (0.5 - t)
        z = np.full_like(t, 2.0)
    elif spec.class_id == 3:
        x = 0.5 * w + 0.6 * w * (t - 0.5)
        z = np.full_like(t, 2.0)
    else:  # 4 / 5: lateral crossing of the occluder, random direction
        x = 0.5 * w + scene["direction"] * 0.6 * w * (t - 0.5)
        z = np.full_like(t, 2.6 if spec.class_id == 4 else 1.4)
    return x, y, z


def generate_clip(class_id: int, seed: int, cfg: GenConfig) -> VideoClip:
    """Render one clip. Pure in (class_id, seed, cfg); class only steers the
    motion program, so partner classes share scene and noise exactly."""
    if not 0 <= class_id < cfg.num_classes:
        raise ContractError(f"class_id {class_id} out of range for num_classes={cfg.num_classes}")
    if cfg.num_classes > len(CLASS_SPECS):
        raise ContractError(f"num_classes={cfg.num_classes} exceeds the {len(CLASS_SPECS)}-class standard set")
    spec = CLASS_SPECS[class_id]
    h, w, tt = cfg.height, cfg.width, cfg.raw_frames

    scene_rng = _rng(seed, _TAG_SCENE)
    scene = {
        "shape": cfg.shapes[int(scene_rng.integers(len(cfg.shapes)))],
        "albedo": scene_rng.uniform(0.45, 1.0, size=3),
        "radius": float(scene_rng.uniform(0.09, 0.14) * min(h, w)),
        "cx": float(scene_rng.uniform(0.35, 0.65) * w),
        "cy": float(scene_rng.uniform(0.35, 0.65) * h),
        "direction": int(scene_rng.integers(2)) * 2 - 1,
    }

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.arange(tt, dtype=np.float64) / max(tt - 1, 1)
    px, py, pz = _trajectory(spec, cfg, scene, t)

    frames = np.full((tt, h, w, 3), _BG_ALBEDO)
    zbuf = np.full((tt, h, w), _Z_BG)
    occ_mask = None
    if spec.uses_occluder:
        occ_mask = np.abs(xx - 0.5 * w) <= 0.09 * w
    for i in range(tt):
        items = [(float(pz[i]), _shape_mask(scene["shape"], xx, yy, px[i], py[i], scene["radius"]), scene["albedo"])]
        if occ_mask is not None:
            items.append((_Z_OCCLUDER, occ_mask, scene["albedo"]))
        for z, mask, albedo in sorted(items, key=lambda it: -it[0]):  # far to near
            frames[i][mask] = albedo
            zbuf[i][mask] = z

    if cfg.noise_rgb > 0:
        noise = _rng(seed, _TAG_NOISE).normal(0.0, cfg.noise_rgb, size=(tt, h, w, 3))
        frames = np.clip(frames + noise, 0.0, 1.0)

    inv = 1.0 / zbuf
    lo, hi = inv.min(), inv.max()
    depth = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
    return VideoClip(frames=frames, depth=depth, label=class_id, seed=int(seed))


def sample_frames(clip: VideoClip, n: int, stride: int) -> VideoClip:
    """Static-stride frame selection: indices 0, s, 2s, ..."""
    if n < 1 or stride < 1:
        raise ContractError(f"need n >= 1 and stride >= 1, got n={n}, stride={stride}")
    if (n - 1) * stride >= clip.num_frames:
        raise ContractError(
            f"stride {stride} with n={n} frames exceeds clip length {clip.num_frames}"
        )
    idx = np.arange(n) * stride
    return VideoClip(frames=clip.frames[idx], depth=clip.depth[idx], label=clip.label, seed=clip.seed)


def silhouette_stats(frames: np.ndarray):
    """Per-frame foreground area fraction and centroid (row, col fractions),
    from RGB only. The background color is estimated from the frame border."""
    t, h, w, _ = frames.shape
    border = np.concatenate(
        [frames[:, 0, :, :], frames[:, -1, :, :], frames[:, :, 0, :], frames[:, :, -1, :]], axis=1
    )
    bg = np.median(border, axis=(0, 1))
    mask = np.abs(frames - bg).max(axis=-1) > 0.12
    area = mask.mean(axis=(1, 2))
    rows = np.arange(h, dtype=np.float64)[None, :, None]
    cols = np.arange(w, dtype=np.float64)[None, None, :]
    count = np.maximum(mask.sum(axis=(1, 2)), 1)
    crow = (mask * rows).sum(axis=(1, 2)) / count / max(h - 1, 1)
    ccol = (mask * cols).sum(axis=(1, 2)) / count / max(w - 1, 1)
    return area, np.stack([crow, ccol], axis=1), mask


def estimate_depth(clip: VideoClip, mode: str, levels: int = 8, sigma: float = 0.05) -> np.ndarray:
    """Stand-in for a monocular depth estimator.

    ground_truth: the rendered depth unchanged. quantized_noisy: Gaussian
    noise then rounding onto `levels` uniform grid points in [0, 1].
    pictorial: 2D cues only (footprint area + vertical position), which is
    blind to pure z-motion by construction.
    """
    if mode == "ground_truth":
        return clip.depth
    if mode == "quantized_noisy":
        if levels < 2:
            raise ContractError(f"quantized_noisy needs levels >= 2, got {levels}")
        d = clip.depth
        if sigma > 0:
            d = d + _rng(clip.seed, _TAG_DEPTH).normal(0.0, sigma, size=d.shape)
        d = np.clip(d, 0.0, 1.0)
        return np.round(d * (levels - 1)) / (levels - 1)
    if mode == "pictorial":
        area, centroid, mask = silhouette_stats(clip.frames)
        lo, hi = area.min(), area.max()
        a_n = (area - lo) / (hi - lo) if hi - lo > 1e-9 else np.full_like(area, 0.5)
        value = np.clip(0.5 * a_n + 0.5 * centroid[:, 0], 0.0, 1.0)
        return mask * value[:, None, None]
    raise ContractError(f"unknown depth mode {mode!r}, expected one of {DEPTH_MODES}")


def build_dataset(cfg: GenConfig, n_per_class: int, split_ratio: float, seed: int):
    """Class-balanced deterministic split. Records are (class_id, clip_seed)
    pairs; pixels regenerate on demand."""
    if n_per_class < 2:
        raise ContractError(f"n_per_class must be >= 2, got {n_per_class}")
    if not 0.0 < split_ratio < 1.0:
        raise ContractError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    train, val = [], []
    n_train = int(round(n_per_class * split_ratio))
    n_train = min(max(n_train, 1), n_per_class - 1)
    for class_id in range(cfg.num_classes):
        rng = _rng(seed, 1000 + class_id)
        seeds = []
        seen = set()
        while len(seeds) < n_per_class:
            s = int(rng.integers(0, 2**63))
            if s not in seen:
                seen.add(s)
                seeds.append(s)
        order = rng.permutation(n_per_class)
        for j, k in enumerate(order):
            (train if j < n_train else val).append((class_id, seeds[k]))
    return train, val


def write_manifest(path, train, val) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for class_id, seed in train:
            f.write(f"{class_id}\t{seed}\ttrain\n")
        for class_id, seed in val:
            f.write(f"{class_id}\t{seed}\tval\n")


def read_manifest(path):
    train, val = [], []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "val"):
                raise FormatError(f"{path}:{lineno}: bad manifest record {line!r}")
            rec = (int(parts[0]), int(parts[1]))
            (train if parts[2] == "train" else val).append(rec)
    return train, val


_CLIP_HEADER = struct.Struct("<8sIIIIIQ")


def write_clip_cache(path, clip: VideoClip) -> None:
    """Flat binary clip record (float32 payload, little-endian)."""
    t, h, w, _ = clip.frames.shape
    with open(path, "wb") as f:
        f.write(_CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, t, h, w, clip.label, clip.seed))
        f.write(clip.frames.astype("<f4").tobytes())
        f.write(clip.depth.astype("<f4").tobytes())


def read_clip_cache(path) -> VideoClip:
    with open(path, "rb") as f:
        head = f.read(_CLIP_HEADER.size)
        if len(head) != _CLIP_HEADER.size:
            raise FormatError(f"{path}: truncated clip header")
        magic, version, t, h, w, label, seed = _CLIP_HEADER.unpack(head)
        if magic != CLIP_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CLIP_VERSION:
            raise FormatError(f"{path}: unsupported clip version {version}")
        frames = np.frombuffer(f.read(t * h * w * 3 * 4), dtype="<f4").reshape(t, h, w, 3)
        depth = np.frombuffer(f.read(t * h * w * 4), dtype="<f4").reshape(t, h, w)
    return VideoClip(frames=frames.astype(np.float64), depth=depth.astype(np.float64),
                     label=int(label), seed=int(seed))
