"""Moving-blob feature sequences with blur, attenuation, static outliers and noise.

Frames are generated straight in feature space: every blob is a Gaussian
bump with its own non-negative channel signature.  All randomness comes from
``SeedSequence(seed, spawn_key=(stream, t))`` so frame ``t`` can be rebuilt
without touching frames ``0..t-1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .blender import ConfigError, FrameFeature, Neighborhood
from .tensor import ShapeMismatchError, Tensor3, encode_tfb, decode_tfb, resolve_dtype

SPEEDS = {"slow": 0.5, "medium": 1.0, "fast": 2.0}  # pixels per frame
ATTENUATION = 0.5
FORMAT_VERSION = 1

_SCENE_STREAM, _FRAME_STREAM = 0, 1


@dataclass(frozen=True)
class SceneSpec:
    grid: tuple = (8, 16, 16)
    blob_count: int = 2
    blob_amplitude: float = 1.0
    blob_sigma: float = 1.5
    speed_class: str = "fast"
    outlier_probability: float = 1.0
    outlier_amplitude: float = 1.5
    noise_sigma: float = 0.05
    degrade_frames: frozenset = frozenset()
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "degrade_frames", frozenset(int(t) for t in self.degrade_frames))
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError("grid", f"must be three positive integers, got {self.grid}")
        if self.blob_sigma <= 0:
            raise ConfigError("blob_sigma", "must be positive")
        if self.blob_count < 0:
            raise ConfigError("blob_count", "must be non-negative")
        if not 0.0 <= self.outlier_probability <= 1.0:
            raise ConfigError("outlier_probability", "must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma", "must be non-negative")
        if self.speed_class not in SPEEDS:
            raise ConfigError("speed_class", f"must be one of {sorted(SPEEDS)}")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision", "must be 'single' or 'double'")

    @property
    def speed(self):
        return SPEEDS[self.speed_class]

    def to_json(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["degrade_frames"] = sorted(self.degrade_frames)
        return d

    @classmethod
    def from_json(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"scene.{unknown[0]}", "unknown scene key")
        return cls(**data)

    def with_seed(self, seed):
        d = asdict(self)
        d["seed"] = seed
        return SceneSpec(**d)


@dataclass
class SequencePair:
    """Ground truth and degraded streams plus the generator's bookkeeping."""

    clean: list
    observed: list
    centers: np.ndarray            # (T, blob_count, 2) blob centres (row, col)
    outlier_center: np.ndarray     # (2,), meaningful only if any outlier_present
    outlier_present: np.ndarray    # (T,) bool
    spec: SceneSpec = None

    def __len__(self):
        return len(self.clean)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _bounce(p, lo, hi):
    span = hi - lo
    if span <= 0:
        return np.full_like(p, (lo + hi) / 2)
    u = np.mod(p - lo, 2 * span)
    return lo + np.where(u <= span, u, 2 * span - u)


def _bump(h, w, center, sigma):
    rows = np.arange(h)[:, None] - center[0]
    cols = np.arange(w)[None, :] - center[1]
    return np.exp(-(rows ** 2 + cols ** 2) / (2 * sigma ** 2))


def _signature(rng, channels):
    sig = rng.gamma(0.7, size=channels)
    return sig / sig.max()


def generate_sequence(spec, T):
    if T < 3:
        raise ValueError(f"sequences need T >= 3, got {T}")
    C, H, W = spec.grid
    s = spec.blob_sigma
    if H < 4 * s or W < 4 * s:
        raise ValueError(f"grid {H}x{W} too small for blob sigma {s} (needs >= {4 * s})")
    dtype = resolve_dtype(spec.precision)

    scene = _rng(spec.seed, _SCENE_STREAM)
    lo = np.array([2 * s, 2 * s])
    hi = np.array([H - 1 - 2 * s, W - 1 - 2 * s])
    start = lo + scene.uniform(size=(spec.blob_count, 2)) * np.maximum(hi - lo, 0)
    angle = scene.uniform(0, 2 * np.pi, size=spec.blob_count)
    velocity = spec.speed * np.stack([np.sin(angle), np.cos(angle)], axis=-1)
    signatures = [_signature(scene, C) for _ in range(spec.blob_count)]
    outlier_center = lo + scene.uniform(size=2) * np.maximum(hi - lo, 0)
    outlier_sig = _signature(scene, C)
    has_outlier = scene.uniform() < spec.outlier_probability

    centers = np.empty((T, spec.blob_count, 2))
    present = np.zeros(T, dtype=bool)
    clean, observed = [], []
    outlier_bump = _bump(H, W, outlier_center, s)
    for t in range(T):
        frame = np.zeros((C, H, W))
        for b in range(spec.blob_count):
            c = np.array([_bounce(start[b, k] + velocity[b, k] * t, lo[k], hi[k])
                          for k in range(2)])
            centers[t, b] = c
            frame += spec.blob_amplitude * signatures[b][:, None, None] * _bump(H, W, c, s)
        clean.append(FrameFeature(t, Tensor3(frame.astype(dtype))))

        rng = _rng(spec.seed, _FRAME_STREAM, t)
        obs = frame
        if t in spec.degrade_frames:
            obs = ATTENUATION * gaussian_filter(frame, sigma=(0, spec.speed, spec.speed),
                                                mode="constant")
        present[t] = has_outlier
        if has_outlier:
            obs = obs + spec.outlier_amplitude * outlier_sig[:, None, None] * outlier_bump
        if spec.noise_sigma > 0:
            obs = obs + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        observed.append(FrameFeature(t, Tensor3(obs.astype(dtype))))
    return SequencePair(clean, observed, centers, outlier_center, present, spec)


def reconstruction_error(predicted, clean):
    """Mean squared error over all C*H*W entries."""
    if predicted.shape != clean.shape:
        raise ShapeMismatchError(f"shape mismatch: {predicted.shape} vs {clean.shape}")
    d = predicted.data.astype(np.float64) - clean.data.astype(np.float64)
    return float(np.mean(d * d))


# -- neighbourhoods -----------------------------------------------------------------


def neighbor_offsets(count):
    """Nearest frames first, alternating past/future: -1, +1, -2, +2, ..."""
    out = []
    k = 1
    while len(out) < count:
        out.append(-k)
        if len(out) < count:
            out.append(k)
        k += 1
    return out


def full_window_frames(T, count):
    offsets = neighbor_offsets(count)
    lo = -min(offsets, default=0)
    hi = max(offsets, default=0)
    return list(range(lo, T - hi))


def neighborhood_at(frames, t, count, include_self=True):
    """Neighbourhood of ``frames[t]``; offsets falling off the sequence are dropped."""
    T = len(frames)
    idx = [t + o for o in neighbor_offsets(count) if 0 <= t + o < T]
    return Neighborhood(frames[t], tuple(frames[k] for k in idx), include_self)


def region_masks(pair, t, object_level=0.25, outlier_radius=1.5):
    """Boolean ``(H, W)`` masks for the true-object region and the outlier footprint at ``t``.

    Pixels claimed by both are removed from the outlier mask.
    """
    clean = pair.clean[t].feature.data.astype(np.float64)
    energy = clean.max(axis=0)
    peak = energy.max()
    obj = energy > object_level * peak if peak > 0 else np.zeros_like(energy, dtype=bool)
    H, W = energy.shape
    rows = np.arange(H)[:, None] - pair.outlier_center[0]
    cols = np.arange(W)[None, :] - pair.outlier_center[1]
    radius = outlier_radius * pair.spec.blob_sigma
    out = (rows ** 2 + cols ** 2) <= radius ** 2
    return obj, out & ~obj


# -- persistence ----------------------------------------------------------------------


def save_sequence(directory, pair):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T = len(pair)
    for t in range(T):
        (directory / f"clean_{t:04d}.tfb").write_bytes(encode_tfb(pair.clean[t].feature.data))
        (directory / f"observed_{t:04d}.tfb").write_bytes(encode_tfb(pair.observed[t].feature.data))
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensor_format": "TFB1",
        "spec": pair.spec.to_json(),
        "T": T,
        "shape": list(pair.spec.grid),
        "outlier_center": [float(v) for v in pair.outlier_center],
        "outlier_present": [bool(v) for v in pair.outlier_present],
        "centers": pair.centers.round(12).tolist(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_sequence(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = SceneSpec.from_json(manifest["spec"])
    T = manifest["T"]
    clean = [FrameFeature(t, Tensor3(decode_tfb((directory / f"clean_{t:04d}.tfb").read_bytes())))
             for t in range(T)]
    observed = [FrameFeature(t, Tensor3(decode_tfb((directory / f"observed_{t:04d}.tfb").read_bytes())))
                for t in range(T)]
    return SequencePair(clean, observed, np.asarray(manifest["centers"]),
                        np.asarray(manifest["outlier_center"]),
                        np.asarray(manifest["outlier_present"], dtype=bool), spec)
