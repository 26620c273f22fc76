"""Tracklet datasets: on-disk format and a seeded synthetic generator.

Layout of a dataset directory::

    manifest.json        UTF-8, sorted keys
    features/<id>.f32    little-endian float32, row-major, frame-major, no header

The manifest carries the shape of every feature file.  Features are stored
as 32-bit floats and widened to 64 bits on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from setdist.measures import Tracklet

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
FEATURE_DIR = "features"


@dataclass
class Dataset:
    dim: int
    tracklets: list[Tracklet] = field(default_factory=list)

    def __post_init__(self):
        ids = [t.tracklet_id for t in self.tracklets]
        if len(set(ids)) != len(ids):
            raise ValueError("tracklet ids must be unique")
        for t in self.tracklets:
            if t.dim != self.dim:
                raise ValueError(f"tracklet {t.tracklet_id} has dim {t.dim}, expected {self.dim}")

    def __len__(self) -> int:
        return len(self.tracklets)

    def by_id(self, tracklet_id: str) -> Tracklet:
        for t in self.tracklets:
            if t.tracklet_id == tracklet_id:
                return t
        raise KeyError(f"no tracklet {tracklet_id!r}")

    def identities(self) -> dict[str, int]:
        return {t.tracklet_id: t.identity for t in self.tracklets}


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings.

    Scales (mode separation, camera shift, noise, outliers) are expected
    vector norms: a draw at scale ``s`` has per-coordinate standard
    deviation ``s / sqrt(raw_dim)``; identity centers are drawn at
    ``center_scale``.
    """

    num_identities: int = 20
    cameras_per_identity: int = 2
    frames_per_tracklet_range: tuple[int, int] = (8, 24)
    raw_dim: int = 32
    modes_per_identity: int = 2
    mode_separation: float = 2.0
    camera_shift_scale: float = 0.3
    outlier_rate: float = 0.1
    outlier_scale: float = 3.0
    noise_sigma: float = 0.5
    center_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.frames_per_tracklet_range
        for name in ("num_identities", "cameras_per_identity", "raw_dim", "modes_per_identity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if lo < 1 or lo > hi:
            raise ValueError(f"invalid frames_per_tracklet_range {self.frames_per_tracklet_range}")
        if not 0 <= self.outlier_rate < 1:
            raise ValueError("outlier_rate must be in [0, 1)")
        for name in ("mode_separation", "camera_shift_scale", "outlier_scale", "noise_sigma",
                     "center_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def separable_config(seed: int = 0) -> SyntheticConfig:
    """Two tight single-mode identities without outliers, several cameras each.

    Every frame lies far closer to its own identity's center than to the
    other one, so the identities are linearly separable.
    """
    return SyntheticConfig(
        num_identities=2,
        cameras_per_identity=4,
        frames_per_tracklet_range=(6, 10),
        raw_dim=8,
        modes_per_identity=1,
        mode_separation=0.0,
        camera_shift_scale=0.05,
        outlier_rate=0.0,
        noise_sigma=0.05,
        center_scale=0.15,
        seed=seed,
    )


def generate(config: SyntheticConfig) -> Dataset:
    """Multi-modal identities seen from several cameras.

    Each identity has a center at ``center_scale`` and ``modes_per_identity``
    appearance modes around it; the mode offsets are re-centred to sum to
    zero, so pooling all of an identity's frames lands on its center.
    Every (identity, camera) tracklet gets its own shift; each frame picks a
    mode uniformly at random and adds isotropic noise, and with probability
    ``outlier_rate`` is replaced by a draw at ``outlier_scale`` around the
    origin.
    """
    rng = np.random.default_rng(config.seed)
    d = config.raw_dim
    unit = 1.0 / np.sqrt(d)
    lo, hi = config.frames_per_tracklet_range
    tracklets = []
    for ident in range(config.num_identities):
        center = rng.normal(scale=config.center_scale * unit, size=d)
        offsets = rng.normal(scale=config.mode_separation * unit,
                             size=(config.modes_per_identity, d))
        offsets -= offsets.mean(axis=0)
        modes = center + offsets
        for cam in range(config.cameras_per_identity):
            shift = rng.normal(scale=config.camera_shift_scale * unit, size=d)
            n = int(rng.integers(lo, hi + 1))
            which = rng.integers(config.modes_per_identity, size=n)
            frames = modes[which] + shift + rng.normal(scale=config.noise_sigma * unit, size=(n, d))
            outlier = rng.random(n) < config.outlier_rate
            frames[outlier] = rng.normal(scale=config.outlier_scale * unit,
                                         size=(int(outlier.sum()), d))
            frames = frames.astype(np.float32).astype(np.float64)
            tracklets.append(Tracklet(frames, ident, cam, f"id{ident:04d}_cam{cam}"))
    return Dataset(d, tracklets)


def save(dataset: Dataset, directory) -> None:
    root = Path(directory)
    (root / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    entries = []
    for t in dataset.tracklets:
        rel = f"{FEATURE_DIR}/{t.tracklet_id}.f32"
        (root / rel).write_bytes(np.ascontiguousarray(t.frames, dtype="<f4").tobytes())
        entries.append({
            "tracklet_id": t.tracklet_id,
            "identity": int(t.identity),
            "camera": int(t.camera),
            "num_frames": int(t.num_frames),
            "feature_file": rel,
        })
    manifest = {"version": MANIFEST_VERSION, "dim": int(dataset.dim), "tracklets": entries}
    text = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (root / MANIFEST_NAME).write_text(text, encoding="utf-8")


def load(directory) -> Dataset:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed manifest {path}: {exc}") from exc
    try:
        dim = int(manifest["dim"])
        entries = manifest["tracklets"]
        version = int(manifest["version"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed manifest {path}: missing field {exc}") from exc
    if version != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {version}")
    tracklets = []
    for e in entries:
        fpath = root / e["feature_file"]
        if not fpath.is_file():
            raise FileNotFoundError(f"missing feature file: {fpath}")
        n = int(e["num_frames"])
        if n < 1:
            raise ValueError(f"{fpath}: num_frames must be >= 1")
        raw = fpath.read_bytes()
        expected = n * dim * 4
        if len(raw) != expected:
            raise ValueError(
                f"{fpath}: expected {expected} bytes ({n} frames x {dim} dims), got {len(raw)}"
            )
        frames = np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
        tracklets.append(Tracklet(frames, int(e["identity"]), int(e["camera"]), str(e["tracklet_id"])))
    return Dataset(dim, tracklets)
