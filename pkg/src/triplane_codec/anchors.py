"""Anchor cloud data model, binary I/O and synthetic fixtures."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedError, ValidationError

FEATURE_DIM = 32
SCALING_DIM = 3
DEFAULT_K = 4

MAGIC = b"TCGA"
VERSION = 1
# magic, version u32, N u64, k u32, reserved u32
_HEADER = struct.Struct("<4sIQII")
HEADER_SIZE = _HEADER.size

RADIUS_FLOOR = float(np.finfo(np.float64).eps)

# Relative amplitudes of the synthetic attribute groups and their noise.
_GROUP_AMPLITUDE = {"features": 1.0, "scalings": 0.2, "offsets": 0.2}
_NOISE_RATIO = 0.02
_N_WAVES = 8


@dataclass(frozen=True)
class AnchorCloud:
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, 32)
    scalings: np.ndarray  # (N, 3)
    offsets: np.ndarray  # (N, k, 3)

    def __post_init__(self):
        for name in ("positions", "features", "scalings", "offsets"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def coeffs_per_anchor(self) -> int:
        return FEATURE_DIM + SCALING_DIM + 3 * self.k

    def validate(self):
        n = self.positions.shape[0] if self.positions.ndim == 2 else -1
        if n < 1 or self.positions.shape != (n, 3):
            raise ValidationError(f"positions must be (N>=1, 3), got {self.positions.shape}")
        if self.features.shape != (n, FEATURE_DIM):
            raise ValidationError(f"features must be ({n}, {FEATURE_DIM}), got {self.features.shape}")
        if self.scalings.shape != (n, SCALING_DIM):
            raise ValidationError(f"scalings must be ({n}, {SCALING_DIM}), got {self.scalings.shape}")
        if self.offsets.ndim != 3 or self.offsets.shape[0] != n or self.offsets.shape[2] != 3 or self.offsets.shape[1] < 1:
            raise ValidationError(f"offsets must be ({n}, k>=1, 3), got {self.offsets.shape}")
        for name in ("positions", "features", "scalings", "offsets"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite values")

    def attribute_groups(self) -> dict[str, np.ndarray]:
        """Coded attributes flattened per group, shape (N, D_g)."""
        return {
            "features": self.features,
            "scalings": self.scalings,
            "offsets": self.offsets.reshape(self.n, -1),
        }

    def subset(self, idx) -> "AnchorCloud":
        idx = np.asarray(idx)
        return AnchorCloud(self.positions[idx], self.features[idx], self.scalings[idx], self.offsets[idx])

    def translated(self, t) -> "AnchorCloud":
        return AnchorCloud(self.positions + np.asarray(t, dtype=np.float64), self.features, self.scalings, self.offsets)

    def raw_nbytes(self) -> int:
        return 4 * self.n * (3 + self.coeffs_per_anchor)


@dataclass(frozen=True)
class SceneBounds:
    center: np.ndarray
    radius: float


def save_anchor_cloud(cloud: AnchorCloud, path) -> None:
    if not str(path):
        raise OSError("empty output path")
    cloud.validate()
    n, k = cloud.n, cloud.k
    records = np.concatenate(
        [cloud.positions, cloud.features, cloud.scalings, cloud.offsets.reshape(n, 3 * k)], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, k, 0))
        fh.write(records.tobytes())


def load_anchor_cloud(path) -> AnchorCloud:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, n, k, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or k < 1:
        raise FormatError(f"{path}: invalid header N={n} k={k}")
    width = 3 + FEATURE_DIM + SCALING_DIM + 3 * k
    need = HEADER_SIZE + 4 * width * n
    if len(data) < need:
        raise TruncatedError(f"{path}: payload holds {len(data) - HEADER_SIZE} bytes, header declares {need - HEADER_SIZE}")
    rec = np.frombuffer(data, dtype="<f4", count=n * width, offset=HEADER_SIZE).reshape(n, width).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        raise ValidationError(f"{path}: non-finite values in payload")
    return AnchorCloud(
        positions=rec[:, 0:3],
        features=rec[:, 3:35],
        scalings=rec[:, 35:38],
        offsets=rec[:, 38:].reshape(n, k, 3),
    )


def scene_bounds(cloud: AnchorCloud) -> SceneBounds:
    return bounds_from_positions(cloud.positions)


def bounds_from_positions(positions: np.ndarray) -> SceneBounds:
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    center = 0.5 * (lo + hi)
    half_diag = 0.5 * float(np.linalg.norm(hi - lo))
    med = float(np.median(np.linalg.norm(positions - center, axis=1)))
    radius = max(min(half_diag, 3.0 * med), RADIUS_FLOOR)
    return SceneBounds(center=center, radius=radius)


def _smooth_fields(rng, positions, n_channels, corr_len):
    """Random channel mixtures of a shared bank of plane waves.

    Every wave has wavelength >= corr_len; corr_len=inf gives constants.
    """
    direction = rng.normal(size=(_N_WAVES, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    freq = rng.uniform(0.0, 1.0, size=_N_WAVES) / corr_len
    phase = rng.uniform(0.0, 2 * np.pi, size=_N_WAVES)
    waves = np.sin(2 * np.pi * positions @ (direction * freq[:, None]).T + phase)
    mix = rng.normal(size=(_N_WAVES, n_channels)) * np.sqrt(2.0 / _N_WAVES)
    return waves @ mix


def synth_correlated_cloud(seed: int, n: int, corr_len: float = 0.5, k: int = DEFAULT_K) -> AnchorCloud:
    """Uniform anchors in [-1, 1]^3 whose attributes vary smoothly in space.

    Each channel is a smooth random field plus i.i.d. Gaussian noise of
    2% of the group amplitude. Deterministic in (seed, n, corr_len, k).
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not corr_len > 0:
        raise ValidationError("corr_len must be positive")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1.0, 1.0, size=(n, 3))
    dims = {"features": FEATURE_DIM, "scalings": SCALING_DIM, "offsets": 3 * k}
    out = {}
    for name, d in dims.items():
        amp = _GROUP_AMPLITUDE[name]
        field = _smooth_fields(rng, pos, d, corr_len)
        out[name] = amp * field + rng.normal(scale=_NOISE_RATIO * amp, size=(n, d))
    return AnchorCloud(pos, out["features"], out["scalings"], out["offsets"].reshape(n, k, 3))


def synth_iid_cloud(seed: int, n: int, k: int = DEFAULT_K) -> AnchorCloud:
    """Same marginal scale as the correlated fixture, no spatial structure."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1.0, 1.0, size=(n, 3))
    feats = rng.normal(scale=_GROUP_AMPLITUDE["features"], size=(n, FEATURE_DIM))
    scal = rng.normal(scale=_GROUP_AMPLITUDE["scalings"], size=(n, SCALING_DIM))
    offs = rng.normal(scale=_GROUP_AMPLITUDE["offsets"], size=(n, k, 3))
    return AnchorCloud(pos, feats, scal, offs)


def synth_noisy_offsets_cloud(seed: int, n: int, noise_fraction: float = 0.5, noise_scale: float = 0.015,
                              corr_len: float = 0.5, k: int = DEFAULT_K):
    """Correlated cloud where a random fraction of offset slots is replaced by small i.i.d. jitter.

    Returns (cloud, noise_slots) with noise_slots a boolean (N, k) array.
    """
    base = synth_correlated_cloud(seed, n, corr_len, k)
    rng = np.random.default_rng([seed, 1])
    noise_slots = rng.random((n, k)) < noise_fraction
    offsets = base.offsets.copy()
    offsets[noise_slots] = rng.normal(scale=noise_scale, size=(int(noise_slots.sum()), 3))
    return AnchorCloud(base.positions, base.features, base.scalings, offsets), noise_slots
