"""Coordinate MLP fields for normals and materials, and the per-image light table.

Pixel coordinates are mapped into [-1, 1] using the mask's tight bounding
box (longest side), with ``x`` along columns and ``y`` pointing up, and
then lifted by a Fourier encoding before entering the MLPs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import Var, normalize, relu, softplus
from .errors import DegenerateVector, FileFormat, MissingGroundTruth, OutOfRange, ShapeMismatch
from .shading import Material

# ---------------------------------------------------------------------------
# positional encoding


@dataclass(frozen=True)
class PositionalEncoder:
    levels: int = 10
    include_raw: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("encoder needs at least one level")

    @property
    def width(self) -> int:
        return 2 * self.include_raw + 4 * self.levels

    def __call__(self, xy) -> np.ndarray:
        """Encode (..., 2) coordinates -> (..., width) features.

        Per scalar t: sin(2^j pi t), cos(2^j pi t) for j < levels.
        """
        xy = np.asarray(xy, dtype=np.float64)
        if xy.shape[-1] != 2:
            raise ShapeMismatch("coordinates must have a trailing axis of size 2")
        if np.any(np.abs(xy) > 1 + 1e-9):
            raise OutOfRange("coordinates must lie in [-1, 1]")
        freqs = (2.0 ** np.arange(self.levels)) * math.pi
        parts = [xy] if self.include_raw else []
        for c in range(2):
            ang = xy[..., c : c + 1] * freqs
            parts += [np.sin(ang), np.cos(ang)]
        return np.concatenate(parts, axis=-1)


def positional_encode(x: float, y: float, levels: int = 10, include_raw: bool = True) -> np.ndarray:
    return PositionalEncoder(levels, include_raw)(np.array([x, y]))


def pixel_coords(mask) -> np.ndarray:
    """Normalized (x, y) of every mask pixel, in row-major order -> (P, 2)."""
    mask = np.asarray(mask, bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return np.zeros((0, 2))
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    half = max(r1 - r0, c1 - c0) / 2.0 or 1.0
    x = (cols - (c0 + c1) / 2.0) / half
    y = ((r0 + r1) / 2.0 - rows) / half
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------------------
# MLPs


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    depth: int = 8
    hidden: int = 256

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [self.hidden] * (self.depth - 1) + [self.out_dim]

    def init(self, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        layers = []
        w = self.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)))
        return layers


def mlp_forward(params, features):
    """Affine + rectifier on every layer except the last, which stays affine."""
    h = features
    if core.value_of(h).ndim == 1:
        h = h.reshape(1, -1) if isinstance(h, Var) else np.reshape(h, (1, -1))
    if core.value_of(h).shape[1] != core.value_of(params[0][0]).shape[0]:
        raise ShapeMismatch("feature width does not match the first layer")
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        h = core.matmul(h, W) + b
        if i < last:
            h = relu(h)
    return h


def normals_from_raw(raw):
    if np.any(np.linalg.norm(core.value_of(raw), axis=-1) < 1e-9):
        raise DegenerateVector("normal network produced a vanishing vector")
    return normalize(raw)


def normal_at(params, x: float, y: float, encoder: PositionalEncoder = PositionalEncoder()):
    out = normals_from_raw(mlp_forward(params, encoder(np.array([x, y]))))
    return out[0]


def materials_from_raw(raw):
    """Softplus every output; column 0 is diffuse, the rest specular."""
    a = softplus(raw)
    return a[:, 0], a[:, 1:]


def material_at(params, x: float, y: float, encoder: PositionalEncoder = PositionalEncoder()) -> Material:
    d, s = materials_from_raw(mlp_forward(params, encoder(np.array([x, y]))))
    return Material(d[0], s[0])


# ---------------------------------------------------------------------------
# lights


@dataclass
class LightTable:
    """Free per-image light variables: raw direction and log-intensity."""

    raw_directions: np.ndarray
    log_intensities: np.ndarray

    def __post_init__(self):
        self.raw_directions = np.array(self.raw_directions, dtype=np.float64).reshape(-1, 3)
        self.log_intensities = np.array(self.log_intensities, dtype=np.float64).reshape(-1)
        if len(self.raw_directions) != len(self.log_intensities):
            raise ShapeMismatch("one direction per intensity")

    @classmethod
    def from_lights(cls, directions, intensities=None) -> "LightTable":
        directions = np.asarray(directions, float).reshape(-1, 3)
        if intensities is None:
            intensities = np.ones(len(directions))
        intensities = np.asarray(intensities, float)
        if np.any(intensities <= 0):
            raise ValueError("light intensities must be positive")
        return cls(normalize(directions), np.log(intensities))

    def __len__(self):
        return len(self.log_intensities)

    @property
    def directions(self) -> np.ndarray:
        return normalize(self.raw_directions)

    @property
    def intensities(self) -> np.ndarray:
        return np.exp(self.log_intensities)



def guard_directions(raw: np.ndarray, previous: np.ndarray) -> int:
    """Restore (in place) rows of ``raw`` whose norm collapsed to <= 1e-6."""
    bad = np.linalg.norm(raw, axis=1) <= 1e-6
    if bad.any():
        raw[bad] = previous[bad]
    return int(bad.sum())


def contour_lights(images, mask, view=(0.0, 0.0, 1.0), peak_percentile: float = 98.0) -> np.ndarray:
    """Coarse light directions from the occluding contour, one row per image.

    Along a silhouette the normal is the outward 2-D direction ``c`` with no
    z component, so a Lambertian contour reads ``I = a . c`` clamped at 0,
    where ``a`` is the light's image-plane part scaled by albedo times
    intensity.  The azimuth of ``a`` is found by a 0.5 degree sweep, its
    length by least squares, and the scale is removed by dividing by a high
    percentile of the image.  Mask pixels on the image frame are not
    silhouettes and are ignored; images without a usable contour get the
    view direction.
    """
    from . import data

    images = np.asarray(images, float)
    mask = np.asarray(mask, bool)
    view = normalize(np.asarray(view, float))
    out = np.tile(view, (len(images), 1))
    idx, c = data.contour_directions(mask)
    H, W = mask.shape
    r, q = np.unravel_index(idx, mask.shape)
    inner = (r > 0) & (r < H - 1) & (q > 0) & (q < W - 1)
    if inner.sum() < 8:
        return out
    idx, c = idx[inner], c[inner]
    phi = np.radians(np.arange(0.0, 360.0, 0.5))
    u = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    proj = np.maximum(c @ u.T, 0.0)
    energy = np.maximum((proj**2).sum(axis=0), 1e-12)
    I = images.reshape(len(images), -1)[:, idx]
    corr = I @ proj
    best = np.argmax(np.where(corr > 0, corr**2 / energy, -1.0), axis=1)
    for j, a in enumerate(best):
        length = corr[j, a] / energy[a]
        peak = np.percentile(images[j][mask], peak_percentile)
        if not (length > 0 and peak > 0):
            continue
        rxy = min(length / peak, 0.95)
        out[j] = [rxy * u[a, 0], rxy * u[a, 1], math.sqrt(1.0 - rxy * rxy)]
    return out


def light_init(strategy: str, dataset, seed: int = 0) -> LightTable:
    """Initial light table from ``contour``, ``view-jitter:<deg>``, ``file:<path>`` or ``gt-noise:<deg>``."""
    from . import data

    kind, _, arg = strategy.partition(":")
    n = len(dataset.images)
    rng = np.random.default_rng(seed)
    if kind == "contour":
        return LightTable.from_lights(contour_lights(dataset.images, dataset.mask, dataset.view))
    if kind == "view-jitter":
        sigma = float(arg or 0)
        view = np.tile(np.asarray(dataset.view, float), (n, 1))
        return LightTable.from_lights(core.rotate_random(view, sigma, rng))
    if kind == "gt-noise":
        if dataset.gt_lights is None:
            raise MissingGroundTruth("gt-noise initialization needs ground-truth lights")
        return data.perturb_lights(dataset.gt_lights, float(arg or 0), seed)
    if kind == "file":
        table = data.read_light_table(arg)
        if len(table) != n:
            raise FileFormat(f"light file has {len(table)} entries for {n} images")
        return table
    raise ValueError(f"unknown light init strategy {strategy!r}")


# ---------------------------------------------------------------------------
# checkpoints: b"PSCK" | u64 header length | JSON index | float64 LE payload

_MAGIC = b"PSCK"


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "offset": offset, "shape": list(a.shape)})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(index).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<Q", len(header)) + header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 12:
        raise FileFormat(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        index = json.loads(raw[12 : 12 + hlen])
    except ValueError as exc:
        raise FileFormat(f"{path}: corrupt index") from exc
    payload = raw[12 + hlen :]
    out = {}
    for entry in index:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + 8 * count
        if stop > len(payload):
            raise FileFormat(f"{path}: truncated array {entry['name']}")
        out[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(entry["shape"]).copy()
    return out
