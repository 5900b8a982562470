"""Datasets: PFM codec, directory layout, synthetic scenes, light perturbation.

A dataset directory looks like::

    filenames.txt          one image name per line; order = light index
    <name>.pfm             Pf or PF images (PF is reduced to luminance)
    mask.pfm               Pf, > 0.5 is foreground
    light_directions.txt   optional, n lines "lx ly lz"
    light_intensities.txt  optional, n lines with 1 or 3 values
    normal_gt.pfm          optional, PF in [-1, 1]

Image arrays are indexed [row, col] with row 0 at the top.  Scene
coordinates put x along columns, y up, z toward the viewer.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import core
from .errors import BadSpec, CountMismatch, EmptyMask, FileFormat, MissingFile
from .field import LightTable
from .shading import VIEW, SpecularBasisBank, psb_weights, shade

LUMINANCE = np.array([0.2126, 0.7152, 0.0722])

# ---------------------------------------------------------------------------
# PFM


def write_pfm(image, path):
    """Write an (H, W) or (H, W, 3) array as little-endian PFM."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    elif img.ndim == 2:
        magic = b"Pf"
    else:
        raise FileFormat(f"cannot store array of shape {img.shape} as PFM")
    if not np.all(np.isfinite(img)):
        raise FileFormat("PFM images must be finite")
    h, w = img.shape[:2]
    payload = np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + payload)


_HEADER = re.compile(rb"^(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    """Read a PFM file -> float32 array, (H, W) or (H, W, 3), top row first."""
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise FileFormat(f"{path}: bad PFM header")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise FileFormat(f"{path}: bad scale field") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise FileFormat(f"{path}: bad dimensions or scale")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end() :]
    if len(body) < 4 * count:
        raise FileFormat(f"{path}: truncated payload ({len(body)} of {4 * count} bytes)")
    img = np.frombuffer(body[: 4 * count], dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(img.reshape(shape)).copy()


# ---------------------------------------------------------------------------
# dataset model and directory IO


@dataclass
class PhotometricDataset:
    images: np.ndarray  # (n, H, W)
    mask: np.ndarray  # (H, W) bool
    names: list[str]
    view: np.ndarray = field(default_factory=lambda: VIEW.copy())
    gt_lights: LightTable | None = None
    gt_normals: np.ndarray | None = None  # (H, W, 3)
    # synthetic scenes only
    gt_diffuse: np.ndarray | None = None
    gt_specular: np.ndarray | None = None  # (H, W, k)
    gt_roughness: np.ndarray | None = None
    scene: dict | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 3 or self.images.shape[1:] != self.mask.shape:
            raise FileFormat("images must be (n, H, W) matching the mask")
        if len(self.names) != len(self.images):
            raise CountMismatch("one name per image")

    @property
    def n(self) -> int:
        return len(self.images)

    def observations(self) -> np.ndarray:
        """(P, n) intensities of mask pixels in row-major order."""
        return self.images[:, self.mask].T


def _to_luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMINANCE if img.ndim == 3 else img


def _read_rows(path: Path, n: int, widths: tuple[int, ...]) -> np.ndarray:
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != n:
        raise CountMismatch(f"{path.name}: {len(lines)} lines for {n} images")
    try:
        rows = [[float(v) for v in ln] for ln in lines]
    except ValueError as exc:
        raise FileFormat(f"{path.name}: non-numeric entry") from exc
    if any(len(r) not in widths for r in rows):
        raise FileFormat(f"{path.name}: expected {widths} values per line")
    return rows


def read_light_table(path) -> LightTable:
    """Light table from a dataset directory or from an 'lx ly lz [e]' file."""
    path = Path(path)
    if path.is_dir():
        names = (path / "filenames.txt").read_text().split()
        dirs = np.array(_read_rows(path / "light_directions.txt", len(names), (3,)))
        ints = np.ones(len(names))
        if (path / "light_intensities.txt").exists():
            ints = np.array([np.mean(r) for r in _read_rows(path / "light_intensities.txt", len(names), (1, 3))])
        return LightTable.from_lights(dirs, ints)
    if not path.exists():
        raise MissingFile(str(path))
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FileFormat(f"{path}: empty light file")
    raw = _read_rows(path, len(lines), (3, 4))
    if len({len(r) for r in raw}) != 1:
        raise FileFormat(f"{path}: mixed 3- and 4-column rows")
    rows = np.array(raw, dtype=float)
    if rows.shape[1] == 4:
        return LightTable.from_lights(rows[:, :3], rows[:, 3])
    return LightTable.from_lights(rows)


def load_dataset(directory) -> PhotometricDataset:
    d = Path(directory)
    listing = d / "filenames.txt"
    if not listing.exists():
        raise MissingFile(f"{listing} not found")
    names = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
    images = []
    for name in names:
        p = d / (name if name.endswith(".pfm") else name + ".pfm")
        if not p.exists():
            raise MissingFile(f"{p} not found")
        images.append(_to_luminance(read_pfm(p).astype(np.float64)))
    if not (d / "mask.pfm").exists():
        raise MissingFile(f"{d / 'mask.pfm'} not found")
    mask_img = read_pfm(d / "mask.pfm")
    mask = _to_luminance(mask_img.astype(np.float64)) > 0.5
    if any(img.shape != mask.shape for img in images):
        raise FileFormat("image sizes do not match the mask")
    n = len(names)

    gt_lights = None
    if (d / "light_directions.txt").exists():
        dirs = np.array(_read_rows(d / "light_directions.txt", n, (3,)))
        if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1) > 1e-3):
            raise FileFormat("light directions must be unit length within 1e-3")
        ints = np.ones(n)
        if (d / "light_intensities.txt").exists():
            ints = np.array([np.mean(r) for r in _read_rows(d / "light_intensities.txt", n, (1, 3))])
        gt_lights = LightTable.from_lights(dirs, ints)

    gt_normals = None
    if (d / "normal_gt.pfm").exists():
        nrm = read_pfm(d / "normal_gt.pfm").astype(np.float64)
        if nrm.ndim != 3:
            raise FileFormat("normal_gt.pfm must be a 3-channel PFM")
        gt_normals = np.zeros_like(nrm)
        gt_normals[mask] = core.normalize(nrm[mask])

    scene = json.loads((d / "scene.json").read_text()) if (d / "scene.json").exists() else None
    return PhotometricDataset(np.stack(images), mask, names, gt_lights=gt_lights, gt_normals=gt_normals, scene=scene)


def save_dataset(dataset: PhotometricDataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "filenames.txt").write_text("".join(f"{nm}\n" for nm in dataset.names))
    for nm, img in zip(dataset.names, dataset.images):
        write_pfm(img, d / (nm if nm.endswith(".pfm") else nm + ".pfm"))
    write_pfm(dataset.mask.astype(np.float32), d / "mask.pfm")
    if dataset.gt_lights is not None:
        lt = dataset.gt_lights
        (d / "light_directions.txt").write_text("".join("%.17g %.17g %.17g\n" % tuple(v) for v in lt.directions))
        (d / "light_intensities.txt").write_text("".join("%.17g\n" % e for e in lt.intensities))
    if dataset.gt_normals is not None:
        write_pfm(dataset.gt_normals, d / "normal_gt.pfm")
    if dataset.scene is not None:
        (d / "scene.json").write_text(json.dumps(dataset.scene, indent=2))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthSceneSpec:
    shape: str = "sphere"  # sphere | heightfield
    height: int = 64
    width: int = 64
    radius: float | None = None  # pixels; default 0.45 * min(height, width)
    bump_amplitude: float = 0.15
    bump_frequency: float = 1.5
    material: str = "uniform"  # uniform | two-region | textured-noise
    diffuse: float = 0.5
    specular: float = 0.5
    specular_bases: tuple[int, ...] = (1,)  # 1-based indices that carry the specular albedo
    k: int = 12
    r_t: float = 300.0
    r_b: float = 10.0
    n_lights: int = 16
    cap_deg: float = 50.0
    intensity_jitter: float = 0.2
    noise: float = 0.0
    seed: int = 0

    def validate(self):
        if self.shape not in ("sphere", "heightfield"):
            raise BadSpec(f"unknown shape {self.shape!r}")
        if self.material not in ("uniform", "two-region", "textured-noise"):
            raise BadSpec(f"unknown material layout {self.material!r}")
        if self.height < 2 or self.width < 2:
            raise BadSpec("resolution too small")
        r = self.resolved_radius
        if self.shape == "sphere" and not (0 < r and 2 * r <= min(self.height, self.width)):
            raise BadSpec("sphere radius does not fit the image")
        if not 0 <= self.cap_deg < 90:
            raise BadSpec("light cap must stay inside the upper hemisphere")
        if self.n_lights < 1 or not 0 <= self.intensity_jitter < 1:
            raise BadSpec("bad light settings")
        if any(not 1 <= i <= self.k for i in self.specular_bases):
            raise BadSpec("specular basis index out of range")
        if self.diffuse < 0 or self.specular < 0 or self.noise < 0:
            raise BadSpec("albedos and noise must be non-negative")

    @property
    def resolved_radius(self) -> float:
        return self.radius if self.radius is not None else 0.45 * min(self.height, self.width)


def _scene_geometry(spec: SynthSceneSpec):
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    x, y = cols - cx, cy - rows  # y up
    normals = np.zeros((h, w, 3))
    if spec.shape == "sphere":
        R = spec.resolved_radius
        rr = (x**2 + y**2) / R**2
        mask = rr < 1.0
        normals[mask] = np.stack([x[mask] / R, y[mask] / R, np.sqrt(1 - rr[mask])], axis=1)
    else:
        # z = A * sin(f pi u) * cos(f pi v) on u, v in [-1, 1]
        s = max(cx, cy)
        u, v = x / s, y / s
        A, f = spec.bump_amplitude, spec.bump_frequency
        dzdu = A * f * np.pi * np.cos(f * np.pi * u) * np.cos(f * np.pi * v)
        dzdv = -A * f * np.pi * np.sin(f * np.pi * u) * np.sin(f * np.pi * v)
        normals = core.normalize(np.stack([-dzdu, -dzdv, np.ones_like(u)], axis=-1))
        mask = np.ones((h, w), bool)
    return mask, normals, x


def _cap_lights(spec: SynthSceneSpec, rng) -> np.ndarray:
    """Fibonacci spiral over the spherical cap, randomly spun about z."""
    n = spec.n_lights
    zmin = np.cos(np.radians(spec.cap_deg))
    i = np.arange(n) + 0.5
    z = 1 - (1 - zmin) * i / n
    phi = i * np.pi * (3 - np.sqrt(5)) + rng.uniform(0, 2 * np.pi)
    s = np.sqrt(1 - z**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def synth_scene(spec: SynthSceneSpec, directions=None) -> PhotometricDataset:
    """Render a scene with full ground truth (attached shadows, no cast shadows)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    mask, normals, x = _scene_geometry(spec)
    if directions is None:
        directions = _cap_lights(spec, rng)
    directions = np.asarray(directions, float)
    if np.any(directions[:, 2] <= 0):
        raise BadSpec("light directions must have positive z")
    directions = core.normalize(directions)
    intens = rng.uniform(1 - spec.intensity_jitter, 1 + spec.intensity_jitter, len(directions))

    h, w = mask.shape
    diffuse = np.full((h, w), spec.diffuse)
    spec_total = np.full((h, w), spec.specular)
    if spec.material == "two-region":
        right = x >= 0
        diffuse[right] *= 0.5
        spec_total[right] *= 1.6
    elif spec.material == "textured-noise":
        tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=3.0)
        tex /= np.abs(tex).max() + 1e-12
        diffuse *= 1 + 0.4 * tex
    specular = np.zeros((h, w, spec.k))
    for i in spec.specular_bases:
        specular[..., i - 1] = spec_total / len(spec.specular_bases)
    diffuse[~mask] = 0
    specular[~mask] = 0

    bank = SpecularBasisBank.from_ladder(spec.k, spec.r_t, spec.r_b)
    m = shade(normals[mask], diffuse[mask], specular[mask], directions, intens, bank.roughness, psb_weights(spec.k, spec.k))
    if spec.noise > 0:
        m = np.maximum(m + rng.normal(scale=spec.noise, size=m.shape), 0.0)
    images = np.zeros((len(directions), h, w))
    images[:, mask] = m.T
    names = [f"img_{j:03d}" for j in range(len(directions))]
    scene = asdict(spec)
    scene["specular_bases"] = list(spec.specular_bases)
    return PhotometricDataset(
        images,
        mask,
        names,
        gt_lights=LightTable.from_lights(directions, intens),
        gt_normals=normals,
        gt_diffuse=diffuse,
        gt_specular=specular,
        gt_roughness=bank.roughness,
        scene=scene,
    )


def scene_from_dict(d: dict) -> SynthSceneSpec:
    d = dict(d)
    d["specular_bases"] = tuple(d.get("specular_bases", (1,)))
    return SynthSceneSpec(**d)


def perturb_lights(lights: LightTable, sigma_deg: float, seed: int = 0) -> LightTable:
    """Randomly rotate every direction by at most ``sigma_deg``; reset intensities to 1."""
    if sigma_deg < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    dirs = core.rotate_random(lights.directions, sigma_deg, rng)
    return LightTable.from_lights(dirs)


def boundary(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (image edge counts as outside)."""
    mask = np.asarray(mask, bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return mask & ~inner


def contour_directions(mask) -> tuple[np.ndarray, np.ndarray]:
    """Boundary pixels (row-major) and their outward unit (x, y-up) directions."""
    mask = np.asarray(mask, bool)
    b = boundary(mask)
    smooth = ndimage.gaussian_filter(mask.astype(float), sigma=1.5, mode="constant")
    gr, gc = np.gradient(smooth)
    # outward = descending the smoothed mask; rows grow downward
    d = np.stack([-gc, gr], axis=-1)[b]
    norm = np.linalg.norm(d, axis=1)
    keep = norm > 1e-9
    b_idx = np.flatnonzero(b.ravel())[keep]
    return b_idx, d[keep] / norm[keep, None]


def require_mask(mask):
    if not np.any(mask):
        raise EmptyMask("mask has no foreground pixels")
