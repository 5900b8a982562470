"""Joint optimization of normal field, material field, lights and roughness."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import core, metrics
from .core import Tape, abs_, dot
from .data import PhotometricDataset, contour_directions, require_mask
from .errors import ConfigError, EmptyBatch, NonFiniteGradient, TooFewImages
from .field import (
    LightTable,
    MlpSpec,
    PositionalEncoder,
    guard_directions,
    light_init,
    materials_from_raw,
    mlp_forward,
    normals_from_raw,
    pixel_coords,
)
from .shading import SpecularBasisBank, psb_weights, roughness_ladder, shade

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    k: int = 12
    r_t: float = 300.0
    r_b: float = 10.0
    epochs: int = 2000
    learning_rate: float = 1e-3
    images_per_iteration: int = 8
    pixels_per_iteration: int = 2048
    psb: bool = True
    psb_fraction: float = 0.5
    trainable_roughness: bool = False
    train_lights: bool = True
    smooth_weight: float = 0.1
    contour_weight: float = 0.05
    early_prior_fraction: float = 0.5
    encoding_levels: int = 10
    hidden_width: int = 256
    normal_depth: int = 8
    material_depth: int = 12
    light_init: str = "contour"
    light_raw_norm: float = 0.2
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        counts = ("k", "epochs", "images_per_iteration", "pixels_per_iteration", "encoding_levels",
                  "hidden_width", "normal_depth", "material_depth")
        if any(getattr(self, c) < 1 for c in counts):
            raise ConfigError("all counts must be >= 1")
        if self.k < 2 or not self.r_t > self.r_b > 0:
            raise ConfigError("need k >= 2 and r_t > r_b > 0")
        if self.learning_rate <= 0 or self.light_raw_norm <= 0:
            raise ConfigError("learning rate and light_raw_norm must be positive")
        for f in ("psb_fraction", "early_prior_fraction"):
            if not 0 < getattr(self, f) <= 1:
                raise ConfigError(f"{f} must lie in (0, 1]")
        if self.smooth_weight < 0 or self.contour_weight < 0:
            raise ConfigError("prior weights must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, types[name], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = val.strip()
        values.update(overrides)
        return cls.from_mapping(values)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


# ---------------------------------------------------------------------------
# loss terms and schedules


def photometric_loss(observed, rendered):
    """Mean absolute difference between observed and rendered intensities."""
    if core.value_of(rendered).size == 0 or np.size(core.value_of(observed)) == 0:
        raise EmptyBatch("empty batch")
    if np.shape(core.value_of(observed)) != np.shape(core.value_of(rendered)):
        raise ValueError("observed and rendered batches differ in shape")
    diff = abs_(rendered - observed) if isinstance(rendered, core.Var) else abs_(observed - rendered)
    return diff.mean() if isinstance(diff, core.Var) else float(np.mean(diff))


def alpha_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp of the PSB level from 0 to k over the first psb_fraction of epochs."""
    if not cfg.psb:
        return float(cfg.k)
    ramp = cfg.psb_fraction * cfg.epochs
    return float(cfg.k) * min(1.0, max(0.0, epoch / ramp))


def early_priors(pair_a, pair_b, contour_normals, contour_dirs, epoch: int, cfg: TrainConfig):
    """Smoothness over neighbour normal pairs plus a silhouette prior.

    Each term is a mean cosine dissimilarity; both switch off once
    ``epoch >= early_prior_fraction * epochs``.  ``contour_dirs`` are 2-D
    outward directions and get a zero z component.
    """
    if epoch >= cfg.early_prior_fraction * cfg.epochs:
        return 0.0
    total = 0.0
    if cfg.smooth_weight > 0 and len(core.value_of(pair_a)):
        total = total + cfg.smooth_weight * (1.0 - dot(pair_a, pair_b)).mean()
    if cfg.contour_weight > 0 and len(core.value_of(contour_normals)):
        c = core.value_of(contour_dirs)
        c3 = core.normalize(np.concatenate([c, np.zeros((len(c), 1))], axis=1))
        total = total + cfg.contour_weight * (1.0 - dot(contour_normals, c3)).mean()
    return total


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """Bias-corrected Adam update of ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class EpochLog:
    epoch: int
    loss: float
    alpha: float
    normal_mae: float | None = None
    dir_mae: float | None = None
    int_err: float | None = None
    skipped: int = 0


@dataclass
class Solution:
    normals: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray
    lights: LightTable
    bank: SpecularBasisBank
    history: list[EpochLog]
    params: dict
    config: TrainConfig
    initial_loss: float
    final_loss: float
    initial_normal_mae: float | None = None
    skipped: int = 0

    def render(self, view=None) -> np.ndarray:
        """Re-render every image from the estimates -> (n, H, W)."""
        mask = np.any(self.normals != 0, axis=-1)
        n = len(self.lights)
        out = np.zeros((n,) + mask.shape)
        w = np.ones(self.bank.k)
        args = (self.normals[mask], self.diffuse[mask], self.specular[mask], self.lights.directions, self.lights.intensities, self.bank.roughness, w)
        out[:, mask] = (shade(*args) if view is None else shade(*args, view=view)).T
        return out


class _Model:
    """Parameter store plus the differentiable forward pass."""

    def __init__(self, dataset: PhotometricDataset, cfg: TrainConfig, lights: LightTable, rng):
        self.cfg = cfg
        self.view = np.asarray(dataset.view, float)
        self.encoder = PositionalEncoder(cfg.encoding_levels)
        dt = cfg.dtype
        self.view = self.view.astype(dt)
        self.features = self.encoder(pixel_coords(dataset.mask)).astype(dt)
        width = self.encoder.width
        normal_spec = MlpSpec(width, 3, cfg.normal_depth, cfg.hidden_width)
        material_spec = MlpSpec(width, 1 + cfg.k, cfg.material_depth, cfg.hidden_width)
        self.params: dict[str, np.ndarray] = {}
        for prefix, spec in (("normal", normal_spec), ("material", material_spec)):
            for i, (W, b) in enumerate(spec.init(rng)):
                self.params[f"{prefix}.{i}.W"] = W.astype(dt)
                self.params[f"{prefix}.{i}.b"] = b.astype(dt)
        self.depths = {"normal": cfg.normal_depth, "material": cfg.material_depth}
        # Adam moves each raw coordinate by about lr per step, so the raw
        # norm sets how fast light directions can turn
        self.params["light.dir"] = (lights.directions * cfg.light_raw_norm).astype(dt)
        self.params["light.logint"] = lights.log_intensities.astype(dt)
        self.ladder = roughness_ladder(cfg.k, cfg.r_t, cfg.r_b).astype(dt)
        if cfg.trainable_roughness:
            self.params["roughness.log"] = np.log(-self.ladder)

    def _layers(self, leaves, prefix):
        return [(leaves[f"{prefix}.{i}.W"], leaves[f"{prefix}.{i}.b"]) for i in range(self.depths[prefix])]

    def roughness(self, leaves=None):
        if not self.cfg.trainable_roughness:
            return self.ladder
        src = leaves if leaves is not None else self.params
        return -core.exp(src["roughness.log"])

    def forward(self, tape: Tape | None, pix, imgs, alpha):
        """Render pixels ``pix`` under images ``imgs``; returns (rendered, normals, leaves)."""
        if tape is None:
            leaves = self.params
        else:
            leaves = {k: tape.leaf(v) for k, v in self.params.items()}
        feats = self.features[pix]
        normals = normals_from_raw(mlp_forward(self._layers(leaves, "normal"), feats))
        diffuse, specular = materials_from_raw(mlp_forward(self._layers(leaves, "material"), feats))
        dirs = core.normalize(leaves["light.dir"][imgs])
        intens = core.exp(leaves["light.logint"][imgs])
        weights = psb_weights(alpha, self.cfg.k).astype(self.cfg.dtype)
        rendered = shade(normals, diffuse, specular, dirs, intens, self.roughness(leaves), weights, self.view)
        return rendered, normals, leaves

    def normals(self, pix=None) -> np.ndarray:
        feats = self.features if pix is None else self.features[pix]
        raw = mlp_forward(self._layers(self.params, "normal"), feats)
        return normals_from_raw(raw.astype(np.float64))

    def lights(self) -> LightTable:
        return LightTable(self.params["light.dir"].copy(), self.params["light.logint"].copy())


def _neighbour_tables(mask):
    """For each mask pixel (row-major), index of right/down neighbour in mask order or -1."""
    order = -np.ones(mask.shape, dtype=np.int64)
    order[mask] = np.arange(mask.sum())
    right = -np.ones_like(order)
    down = -np.ones_like(order)
    right[:, :-1] = order[:, 1:]
    down[:-1, :] = order[1:, :]
    return right[mask], down[mask]


def _batches(n: int, per: int, rng) -> list[np.ndarray]:
    """Shuffled round-robin: each image once per epoch, short tail topped up."""
    perm = rng.permutation(n)
    per = min(per, n)
    out = []
    for start in range(0, n, per):
        b = perm[start : start + per]
        if len(b) < per:
            extra = [i for i in perm if i not in set(b)][: per - len(b)]
            b = np.concatenate([b, extra])
        out.append(np.sort(b))
    return out


def _full_loss(model: _Model, obs: np.ndarray) -> float:
    P, n = obs.shape
    rendered, _, _ = model.forward(None, np.arange(P), np.arange(n), float(model.cfg.k))
    return float(np.mean(np.abs(rendered - obs)))


def reconstruct(
    dataset: PhotometricDataset,
    cfg: TrainConfig,
    lights: LightTable | None = None,
    progress: Callable[[EpochLog], None] | None = None,
) -> Solution:
    """Fit normals, materials, lights (and optionally roughness) to ``dataset``."""
    require_mask(dataset.mask)
    if dataset.n < 4:
        raise TooFewImages(f"need at least 4 images, got {dataset.n}")
    rng = np.random.default_rng(cfg.seed)
    if lights is None:
        lights = light_init(cfg.light_init, dataset, cfg.seed)
    model = _Model(dataset, cfg, lights, rng)
    obs = dataset.observations()
    obs_train = obs.astype(cfg.dtype)
    P, n = obs.shape
    right, down = _neighbour_tables(dataset.mask)
    contour_idx, contour_dirs = contour_directions(dataset.mask)
    flat_to_order = -np.ones(dataset.mask.size, dtype=np.int64)
    flat_to_order[np.flatnonzero(dataset.mask.ravel())] = np.arange(P)
    contour_order = flat_to_order[contour_idx]
    contour_dirs_t = contour_dirs.astype(cfg.dtype)
    gt_normals = dataset.gt_normals[dataset.mask] if dataset.gt_normals is not None else None

    def gt_metrics():
        out = {}
        if gt_normals is not None:
            out["normal_mae"] = metrics.mean_angular_error(model.normals(), gt_normals)
        if dataset.gt_lights is not None:
            lt = model.lights()
            out["dir_mae"] = metrics.mean_angular_error(lt.directions, dataset.gt_lights.directions)
            out["int_err"] = metrics.scale_invariant_intensity_error(lt.intensities, dataset.gt_lights.intensities)
        return out

    initial_loss = _full_loss(model, obs)
    initial_mae = gt_metrics().get("normal_mae")
    adam = AdamState()
    history: list[EpochLog] = []
    skipped_total = 0
    npix = min(cfg.pixels_per_iteration, P)
    slot = -np.ones(P, dtype=np.int64)

    for epoch in range(cfg.epochs):
        alpha = alpha_schedule(epoch, cfg)
        losses, skipped = [], 0
        for imgs in _batches(n, cfg.images_per_iteration, rng):
            pix = np.sort(rng.choice(P, size=npix, replace=False))
            tape = Tape()
            rendered, normals, leaves = model.forward(tape, pix, imgs, alpha)
            loss = photometric_loss(obs_train[np.ix_(pix, imgs)], rendered)
            if epoch < cfg.early_prior_fraction * cfg.epochs:
                slot[pix] = np.arange(npix)
                pa, pb = [], []
                for nb in (right, down):
                    q = nb[pix]
                    ok = q >= 0
                    ok[ok] = slot[q[ok]] >= 0
                    pa.append(np.flatnonzero(ok))
                    pb.append(slot[q[ok]])
                pa, pb = np.concatenate(pa), np.concatenate(pb)
                cmask = slot[contour_order] >= 0
                cidx = slot[contour_order[cmask]]
                prior = early_priors(normals[pa], normals[pb], normals[cidx], contour_dirs_t[cmask], epoch, cfg)
                slot[pix] = -1
                loss = loss + prior
            grads = tape.backward(loss)
            g = {name: grads[leaf] for name, leaf in leaves.items()}
            if not cfg.train_lights:
                del g["light.dir"], g["light.logint"]
            previous = model.params["light.dir"].copy()
            try:
                adam_step(adam, model.params, g, cfg.learning_rate)
            except NonFiniteGradient as exc:
                skipped += 1
                log.warning("epoch %d: skipped iteration (%s)", epoch, exc)
                continue
            guard_directions(model.params["light.dir"], previous)
            losses.append(float(loss.value))
        skipped_total += skipped
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else math.nan, alpha, skipped=skipped, **gt_metrics())
        history.append(entry)
        if progress is not None:
            progress(entry)

    H, W = dataset.mask.shape
    normals = np.zeros((H, W, 3))
    normals[dataset.mask] = model.normals()
    raw_mat = mlp_forward(model._layers(model.params, "material"), model.features).astype(np.float64)
    d, s = materials_from_raw(raw_mat)
    diffuse = np.zeros((H, W))
    diffuse[dataset.mask] = d
    specular = np.zeros((H, W, cfg.k))
    specular[dataset.mask] = s
    if cfg.trainable_roughness:
        bank = SpecularBasisBank(np.sort(model.roughness().astype(np.float64)), True)
        order = np.argsort(model.roughness())
        specular = specular[..., order]
    else:
        bank = SpecularBasisBank(roughness_ladder(cfg.k, cfg.r_t, cfg.r_b))
    return Solution(
        normals=normals,
        diffuse=diffuse,
        specular=specular,
        lights=model.lights(),
        bank=bank,
        history=history,
        params={k: v.astype(np.float64) for k, v in model.params.items()},
        config=cfg,
        initial_loss=initial_loss,
        final_loss=_full_loss(model, obs),
        initial_normal_mae=initial_mae,
        skipped=skipped_total,
    )
