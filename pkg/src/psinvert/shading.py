"""Diffuse + spherical-Gaussian specular shading with progressive bases.

Intensity of a pixel with normal ``n`` lit from unit direction ``l`` with
strength ``e`` and viewed from ``v``::

    m = e * (rho_d + sum_i w_i(alpha) * rho_s[i] * exp(r[i] * (1 - n.h))) * max(n.l, 0)

with ``h`` the unit bisector of ``v`` and ``l``.  ``w_i`` ramps basis ``i``
(1-based) in with a half-cosine as ``alpha`` passes from ``i`` to ``i+1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import Var, dot, exp, normalize, relu
from .errors import BadLadder, OutOfRange, ShapeMismatch

VIEW = np.array([0.0, 0.0, 1.0])


def roughness_ladder(k: int, r_t: float, r_b: float) -> np.ndarray:
    """k roughness values spaced log-uniformly from -r_t to -r_b."""
    if k < 2 or not (r_t > r_b > 0):
        raise BadLadder(f"need k >= 2 and r_t > r_b > 0, got k={k}, r_t={r_t}, r_b={r_b}")
    i = np.arange(1, k + 1)
    return -np.exp(math.log(r_t) - (math.log(r_t) - math.log(r_b)) * (i - 1) / (k - 1))


@dataclass
class SpecularBasisBank:
    roughness: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        self.roughness = np.asarray(self.roughness, dtype=np.float64)
        if self.roughness.ndim != 1 or self.roughness.size == 0:
            raise BadLadder("roughness must be a non-empty 1-D array")
        if np.any(self.roughness >= 0):
            raise BadLadder("roughness values must be negative")
        if np.any(np.diff(self.roughness) < 0):
            raise BadLadder("roughness must be sorted from shiniest (most negative) to roughest")

    @property
    def k(self) -> int:
        return self.roughness.size

    @classmethod
    def from_ladder(cls, k=12, r_t=300.0, r_b=10.0, trainable=False):
        return cls(roughness_ladder(k, r_t, r_b), trainable)


@dataclass
class Material:
    diffuse: object
    specular: object = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not isinstance(self.diffuse, Var) and np.any(np.asarray(self.diffuse) < 0):
            raise ValueError("diffuse albedo must be non-negative")
        if not isinstance(self.specular, Var):
            self.specular = np.asarray(self.specular, dtype=np.float64)
            if np.any(self.specular < 0):
                raise ValueError("specular albedos must be non-negative")


@dataclass
class Light:
    direction: object
    log_intensity: object = 0.0

    @property
    def intensity(self):
        return exp(self.log_intensity)


def check_alpha(alpha: float, k: int) -> float:
    if not 0.0 <= alpha <= k:
        raise OutOfRange(f"PSB level {alpha} outside [0, {k}]")
    return float(alpha)


def psb_weight(alpha: float, i: int, k: int | None = None) -> float:
    """Progressive weight of basis ``i`` (1-based) at level ``alpha``.

    Basis ``i`` ramps in over ``alpha`` in [i, i+1).  When the bank size
    ``k`` is given, the last basis ramps over [k-1, k] instead, so that
    every weight is 1 at ``alpha = k`` and the weights stay continuous.
    """
    d = alpha - i
    if k is not None and i == k:
        d += 1.0
    if d < 0:
        return 0.0
    if d < 1:
        return (1.0 - math.cos(d * math.pi)) / 2.0
    return 1.0


def psb_weights(alpha: float, k: int) -> np.ndarray:
    check_alpha(alpha, k)
    return np.array([psb_weight(alpha, i, k) for i in range(1, k + 1)])


def half_vector(v, l):
    return normalize(v + l)


def specular_spike_view(n, l) -> np.ndarray:
    """View direction under which ``n`` mirrors ``l``: 2(l.n)n - l."""
    n, l = np.asarray(n, float), np.asarray(l, float)
    return 2.0 * np.dot(l, n) * n - l


def specular_response(n, h, material: Material, bank: SpecularBasisBank, alpha: float, roughness=None):
    """Sum of PSB-weighted spherical-Gaussian lobes at one point.

    ``roughness`` overrides ``bank.roughness`` (used for trainable roughness).
    """
    r = bank.roughness if roughness is None else roughness
    w = psb_weights(check_alpha(alpha, bank.k), bank.k)
    ndoth = dot(n, h)
    terms = material.specular * w * exp(r * (1.0 - ndoth))
    if isinstance(terms, Var):
        return terms.sum()
    return float(np.sum(terms))


def render_pixel(n, material: Material, light: Light, v, bank: SpecularBasisBank, alpha: float, roughness=None):
    h = half_vector(v, light.direction)
    brdf = material.diffuse + specular_response(n, h, material, bank, alpha, roughness)
    m = light.intensity * brdf * relu(dot(n, light.direction))
    return m if isinstance(m, Var) else float(m)


def shade(normals, diffuse, specular, directions, intensities, roughness, weights, view=VIEW):
    """Batched render of P pixels under B lights -> (P, B).

    normals (P,3), diffuse (P,), specular (P,k), directions (B,3) unit,
    intensities (B,), roughness (k,), weights (k,) constant.  Any argument
    may be a :class:`Var`; bases whose weight is 0 are skipped.
    """
    n = core.value_of(normals)
    P = n.shape[0]
    B = core.value_of(directions).shape[0]
    ndotl = core.matmul(normals, directions.T)
    ndoth = core.matmul(normals, normalize(view + directions).T)
    active = np.flatnonzero(np.asarray(weights) > 0)
    brdf = diffuse.reshape(P, 1) if isinstance(diffuse, Var) else np.reshape(diffuse, (P, 1))
    if active.size:
        r = roughness[active]
        a = specular[:, active] * np.asarray(weights)[active]
        lobes = exp((1.0 - ndoth).reshape(P, B, 1) * r)
        spec = (lobes * a.reshape(P, 1, active.size)).sum(axis=2)
        brdf = brdf + spec
    return intensities * brdf * relu(ndotl)


def render_image(normals, material: Material, light: Light, bank: SpecularBasisBank, alpha: float, mask, view=VIEW):
    """Render an (H, W) image; pixels outside ``mask`` are 0."""
    normals = np.asarray(normals, float)
    mask = np.asarray(mask, bool)
    diffuse = np.asarray(material.diffuse, float)
    specular = np.asarray(material.specular, float)
    if normals.shape[:2] != mask.shape or diffuse.shape != mask.shape or specular.shape[:2] != mask.shape:
        raise ShapeMismatch("normals, materials and mask must share (H, W)")
    if specular.shape[2] != bank.k:
        raise ShapeMismatch("specular albedo count must equal bank size")
    out = np.zeros(mask.shape)
    if not mask.any():
        return out
    w = psb_weights(check_alpha(alpha, bank.k), bank.k)
    d = normalize(np.asarray(light.direction, float)).reshape(1, 3)
    e = np.exp(np.asarray([light.log_intensity], float))
    out[mask] = shade(normals[mask], diffuse[mask], specular[mask], d, e, bank.roughness, w, view)[:, 0]
    return out
