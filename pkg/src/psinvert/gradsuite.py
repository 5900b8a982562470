"""Randomized gradient checks of the differentiable pipeline.

Each configuration draws small coordinate MLPs, a few pixels and lights,
a random PSB level and (optionally trainable) roughness, then compares
reverse-mode gradients of the photometric loss against central
differences on a random subset of parameter coordinates plus every light
and roughness coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import grad_check
from .field import MlpSpec, PositionalEncoder, materials_from_raw, mlp_forward, normals_from_raw
from .optimize import photometric_loss
from .shading import Light, Material, SpecularBasisBank, psb_weights, render_pixel, roughness_ladder, shade


@dataclass
class GradSuiteResult:
    max_error: float
    checked: int
    excluded: int


def _pipeline_case(rng: np.random.Generator, n_sampled: int = 16):
    k = int(rng.integers(2, 5))
    levels = int(rng.integers(1, 4))
    hidden = int(rng.integers(4, 10))
    enc = PositionalEncoder(levels)
    P, B = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    feats = enc(rng.uniform(-1, 1, (P, 2)))
    nspec = MlpSpec(enc.width, 3, int(rng.integers(2, 4)), hidden)
    mspec = MlpSpec(enc.width, 1 + k, int(rng.integers(2, 4)), hidden)
    shapes, base = [], []
    for spec in (nspec, mspec):
        for W, b in spec.init(rng):
            shapes += [W.shape, b.shape]
            base += [W.ravel(), b.ravel()]
    dirs = rng.normal(size=(B, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    shapes += [(B, 3), (B,), (k,)]
    base += [dirs.ravel(), rng.normal(scale=0.3, size=B), np.log(-roughness_ladder(k, 300.0, 10.0))]
    flat = np.concatenate(base)
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_net = offsets[2 * (nspec.depth + mspec.depth)]
    chosen = np.union1d(rng.choice(n_net, size=min(n_sampled, n_net), replace=False), np.arange(n_net, flat.size))
    select = np.zeros((flat.size, chosen.size))
    select[chosen, np.arange(chosen.size)] = 1.0
    frozen = flat.copy()
    frozen[chosen] = 0.0
    alpha = float(rng.uniform(0, k))
    trainable = bool(rng.integers(0, 2))
    ladder = roughness_ladder(k, 300.0, 10.0)
    observed = rng.uniform(0, 1, (P, B))

    def f(tape, x):
        full = core.matmul(select, x.reshape(-1, 1)).reshape(-1) + frozen
        parts = [full[offsets[i] : offsets[i + 1]].reshape(s) for i, s in enumerate(shapes)]
        nl = [(parts[2 * i], parts[2 * i + 1]) for i in range(nspec.depth)]
        ml = [(parts[2 * i], parts[2 * i + 1]) for i in range(nspec.depth, nspec.depth + mspec.depth)]
        normals = normals_from_raw(mlp_forward(nl, feats))
        diffuse, specular = materials_from_raw(mlp_forward(ml, feats))
        d, logint, logr = parts[-3], parts[-2], parts[-1]
        r = -core.exp(logr) if trainable else ladder
        m = shade(normals, diffuse, specular, core.normalize(d), core.exp(logint), r, psb_weights(alpha, k))
        return photometric_loss(observed, m)

    return f, flat[chosen]


def _render_pixel_case(rng: np.random.Generator):
    k = int(rng.integers(1, 4))
    bank = SpecularBasisBank(np.sort(-rng.uniform(5, 300, k)))
    alpha = float(rng.uniform(0, k))
    v = np.array([0.0, 0.0, 1.0])
    n0 = rng.normal(size=3)
    n0[2] = abs(n0[2]) + 0.3
    l0 = rng.normal(size=3)
    l0[2] = abs(l0[2]) + 0.3
    x0 = np.concatenate([n0, l0, [rng.uniform(0.1, 1)], rng.uniform(0.1, 1, k), [rng.normal(scale=0.3)]])

    def f(tape, x):
        n = core.normalize(x[0:3])
        l = core.normalize(x[3:6])
        mat = Material(x[6], x[7 : 7 + k])
        return render_pixel(n, mat, Light(l, x[7 + k]), v, bank, alpha)

    return f, x0


def run(n_configs: int = 100, seed: int = 0, eps: float = 1e-5, case: str = "pipeline") -> GradSuiteResult:
    """Check ``n_configs`` random non-kink configurations."""
    rng = np.random.default_rng(seed)
    make = _pipeline_case if case == "pipeline" else _render_pixel_case
    worst, checked, excluded = 0.0, 0, 0
    while checked < n_configs:
        f, x0 = make(rng)
        err = grad_check(f, x0, eps)
        if err is None:
            excluded += 1
            if excluded > 20 * n_configs:
                raise RuntimeError("too many configurations landed on kinks")
            continue
        worst = max(worst, err)
        checked += 1
    return GradSuiteResult(worst, checked, excluded)
