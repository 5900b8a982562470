"""Generalized bas-relief transforms and the oracles built on them.

Vectors are stored as rows: scaled normals ``b = rho_d * n`` as (p, 3) and
scaled lights ``s = e * l`` as (n, 3), so the Lambertian image matrix is
``M = b @ s.T`` (p, n).  With the GBR matrix ``G``, normals transform as
``G^-T b`` and lights as ``G s``, which leaves every ``b . s`` unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import normalize
from .errors import RankDeficientLights, SingularG
from .shading import VIEW


@dataclass(frozen=True)
class GbrParams:
    mu: float = 0.0
    nu: float = 0.0
    lam: float = 1.0

    def __post_init__(self):
        if self.lam == 0:
            raise SingularG("lambda must be non-zero")


IDENTITY = GbrParams()


def gbr_matrix(g: GbrParams):
    """Return (G, G^-1, G^-T)."""
    if g.lam == 0:
        raise SingularG("lambda must be non-zero")
    G = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [g.mu, g.nu, g.lam]])
    Ginv = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-g.mu / g.lam, -g.nu / g.lam, 1.0 / g.lam]])
    return G, Ginv, Ginv.T


def gbr_transform(g: GbrParams, b, s):
    """(G^-T b, G s) for row vectors ``b`` (..., 3) and ``s`` (..., 3)."""
    G, Ginv, _ = gbr_matrix(g)
    return np.asarray(b, float) @ Ginv, np.asarray(s, float) @ G.T


def convex_concave_flip(b, s):
    """Mirror x and y of both normals and lights (GBR with lambda = -1, negated).

    Diffuse and specular shading are both unchanged by this map, which is
    the binary ambiguity specularities cannot remove.
    """
    _, Ginv, _ = gbr_matrix(GbrParams(0.0, 0.0, -1.0))
    G = np.diag([1.0, 1.0, -1.0])
    return -(np.asarray(b, float) @ Ginv), -(np.asarray(s, float) @ G.T)


def _specular_render(b, s, rho_s, r, view, foreshortening):
    b, s = np.atleast_2d(b), np.atleast_2d(s)
    n_hat = normalize(b)
    e = np.linalg.norm(s, axis=1)
    l_hat = normalize(s)
    h = normalize(view + l_hat)
    diffuse = b @ s.T
    ndoth = n_hat @ h.T  # (p, n)
    rho_s = np.asarray(rho_s, float)
    r = np.atleast_1d(np.asarray(r, float))
    rho_s = rho_s.reshape(len(b), -1) if rho_s.ndim else np.full((len(b), 1), float(rho_s))
    active = np.flatnonzero(np.any(rho_s != 0, axis=0))
    spec = np.zeros_like(diffuse)
    for i in active:
        spec += rho_s[:, i : i + 1] * np.exp(r[i] * (1.0 - ndoth))
    spec *= e
    if foreshortening:
        spec *= n_hat @ l_hat.T
    return diffuse + spec


def gbr_render(g: GbrParams, b, s, rho_s, r, v=VIEW, foreshortening: bool = True):
    """Render scaled normals/lights after transforming them by ``g``.

    ``m = b^.s^ + ||s^|| sum_i rho_s[i] exp(r[i] (1 - n^.h^)) (n^.l^)`` with
    hats denoting transformed quantities, ``n^ = b^/||b^||``, ``l^ = s^/||s^||``
    and ``h^`` the bisector of ``v`` and ``l^``.  No attached-shadow clamp is
    applied; callers evaluate illuminated points only.  ``foreshortening=False``
    drops the trailing ``n^.l^`` factor.

    Accepts single vectors (returns a float) or stacks b (p,3), s (n,3),
    rho_s (p,) or (p,k), r scalar or (k,) (returns (p, n)).
    """
    b_hat, s_hat = gbr_transform(g, b, s)
    out = _specular_render(b_hat, s_hat, rho_s, r, np.asarray(v, float), foreshortening)
    if np.ndim(b) == 1 and np.ndim(s) == 1:
        return float(out[0, 0])
    return out


def lambertian_solve(M, S, shadow_threshold: float = 1e-6) -> np.ndarray:
    """Least-squares scaled normals B (3, p) from M (p, n) = B^T S with S (3, n).

    Per pixel, entries below ``shadow_threshold`` are treated as attached
    shadows and dropped, unless that would leave the remaining lights rank
    deficient, in which case all entries are used.
    """
    M = np.asarray(M, float)
    S = np.asarray(S, float)
    if S.shape[0] != 3 or M.shape[1] != S.shape[1]:
        raise ValueError("expected M (p, n) and S (3, n)")
    if np.linalg.matrix_rank(S) < 3:
        raise RankDeficientLights("light matrix must have rank 3")
    valid = M >= shadow_threshold
    B = np.zeros((3, M.shape[0]))
    patterns, inverse = np.unique(valid, axis=0, return_inverse=True)
    for k, pat in enumerate(patterns):
        rows = np.flatnonzero(inverse.ravel() == k)
        cols = pat if np.linalg.matrix_rank(S[:, pat]) == 3 else np.ones_like(pat)
        sol, *_ = np.linalg.lstsq(S[:, cols].T, M[np.ix_(rows, np.flatnonzero(cols))].T, rcond=None)
        B[:, rows] = sol
    return B


# ---------------------------------------------------------------------------
# brute-force disambiguation


@dataclass
class GbrGridResult:
    mu: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    loss: np.ndarray  # (len(mu), len(nu), len(lam))

    @property
    def argmin(self) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmin(self.loss), self.loss.shape))

    @property
    def best(self) -> GbrParams:
        i, j, k = self.argmin
        return GbrParams(self.mu[i], self.nu[j], self.lam[k])

    def rows(self):
        for i, mu in enumerate(self.mu):
            for j, nu in enumerate(self.nu):
                for k, lam in enumerate(self.lam):
                    yield mu, nu, lam, self.loss[i, j, k]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mu", "nu", "lambda", "loss"])
            for row in self.rows():
                w.writerow(["%.17g" % x for x in row])


def default_grid(size: int = 9):
    """mu, nu evenly over [-1, 1]; lambda log-spaced over [0.5, 2] (contains 1 for odd sizes)."""
    return np.linspace(-1, 1, size), np.linspace(-1, 1, size), np.geomspace(0.5, 2.0, size)


def scene_factors(dataset):
    """(b, s, rho_s, r, M, lit) for mask pixels of a dataset carrying full ground truth."""
    if dataset.gt_normals is None or dataset.gt_lights is None or dataset.gt_diffuse is None:
        raise ValueError("grid search needs ground-truth normals, lights and materials")
    mask = dataset.mask
    n = dataset.gt_normals[mask]
    b = dataset.gt_diffuse[mask][:, None] * n
    s = dataset.gt_lights.intensities[:, None] * dataset.gt_lights.directions
    lit = (n @ dataset.gt_lights.directions.T) > 0
    return b, s, dataset.gt_specular[mask], dataset.gt_roughness, dataset.observations(), lit


def gbr_grid_search(b, s, rho_s, r, observed, lit=None, grid=None, view=VIEW) -> GbrGridResult:
    """Mean |gbr_render - observed| over illuminated entries for every grid cell."""
    mus, nus, lams = default_grid() if grid is None else (np.asarray(x, float) for x in grid)
    mus, nus, lams = np.atleast_1d(mus), np.atleast_1d(nus), np.atleast_1d(lams)
    observed = np.asarray(observed, float)
    lit = np.ones(observed.shape, bool) if lit is None else np.asarray(lit, bool)
    loss = np.empty((len(mus), len(nus), len(lams)))
    for i, mu in enumerate(mus):
        for j, nu in enumerate(nus):
            for k, lam in enumerate(lams):
                m_hat = gbr_render(GbrParams(mu, nu, lam), b, s, rho_s, r, view)
                loss[i, j, k] = np.mean(np.abs(m_hat - observed)[lit])
    return GbrGridResult(mus, nus, lams, loss)
