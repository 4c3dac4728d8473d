"""Classical data-assimilation baselines on the high-resolution grid: 3D-Var and a perturbed-observation EnKF."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from . import _kernels
from .datagen import avg_pool, pool_adjoint

log = logging.getLogger(__name__)


def bilinear_upsample(u, p: int):
    """Periodic bilinear interpolation from cell centres of a coarse grid to a ``p``-times finer one."""
    u = np.asarray(u, dtype=float)
    h, w = u.shape
    ci = (np.arange(h * p) + 0.5) / p - 0.5
    cj = (np.arange(w * p) + 0.5) / p - 0.5
    ii, jj = np.meshgrid(ci, cj, indexing="ij")
    return ndimage.map_coordinates(u, [ii, jj], order=1, mode="grid-wrap")


def upsample_mask(mask, p: int):
    return np.repeat(np.repeat(np.asarray(mask, dtype=float), p, axis=-2), p, axis=-1)


def observe(x, mask, p: int):
    """Observation operator ``M * AvgPool_p(x)``."""
    return mask * avg_pool(x, p)


def observe_adjoint(v, mask, p: int):
    return pool_adjoint(mask * v, p)


# --------------------------------------------------------------------------
# 3D-Var
# --------------------------------------------------------------------------

@dataclass
class VarConfig:
    sigma_b: float = 1.0
    length: float = 0.1
    power: int = 2
    cg_tol: float = 1e-8
    cg_maxiter: int = 500

    def __post_init__(self):
        if self.sigma_b <= 0 or self.length <= 0 or self.power < 1:
            raise ValueError("need sigma_b > 0, length > 0 and power >= 1")

    def to_dict(self):
        return asdict(self)


def apply_background_precision(x, cfg: VarConfig):
    """``sigma_b^-2 (I - L^2 lap)^p x`` with the Neumann five-point Laplacian on the unit square."""
    x = np.asarray(x, dtype=float)
    h, w = x.shape
    if h != w:
        raise ValueError("the background operator assumes a square grid (equal spacing)")
    scale = (cfg.length * h) ** 2  # L^2 / dx^2 with dx = 1/H
    out = x
    for _ in range(cfg.power):
        out = out - scale * _kernels.neumann_laplacian(out)
    return out / cfg.sigma_b**2


def apply_background_covariance(x, cfg: VarConfig):
    """Exact inverse of :func:`apply_background_precision` via the DCT-II eigenbasis."""
    x = np.asarray(x, dtype=float)
    h, w = x.shape
    if h != w:
        raise ValueError("the background operator assumes a square grid (equal spacing)")
    scale = (cfg.length * h) ** 2
    lam = (2.0 * np.cos(np.pi * np.arange(h) / h) - 2.0)
    eig = (1.0 - scale * (lam[:, None] + lam[None, :])) ** cfg.power / cfg.sigma_b**2
    return sfft.idctn(sfft.dctn(x, norm="ortho") / eig, norm="ortho")


@dataclass
class VarResult:
    x: np.ndarray
    converged: bool
    iterations: int


def threedvar_analyze(y, mask, x_b, sigma_obs: float, p: int, cfg: VarConfig) -> VarResult:
    """Minimize ``1/2 |x - x_b|_B^-1^2 + 1/2 |y - H x|^2 / sigma_obs^2`` by matrix-free CG."""
    x_b = np.asarray(x_b, dtype=float)
    mask = np.asarray(mask, dtype=float)
    y = np.asarray(y, dtype=float)
    if sigma_obs <= 0:
        raise ValueError("3D-Var needs a positive observation noise level")
    shape = x_b.shape
    rinv = 1.0 / sigma_obs**2

    def matvec(v):
        v = v.reshape(shape)
        return (apply_background_precision(v, cfg)
                + rinv * observe_adjoint(observe(v, mask, p), mask, p)).ravel()

    n = x_b.size
    op = LinearOperator((n, n), matvec=matvec, dtype=float)
    # B itself is cheap to apply, which makes it a natural preconditioner
    pre = LinearOperator((n, n), matvec=lambda v: apply_background_covariance(v.reshape(shape), cfg).ravel(),
                         dtype=float)
    rhs = (apply_background_precision(x_b, cfg) + rinv * observe_adjoint(mask * y, mask, p)).ravel()
    count = [0]

    def cb(_):
        count[0] += 1

    sol, info = cg(op, rhs, x0=x_b.ravel(), rtol=cfg.cg_tol, atol=0.0, maxiter=cfg.cg_maxiter,
                   M=pre, callback=cb)
    if info != 0:
        log.warning("3D-Var CG did not reach tolerance %g in %d iterations", cfg.cg_tol, count[0])
    return VarResult(sol.reshape(shape), info == 0, count[0])


def threedvar_gradient(x, y, mask, x_b, sigma_obs, p, cfg: VarConfig):
    return (apply_background_precision(x - x_b, cfg)
            - observe_adjoint(y - observe(x, mask, p), mask, p) / sigma_obs**2)


# --------------------------------------------------------------------------
# EnKF
# --------------------------------------------------------------------------

@dataclass
class EnkfConfig:
    members: int = 16
    cycles: int = 2
    sigma_e: float = 0.25
    smooth_passes: int = 2
    final_correction: bool = True

    def __post_init__(self):
        if self.members < 2 or self.cycles < 1:
            raise ValueError("EnKF needs at least two members and one cycle")

    def to_dict(self):
        return asdict(self)


@dataclass
class EnkfResult:
    mean: np.ndarray
    ensemble: np.ndarray
    regularized: bool


def _smooth(x, passes):
    return _kernels.box_smooth(x, passes) if passes > 0 else x


def enkf_analyze(y, mask, x_b, sigma_obs: float, p: int, cfg: EnkfConfig, rng) -> EnkfResult:
    """Perturbed-observation EnKF around the background ``x_b``."""
    x_b = np.asarray(x_b, dtype=float)
    mask = np.asarray(mask, dtype=float)
    y = np.asarray(y, dtype=float)
    n_e = cfg.members
    m_hr = upsample_mask(mask, p)
    xi = rng.standard_normal((n_e,) + x_b.shape)
    ens = x_b + cfg.sigma_e * _smooth((1.0 - 0.5 * m_hr) * xi, cfg.smooth_passes)
    obs_idx = np.flatnonzero(mask.ravel() > 0)
    y_obs = y.ravel()[obs_idx]
    n_obs = obs_idx.size
    regularized = False
    if n_obs:
        for _ in range(cfg.cycles):
            hx = avg_pool(ens, p).reshape(n_e, -1)[:, obs_idx]
            ax = (ens - ens.mean(axis=0)).reshape(n_e, -1)
            ay = hx - hx.mean(axis=0)
            s = ay.T @ ay / (n_e - 1) + sigma_obs**2 * np.eye(n_obs)
            y_pert = y_obs + sigma_obs * rng.standard_normal((n_e, n_obs))
            innov = (y_pert - hx).T
            try:
                sol = cho_solve(cho_factor(s), innov)
            except LinAlgError:
                regularized = True
                jitter = 1e-10 * max(np.trace(s) / n_obs, 1e-12)
                sol = np.linalg.solve(s + jitter * np.eye(n_obs), innov)
            ens = ens + ((ax.T @ (ay @ sol)) / (n_e - 1)).T.reshape(ens.shape)
    mean = _smooth(ens.mean(axis=0), cfg.smooth_passes)
    if cfg.final_correction:
        mean = mean + upsample_mask(mask * (y - avg_pool(mean, p)), p)
    return EnkfResult(mean, ens, regularized)
