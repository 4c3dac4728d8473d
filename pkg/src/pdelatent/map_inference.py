"""Masked residual objective and multi-restart MAP estimation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import adam_step
from .decoder import DecodeContext
from .latent import LatentStats, RegimeSpec, latent_dim, theta_from_raw, theta_jacobian
from .spectral import place_forcing, transfer_on_grid

RESIDUAL_EPS = 1e-8


class ResidualProblem:
    """Masked residual ``J`` for one or a batch of observation bundles.

    ``y``, ``mask``, ``u0_lr`` have shape ``(h, w)`` or ``(B, h, w)``.  The
    decoder runs at the observation grid.  ``value`` and ``value_and_grad``
    accept raw latents whose leading axes broadcast against the batch, e.g.
    ``(R, B, d)`` for ``R`` restarts per instance.
    """

    def __init__(self, regime: RegimeSpec, y, mask, u0_lr, eps: float = RESIDUAL_EPS,
                 forcing_modes: int = 4):
        self.regime = regime
        self.forcing_modes = forcing_modes
        self.y = np.asarray(y, dtype=float)
        self.mask = np.asarray(mask, dtype=float)
        if self.y.shape != self.mask.shape:
            raise ValueError(f"y shape {self.y.shape} does not match mask shape {self.mask.shape}")
        u0_lr = np.asarray(u0_lr, dtype=float)
        if u0_lr.shape[-2:] != self.y.shape[-2:]:
            raise ValueError(f"initial condition grid {u0_lr.shape[-2:]} differs from "
                             f"observation grid {self.y.shape[-2:]}")
        self.u0_lr = u0_lr
        self.eps = eps
        self.ctx = DecodeContext(regime, u0_lr)
        self.denom = self.mask.sum(axis=(-1, -2)) + eps

    @property
    def batch(self) -> int | None:
        return self.y.shape[0] if self.y.ndim == 3 else None

    def subset(self, idx) -> "ResidualProblem":
        return ResidualProblem(self.regime, self.y[idx], self.mask[idx], self.u0_lr[idx], self.eps,
                               self.forcing_modes)

    def _misfit(self, z):
        u = self.ctx.field(z)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("decoded field is not finite")
        return self.mask * (u - self.y)

    def value(self, z):
        r = self._misfit(z)
        return (r * r).sum(axis=(-1, -2)) / self.denom

    def _mode_table(self):
        # complex exponentials and half-spectrum weights of the retained forcing modes
        if getattr(self, "_modes", None) is None:
            h, w = self.ctx.shape
            mf = self.forcing_modes
            rows = np.concatenate([np.arange(mf), h - mf + np.arange(mf)])
            ri, ci = np.meshgrid(rows, np.arange(mf), indexing="ij")
            ri, ci = ri.ravel(), ci.ravel()
            fi = np.where(ri < h // 2, ri, ri - h)
            x = np.arange(h)[:, None] / h
            y = np.arange(w)[None, :] / w
            phase = np.exp(2j * np.pi * (fi[:, None, None] * x + ci[:, None, None] * y))
            weight = np.where(ci == 0, 1.0, 2.0)
            self._modes = (ri, ci, phase * weight[:, None, None])
        return self._modes

    def affine_in_forcing(self, r):
        """Decoded field as ``base + sum_j q_j basis_j`` for fixed coefficient coordinates ``r``.

        Returns ``base`` with shape ``lead + (h, w)`` and ``basis`` with shape
        ``lead + (n_q, h, w)``; the decoder is exactly affine in ``q``.
        """
        ctx = self.ctx
        theta = theta_from_raw(r, self.regime)
        G, Hm = transfer_on_grid(self.regime.family, theta, ctx.kx, ctx.ky, self.regime.horizon)
        base = np.fft.irfft2(G * ctx.u0_hat, s=ctx.shape)
        ri, ci, phase = self._mode_table()
        hp = Hm[..., ri, ci][..., None, None] * phase  # lead + (2 M_f^2, h, w)
        # q layout (band, row, col, re/im): re -> Re(H e), im -> Re(i H e) = -Im(H e)
        basis = np.stack([hp.real, -hp.imag], axis=-3)
        basis = basis.reshape(hp.shape[:-3] + (2 * hp.shape[-3],) + hp.shape[-2:])
        return base, basis

    def best_forcing(self, r, lam: float = 0.0):
        """``argmin_q J(r, q) + lam ||q||^2``.

        With ``lam = 0`` a relative ridge of ``1e-12`` picks the (numerically)
        minimum-norm solution among exact minimizers.
        """
        base, basis = self.affine_in_forcing(r)
        w = np.sqrt(self.mask / self.denom[..., None, None])
        lead = basis.shape[:-3]
        nq = basis.shape[-3]
        a = (basis * w[..., None, :, :]).reshape(lead + (nq, -1))
        rhs = ((self.y - base) * w).reshape(lead + (-1,))
        normal = a @ np.swapaxes(a, -1, -2)
        ridge = lam if lam > 0 else 1e-12 * np.trace(normal, axis1=-2, axis2=-1)[..., None, None] / nq
        normal = normal + ridge * np.eye(nq)
        return np.linalg.solve(normal, (a @ rhs[..., None]))[..., 0]

    def value_and_grad(self, z):
        r = self._misfit(z)
        val = (r * r).sum(axis=(-1, -2)) / self.denom
        g = 2.0 * self.mask * r / self.denom[..., None, None]
        return val, self.ctx.vjp(z, g)


def masked_residual(z, y, mask, u0_lr, regime: RegimeSpec, eps: float = RESIDUAL_EPS):
    return ResidualProblem(regime, y, mask, u0_lr, eps).value(z)


def residual_gradient(z, y, mask, u0_lr, regime: RegimeSpec, eps: float = RESIDUAL_EPS):
    return ResidualProblem(regime, y, mask, u0_lr, eps).value_and_grad(z)[1]


def residual_tensor(z_norm: ad.Tensor, problem: ResidualProblem, stats: LatentStats) -> ad.Tensor:
    """Per-instance ``J`` of normalized latents as a differentiable tape node."""
    z_raw = stats.denormalize(z_norm.data)
    val, g_raw = problem.value_and_grad(z_raw)
    g_norm = g_raw * stats.sigma
    return ad.custom_op(val, [z_norm], [lambda g: g[..., None] * g_norm])


@dataclass
class MapConfig:
    steps: int = 300
    restarts: int = 3
    lam: float = 0.01
    lr: float = 0.05
    lr_final: float = 0.005
    init_r_std: float = 1.0
    init_q_std: float = 0.1
    eps: float = RESIDUAL_EPS
    # "projected": Adam over the coefficient coordinates with the forcing solved
    # exactly at every step; "joint": Adam over the whole latent
    solver: str = "projected"
    # random candidates screened per restart by the projected objective
    screen: int = 8
    # Levenberg-Marquardt evaluations on the projected residual after Adam
    polish_steps: int = 50

    def __post_init__(self):
        if self.solver not in ("projected", "joint"):
            raise ValueError(f"unknown MAP solver {self.solver!r}")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("MAP needs at least one step and one restart")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    def to_dict(self):
        return asdict(self)

    def lr_at(self, step: int) -> float:
        if self.steps == 1:
            return self.lr
        c = 0.5 * (1.0 + np.cos(np.pi * step / (self.steps - 1)))
        return self.lr_final + (self.lr - self.lr_final) * c


@dataclass
class MapResult:
    z: np.ndarray            # (B, d) or (d,)
    residual: np.ndarray     # raw masked residual of the returned latent
    restart_residuals: np.ndarray  # (R, B) or (R,)
    best_restart: np.ndarray


def _init_restarts(cfg: MapConfig, rng, lead, d):
    z = np.empty(lead + (d,))
    z[..., :3] = rng.normal(0.0, cfg.init_r_std, lead + (3,))
    z[..., 3:] = rng.normal(0.0, cfg.init_q_std, lead + (d - 3,))
    return z


def optimize_latent(problem: ResidualProblem, z0, cfg: MapConfig, anchor=None):
    """Adam on ``J(z) + lam * ||z - anchor||^2`` from ``z0``; returns the final latent.

    Rows that turn non-finite are frozen at their last finite value and
    flagged in the returned ``ok`` mask.
    """
    z = np.array(z0, dtype=float)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    ok = np.ones(z.shape[:-1], dtype=bool)
    ref = 0.0 if anchor is None else anchor
    for step in range(cfg.steps):
        with np.errstate(all="ignore"):
            try:
                _, g = problem.value_and_grad(z)
            except FloatingPointError:
                g = np.full_like(z, np.nan)
        g = g + 2.0 * cfg.lam * (z - ref)
        bad = ~np.all(np.isfinite(g), axis=-1)
        ok &= ~bad
        g[~ok] = 0.0
        z_new, m, v = adam_step(z, g, m, v, step + 1, cfg.lr_at(step))
        z = np.where(ok[..., None], z_new, z)
    return z, ok


def optimize_projected(problem: ResidualProblem, z0, cfg: MapConfig):
    """Adam over ``r`` on ``min_q J(r, q) + lam ||q||^2``.

    The decoder is affine in ``q``, so the inner minimum is a small ridge
    solve; by the envelope theorem the outer gradient is ``dJ/dr`` at the
    inner optimum.
    """
    r = np.array(z0[..., :3], dtype=float)
    m = np.zeros_like(r)
    v = np.zeros_like(r)
    ok = np.ones(r.shape[:-1], dtype=bool)
    for step in range(cfg.steps):
        with np.errstate(all="ignore"):
            try:
                q = problem.best_forcing(r, cfg.lam)
                _, g = problem.value_and_grad(np.concatenate([r, q], axis=-1))
                g = g[..., :3] + 2.0 * cfg.lam * r
            except (FloatingPointError, np.linalg.LinAlgError):
                g = np.full_like(r, np.nan)
        bad = ~np.all(np.isfinite(g), axis=-1)
        ok &= ~bad
        g[~ok] = 0.0
        r_new, m, v = adam_step(r, g, m, v, step + 1, cfg.lr_at(step))
        r = np.where(ok[..., None], r_new, r)
    with np.errstate(all="ignore"):
        q = problem.best_forcing(r, cfg.lam)
    ok &= np.all(np.isfinite(q), axis=-1)
    return np.concatenate([r, np.where(ok[..., None], q, 0.0)], axis=-1), ok


def projected_objective(problem: ResidualProblem, r, lam: float):
    q = problem.best_forcing(r, lam)
    z = np.concatenate([r, q], axis=-1)
    return problem.value(z) + lam * (z * z).sum(axis=-1)


def _screen_restarts(problem, cfg, rng, lead, d, z0):
    # draw cfg.screen candidates per restart; keep the best by projected objective
    cand = _init_restarts(cfg, rng, (cfg.screen,) + lead, d)
    z0 = np.concatenate([z0[None], cand[1:]], axis=0)
    with np.errstate(all="ignore"):
        obj = np.stack([projected_objective(problem, c[..., :3], cfg.lam) for c in z0])
    obj = np.where(np.isfinite(obj), obj, np.inf)
    # distinct restarts: rank candidates jointly over (screen, restart) per instance
    flat = obj.reshape((-1,) + obj.shape[2:])
    zf = z0.reshape((-1,) + z0.shape[2:])
    order = np.argsort(flat, axis=0, kind="stable")[:cfg.restarts]
    if problem.batch is None:
        return zf[order]
    return zf[order, np.arange(problem.batch)[None, :]]


def _projected_residual(problem: ResidualProblem, r, lam):
    """Weighted misfit at the optimal forcing for ``r`` and its Jacobian in ``r``.

    The Jacobian is the Kaufman form of the variable-projection derivative:
    the coefficient sensitivities at fixed forcing, with the component that
    the forcing can absorb projected out.
    """
    ctx = problem.ctx
    q = problem.best_forcing(r, lam)
    theta = theta_from_raw(r, problem.regime)
    G, Hm, dG, dH = transfer_on_grid(problem.regime.family, theta, ctx.kx, ctx.ky,
                                     problem.regime.horizon, with_grad=True)
    F = place_forcing(q, ctx.shape)
    w = np.sqrt(problem.mask / problem.denom).ravel()
    u = np.fft.irfft2(G * ctx.u0_hat + Hm * F, s=ctx.shape).ravel()
    du = np.fft.irfft2(dG * ctx.u0_hat + dH * F, s=ctx.shape).reshape(3, -1)
    du = (du * theta_jacobian(r, problem.regime)[:, None]).T * w[:, None]
    _, basis = problem.affine_in_forcing(r)
    a = basis.reshape(basis.shape[0], -1).T * w[:, None]
    if lam > 0:
        a = np.concatenate([a, np.sqrt(lam) * np.eye(a.shape[1])])
        du = np.concatenate([du, np.zeros((a.shape[1], 3))])
    coef = np.linalg.lstsq(a, du, rcond=1e-12)[0]
    jac = du - a @ coef
    res = w * (u - problem.y.ravel())
    if lam > 0:
        res = np.concatenate([res, np.sqrt(lam) * q])
        res = np.concatenate([res, np.sqrt(lam) * r])
        jac = np.concatenate([jac, np.sqrt(lam) * np.eye(3)])
    return res, jac


def polish(problem: ResidualProblem, z, ok, cfg: MapConfig):
    """Levenberg-Marquardt over ``r`` on the forcing-projected residual."""
    from scipy.optimize import least_squares

    z = np.array(z)
    flat_z = z.reshape(-1, z.shape[-1])
    flat_ok = np.broadcast_to(ok, z.shape[:-1]).ravel()
    nb = problem.batch
    for k in range(flat_z.shape[0]):
        if not flat_ok[k]:
            continue
        sub = problem if nb is None else problem.subset(k % nb)
        cache = {}

        def fun(x):
            cache["rj"] = _projected_residual(sub, x, cfg.lam)
            cache["x"] = x.copy()
            return cache["rj"][0]

        def jac(x):
            if "x" not in cache or not np.array_equal(cache["x"], x):
                fun(x)
            return cache["rj"][1]

        start = flat_z[k, :3]
        try:
            f0 = fun(start)
            sol = least_squares(fun, start, jac=jac, method="lm", max_nfev=cfg.polish_steps,
                                xtol=1e-15, ftol=1e-15, gtol=1e-15)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            continue
        if np.all(np.isfinite(sol.x)) and sol.cost <= 0.5 * np.sum(f0 ** 2):
            flat_z[k] = np.concatenate([sol.x, sub.best_forcing(sol.x, cfg.lam)])
    return flat_z.reshape(z.shape)


def map_estimate(problem: ResidualProblem, cfg: MapConfig, rng) -> MapResult:
    """Multi-restart MAP; each instance keeps the restart with the lowest raw residual."""
    nb = problem.batch
    lead = (cfg.restarts,) if nb is None else (cfg.restarts, nb)
    d = latent_dim(problem.forcing_modes)
    z0 = _init_restarts(cfg, rng, lead, d)
    if cfg.screen > 1:
        z0 = _screen_restarts(problem, cfg, rng, lead, d, z0)
    if cfg.solver == "joint":
        z, ok = optimize_latent(problem, z0, cfg)
    else:
        z, ok = optimize_projected(problem, z0, cfg)
    if cfg.polish_steps > 0:
        z = polish(problem, z, ok, cfg)
    with np.errstate(all="ignore"):
        res = problem.value(np.where(ok[..., None], z, 0.0))
    res = np.where(ok & np.isfinite(res), res, np.inf)
    if np.any(np.all(~np.isfinite(res), axis=0)):
        bad = np.flatnonzero(np.atleast_1d(np.all(~np.isfinite(res), axis=0)))
        raise FloatingPointError(f"all {cfg.restarts} MAP restarts diverged for instance(s) "
                                 f"{bad.tolist()}")
    best = np.argmin(res, axis=0)  # first minimum wins ties
    if nb is None:
        return MapResult(z[best], res[best], res, np.asarray(best))
    cols = np.arange(nb)
    return MapResult(z[best, cols], res[best, cols], res, best)

