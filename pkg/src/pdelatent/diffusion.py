"""Latent DDPM: schedule, training with an observation term, guided posterior sampling, ensembles."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, adam_step
from .latent import LatentStats
from .map_inference import ResidualProblem, residual_tensor
from .nets import Denoiser

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """Linear variance schedule over ``T`` steps (1-indexed in the public API)."""

    T: int = 400
    beta_start: float = 2.5e-4
    beta_end: float = 0.05

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """``alpha_bar_t`` for integer ``t`` in ``0..T`` (``alpha_bar_0 = 1``)."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])

    def start_step(self, sigma_init):
        """Largest ``t`` with ``sqrt(1 - alpha_bar_t) <= sigma_init`` (0 if none)."""
        s = np.sqrt(1.0 - self.alpha_bars)
        return np.searchsorted(s, np.asarray(sigma_init), side="right")

    def to_dict(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def forward_noise(z0, t, schedule: NoiseSchedule, rng, eps=None):
    """Sample ``q(z_t | z_0) = N(sqrt(ab_t) z_0, (1 - ab_t) I)``; returns ``(z_t, eps)``."""
    t = np.asarray(t)
    if np.any((t < 1) | (t > schedule.T)):
        raise ValueError(f"diffusion step must lie in 1..{schedule.T}")
    z0 = np.asarray(z0, dtype=float)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar(t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (z0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps, eps


def predict_clean(z_t, eps_hat, alpha_bar):
    """``z0_hat = (z_t - sqrt(1 - ab) eps_hat) / sqrt(ab)``."""
    return (z_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class DiffusionTrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    lam_obs: float = 8.0
    p_drop: float = 0.1
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def diffusion_loss(model: Denoiser, z0, chans, u0_lr, problem: ResidualProblem,
                   stats: LatentStats, schedule: NoiseSchedule, t, eps, drop, lam_obs):
    """Denoising MSE plus ``lam_obs * mean(ab_t * J(z0_hat))``; returns ``(loss, parts)``."""
    ab = schedule.alpha_bar(t)[:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    eps_hat = model(z_t, chans, u0_lr, t / schedule.T, drop=drop)
    l_den = ad.mse(eps_hat, eps)
    loss = l_den
    l_obs = 0.0
    if lam_obs > 0:
        z0_hat = ad.mul(ad.add(z_t, ad.mul(eps_hat, -np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))
        j = residual_tensor(z0_hat, problem, stats)
        obs = ad.tmean(ad.mul(j, ab[:, 0]))
        loss = ad.add(loss, ad.mul(obs, lam_obs))
        l_obs = float(obs.data)
    return loss, {"denoise": float(l_den.data), "obs": l_obs}


def train_denoiser(model: Denoiser, latents_norm, chans, u0_lr, problem: ResidualProblem,
                   stats: LatentStats, cfg: DiffusionTrainConfig,
                   schedule: NoiseSchedule | None = None, callback=None):
    """Fit the denoiser on normalized branch latents; returns per-epoch mean losses."""
    schedule = schedule or NoiseSchedule()
    if latents_norm.shape[1] != model.cfg.latent_dim:
        raise ValueError(f"latent length {latents_norm.shape[1]} != model latent dim "
                         f"{model.cfg.latent_dim}")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    n = latents_norm.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        tot, parts_tot, count = 0.0, {"denoise": 0.0, "obs": 0.0}, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            b = len(idx)
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal((b, latents_norm.shape[1]))
            drop = rng.random(b) < cfg.p_drop
            opt.zero_grad()
            loss, parts = diffusion_loss(model, latents_norm[idx], chans[idx], u0_lr[idx],
                                         problem.subset(idx), stats, schedule, t, eps, drop,
                                         cfg.lam_obs)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite diffusion loss at epoch {epoch}, "
                                         f"batch starting {lo}: {parts}")
            loss.backward()
            opt.step()
            tot += float(loss.data) * b
            for k in parts_tot:
                parts_tot[k] += parts[k] * b
            count += b
        rec = {"epoch": epoch, "loss": tot / count, **{k: v / count for k, v in parts_tot.items()}}
        history.append(rec)
        log.info("diffusion epoch %d loss %.5f", epoch, rec["loss"])
        if callback is not None:
            callback(rec)
    return history


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    sigma_init_low: float = 0.3
    sigma_init_high: float = 0.6
    window: float = 0.8
    eta_g: float = 0.10
    gamma_g: float = 80.0
    inner_steps: int = 3
    clip: float = 5.0
    refine_steps: int = 20
    lam_ref: float = 0.01
    refine_lr: float = 0.05
    members: int = 12
    guidance: bool = True

    def __post_init__(self):
        if not 0 <= self.sigma_init_low <= self.sigma_init_high:
            raise ValueError("need 0 <= sigma_init_low <= sigma_init_high")
        if not 0 < self.window <= 1:
            raise ValueError("guidance window fraction must lie in (0, 1]")
        if self.members < 1:
            raise ValueError("need at least one ensemble member")

    def to_dict(self):
        return asdict(self)


@dataclass
class PosteriorEnsemble:
    members: np.ndarray   # (K, H, W) decoded fields
    latents: np.ndarray   # (K, d) raw latents
    ok: np.ndarray        # (K,) member success flags

    @property
    def mean(self):
        return self.members.mean(axis=0)

    @property
    def std(self):
        return self.members.std(axis=0)


def _guidance_grad(problem, stats, z0_hat):
    # gradient of J with respect to the normalized latent
    _, g_raw = problem.value_and_grad(stats.denormalize(z0_hat))
    return g_raw * stats.sigma


def guide(z0_hat, problem: ResidualProblem, stats: LatentStats, cfg: SamplerConfig):
    """Clipped gradient steps on the masked residual of the clean-latent estimate."""
    step = cfg.eta_g * cfg.gamma_g
    for _ in range(cfg.inner_steps):
        with np.errstate(all="ignore"):
            g = _guidance_grad(problem, stats, z0_hat)
        g = np.where(np.isfinite(g), g, 0.0)
        z0_hat = z0_hat - step * np.clip(g, -cfg.clip, cfg.clip)
    return z0_hat


def refine(z, problem: ResidualProblem, stats: LatentStats, cfg: SamplerConfig):
    """Adam on ``J(z) + lam_ref ||z - z_diff||^2``; ``lam_ref = 0`` disables refinement."""
    if cfg.lam_ref <= 0 or cfg.refine_steps <= 0:
        return z
    anchor = z.copy()
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for step in range(cfg.refine_steps):
        with np.errstate(all="ignore"):
            g = _guidance_grad(problem, stats, z) + 2.0 * cfg.lam_ref * (z - anchor)
        g = np.where(np.isfinite(g), g, 0.0)
        z, m, v = adam_step(z, g, m, v, step + 1, cfg.refine_lr)
    return z


def reverse_chain(model: Denoiser, cond, z_init_norm, problem: ResidualProblem, stats: LatentStats,
                  schedule: NoiseSchedule, cfg: SamplerConfig, rng, sigma_init=None):
    """Run the guided reverse chain for a batch of chains sharing nothing but the model.

    ``cond`` is the per-chain conditioning tensor data ``(N, c)``; ``problem``
    is batched over the same ``N`` chains.  Returns normalized latents after
    optional refinement and a per-chain success flag.
    """
    z_init_norm = np.asarray(z_init_norm, dtype=float)
    n, d = z_init_norm.shape
    if sigma_init is None:
        sigma_init = rng.uniform(cfg.sigma_init_low, cfg.sigma_init_high, size=n)
    sigma_init = np.broadcast_to(np.asarray(sigma_init, dtype=float), (n,))
    t_start = schedule.start_step(sigma_init)
    ab0 = schedule.alpha_bar(t_start)[:, None]
    z = np.sqrt(ab0) * z_init_norm + np.sqrt(1.0 - ab0) * rng.standard_normal((n, d))
    z0_hat = z.copy()
    cond_t = Tensor(cond)
    t_window = cfg.window * schedule.T
    for t in range(int(t_start.max()), 0, -1):
        active = t_start >= t
        if not np.any(active):
            continue
        idx = np.flatnonzero(active)
        ab = schedule.alpha_bar(t)
        ab_prev = schedule.alpha_bar(t - 1)
        beta = schedule.betas[t - 1]
        eps_hat = model.forward_from_condition(z[idx], Tensor(cond_t.data[idx]), t / schedule.T).data
        zh = predict_clean(z[idx], eps_hat, ab)
        if cfg.guidance and t < t_window:
            zh = guide(zh, problem.subset(idx), stats, cfg)
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
        mean = c0 * zh + ct * z[idx]
        if t > 1:
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            # draw for every chain so each chain's stream does not depend on the others
            mean = mean + np.sqrt(var) * rng.standard_normal((n, d))[idx]
        z[idx] = mean
        z0_hat[idx] = zh
    ok = np.all(np.isfinite(z), axis=1)
    z = np.where(ok[:, None], z, 0.0)
    z = refine(z, problem, stats, cfg)
    ok &= np.all(np.isfinite(z), axis=1)
    return z, ok


def member_rng(seed: int, instance: int, member: int = 0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(instance), int(member)]))


def ensemble_reconstruct(model: Denoiser, stats: LatentStats, chans, u0_lr, problem: ResidualProblem,
                         z_init_raw, decode_fn, cfg: SamplerConfig, seed: int = 0,
                         schedule: NoiseSchedule | None = None, instance_ids=None):
    """Posterior ensembles for a batch of ``B`` instances.

    ``chans (B, 4, h, w)``, ``u0_lr (B, h, w)``, ``problem`` batched over
    ``B``, ``z_init_raw (B, d)``.  ``decode_fn(z_raw (B, K, d)) -> (B, K, H, W)``
    maps latents to fields at the target grid.  Member ``k`` of instance ``i``
    draws from its own stream ``(seed, instance_ids[i], k)``.
    """
    schedule = schedule or NoiseSchedule()
    if stats.branch not in ("map", "encoder", "prior"):
        raise ValueError(f"unknown branch tag {stats.branch!r}")
    z_init_raw = np.asarray(z_init_raw, dtype=float)
    b, d = z_init_raw.shape
    k = cfg.members
    ids = np.arange(b) if instance_ids is None else np.asarray(instance_ids)
    cond = model.condition(chans, u0_lr).data                      # (B, c)
    cond = np.repeat(cond, k, axis=0)
    z_init = np.repeat(stats.normalize(z_init_raw), k, axis=0)
    rep = np.repeat(np.arange(b), k)
    chain_problem = problem.subset(rep)
    # per-chain randomness from per-(instance, member) streams, consumed in a fixed order
    rngs = [member_rng(seed, ids[i], m) for i in range(b) for m in range(k)]
    sigma = np.array([r.uniform(cfg.sigma_init_low, cfg.sigma_init_high) for r in rngs])
    z, ok = reverse_chain(model, cond, z_init, chain_problem, stats, schedule, cfg,
                          _StackedRng(rngs), sigma_init=sigma)
    z_raw = stats.denormalize(z).reshape(b, k, d)
    ok = ok.reshape(b, k)
    fields = decode_fn(z_raw)
    out = []
    for i in range(b):
        if ok[i].sum() < math.ceil(k / 2):
            raise FloatingPointError(f"instance {ids[i]}: only {ok[i].sum()} of {k} posterior "
                                     "members finished with finite latents")
        out.append(PosteriorEnsemble(fields[i][ok[i]], z_raw[i][ok[i]], ok[i]))
    return out


class _StackedRng:
    """Row-wise normal draws where row ``i`` comes from generator ``i``."""

    def __init__(self, rngs):
        self.rngs = rngs

    def standard_normal(self, shape):
        n = shape[0]
        if n == len(self.rngs):
            return np.stack([r.standard_normal(shape[1:]) for r in self.rngs])
        raise ValueError("stacked generator needs one row per chain")


def estimate_ensemble_size(members, eps_ens: float) -> int:
    """``K = ceil(tr(Sigma) / (d eps^2))`` from pilot members ``(S, ...)``."""
    members = np.asarray(members, dtype=float)
    if members.shape[0] < 2:
        raise ValueError("pilot ensemble needs at least two members")
    flat = members.reshape(members.shape[0], -1)
    tr = flat.var(axis=0, ddof=1).sum()
    d = flat.shape[1]
    if tr <= 0:
        return 1
    return max(1, int(math.ceil(tr / (d * eps_ens**2) - 1e-12)))


def ensemble_size_for_ratio(eta: float) -> int:
    """Members needed for MC std of the mean to be at most ``eta`` of the posterior std."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return int(math.ceil(1.0 / eta**2 - 1e-12))
