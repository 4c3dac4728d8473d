"""Experiment orchestration: data, MAP and encoder initializations, diffusion, baselines, metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .baselines import EnkfConfig, VarConfig, bilinear_upsample, enkf_analyze, threedvar_analyze
from .datagen import Dataset, build_dataset
from .decoder import DecodeContext
from .diffusion import (DiffusionTrainConfig, NoiseSchedule, SamplerConfig, ensemble_reconstruct,
                        train_denoiser)
from .latent import LatentStats, get_regime, latent_dim
from .map_inference import MapConfig, ResidualProblem, map_estimate, residual_tensor
from .metrics import crps_ensemble, mae, psd_log_err, rmse
from .nets import Denoiser, DenoiserConfig, EncoderConfig, LatentEncoder

log = logging.getLogger(__name__)

BRANCHES = ("map", "encoder")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class EncoderTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    lam_enc: float = 0.01
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _sub(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    regime: str = "diffusion"
    hr_shape: tuple = (32, 32)
    pool: int = 2
    forcing_modes: int = 4
    forcing: bool = True
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    train_sparsity: tuple = (0.01, 0.15)
    eval_sparsity: float = 0.05
    train_masks: tuple = ("random", "clustered", "line", "corners")
    eval_masks: tuple = ("grid", "boundary", "radial", "single_patch")
    sigma_obs: float = 0.15
    seed: int = 0
    scale: str = "desk"
    workers: int = 1
    map: MapConfig = field(default_factory=MapConfig)
    encoder_train: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    diffusion_train: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    var: VarConfig = field(default_factory=VarConfig)
    enkf: EnkfConfig = field(default_factory=EnkfConfig)

    _NESTED = {"map": MapConfig, "encoder_train": EncoderTrainConfig,
               "diffusion_train": DiffusionTrainConfig, "sampler": SamplerConfig,
               "var": VarConfig, "enkf": EnkfConfig}

    def __post_init__(self):
        self.hr_shape = tuple(int(v) for v in self.hr_shape)
        self.train_sparsity = tuple(float(v) for v in self.train_sparsity)
        self.train_masks = tuple(self.train_masks)
        self.eval_masks = tuple(self.eval_masks)
        if self.scale not in ("desk", "full"):
            raise ValueError("scale must be 'desk' or 'full'")
        if self.hr_shape[0] % self.pool or self.hr_shape[1] % self.pool:
            raise ValueError(f"HR grid {self.hr_shape} not divisible by pool factor {self.pool}")
        get_regime(self.regime)

    @property
    def lr_shape(self):
        return (self.hr_shape[0] // self.pool, self.hr_shape[1] // self.pool)

    @property
    def latent_dim(self):
        return latent_dim(self.forcing_modes)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (list(v) if isinstance(v, tuple) else v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        for k, sub in cls._NESTED.items():
            if k in d:
                d[k] = _sub(sub, d[k])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def encoder_config(self) -> EncoderConfig:
        seed = self.encoder_train.seed
        if self.scale == "desk":
            return EncoderConfig.desk(self.latent_dim, seed)
        return EncoderConfig(self.latent_dim, seed=seed)

    def denoiser_config(self) -> DenoiserConfig:
        seed = self.diffusion_train.seed
        if self.scale == "desk":
            return DenoiserConfig.desk(self.latent_dim, seed)
        return DenoiserConfig(self.latent_dim, seed=seed)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """JSON config file (optional) with dotted-key overrides such as ``{"map.steps": 100}``."""
    d = json.loads(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        head, _, tail = key.partition(".")
        if tail:
            d.setdefault(head, {})[tail] = value
        else:
            d[key] = value
    return ExperimentConfig.from_dict(d)


# --------------------------------------------------------------------------
# data and initializations
# --------------------------------------------------------------------------

def generate_split(cfg: ExperimentConfig, split: str) -> Dataset:
    n = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}[split]
    train = split == "train"
    return build_dataset(cfg.regime, n, split, cfg.hr_shape, cfg.pool, cfg.forcing_modes,
                         cfg.train_sparsity if train else cfg.eval_sparsity,
                         cfg.train_masks if train else cfg.eval_masks,
                         cfg.sigma_obs, cfg.seed, cfg.forcing, cfg.workers)


def residual_problem(ds: Dataset) -> ResidualProblem:
    return ResidualProblem(ds.regime, ds.y, ds.mask, ds.u0_lr, forcing_modes=ds.forcing_modes)


def fit_map(ds: Dataset, map_cfg: MapConfig, seed: int = 0, chunk: int = 64):
    """MAP latents and residuals for every sample (instances processed in fixed chunks)."""
    problem = residual_problem(ds)
    zs, res = [], []
    for lo in range(0, len(ds), chunk):
        idx = np.arange(lo, min(lo + chunk, len(ds)))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7, lo]))
        out = map_estimate(problem.subset(idx), map_cfg, rng)
        zs.append(out.z)
        res.append(out.residual)
    return np.concatenate(zs), np.concatenate(res)


def encoder_loss(model: LatentEncoder, chans, u0_lr, problem: ResidualProblem, prior: LatentStats,
                 lam_enc: float):
    z_norm = model(chans, u0_lr)
    j = residual_tensor(z_norm, problem, prior)
    reg = ad.tmean(ad.tsum(ad.square(z_norm), axis=-1))
    return ad.add(ad.tmean(j), ad.mul(reg, lam_enc)), z_norm


def train_encoder(ds: Dataset, model: LatentEncoder, cfg: EncoderTrainConfig, callback=None):
    """Fit the amortized encoder through the fixed decoder; returns per-epoch losses."""
    prior = LatentStats.prior(ds.regime, ds.forcing_modes)
    chans = ds.channels()
    problem = residual_problem(ds)
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(ds))
        tot = 0.0
        for lo in range(0, len(ds), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            opt.zero_grad()
            loss, _ = encoder_loss(model, chans[idx], ds.u0_lr[idx], problem.subset(idx), prior,
                                   cfg.lam_enc)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite encoder loss at epoch {epoch}")
            loss.backward()
            opt.step()
            tot += float(loss.data) * len(idx)
        history.append({"epoch": epoch, "loss": tot / len(ds)})
        log.info("encoder epoch %d loss %.5f", epoch, history[-1]["loss"])
        if callback is not None:
            callback(history[-1])
    return history


def encoder_predict(model: LatentEncoder, ds: Dataset, chunk: int = 128) -> np.ndarray:
    """Raw latents predicted by the encoder."""
    prior = LatentStats.prior(ds.regime, ds.forcing_modes)
    chans = ds.channels()
    out = [model(chans[lo:lo + chunk], ds.u0_lr[lo:lo + chunk]).data
           for lo in range(0, len(ds), chunk)]
    return prior.denormalize(np.concatenate(out))


def train_diffusion(ds: Dataset, latents_raw, branch: str, model: Denoiser,
                    cfg: DiffusionTrainConfig, schedule: NoiseSchedule | None = None, callback=None):
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    stats = LatentStats.from_latents(latents_raw, branch)
    hist = train_denoiser(model, stats.normalize(latents_raw), ds.channels(), ds.u0_lr,
                          residual_problem(ds), stats, cfg, schedule, callback)
    return stats, hist


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------

def hr_decoder(ds: Dataset, idx=None):
    """``z (B, K, d) -> fields (B, K, H, W)`` using spectrally upsampled LR initial conditions."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    ctx = DecodeContext(ds.regime, ds.u0_lr[idx][:, None], ds.hr_shape)
    return ctx.field


def latentpde_reconstruct(ds: Dataset, model: Denoiser, stats: LatentStats, z_init_raw,
                          sampler: SamplerConfig, seed: int = 0, chunk: int = 25):
    """Posterior ensembles for every sample of ``ds``."""
    problem = residual_problem(ds)
    chans = ds.channels()
    out = []
    for lo in range(0, len(ds), chunk):
        idx = np.arange(lo, min(lo + chunk, len(ds)))
        out.extend(ensemble_reconstruct(model, stats, chans[idx], ds.u0_lr[idx], problem.subset(idx),
                                        z_init_raw[idx], hr_decoder(ds, idx), sampler, seed,
                                        instance_ids=idx))
    return out


def baseline_background(ds: Dataset, z_raw, i: int):
    """HR background from a latent, with the IC bilinearly upsampled to the HR grid."""
    u0_hr = bilinear_upsample(ds.u0_lr[i], ds.pool_factor)
    return DecodeContext(ds.regime, u0_hr).field(z_raw[i])


def run_baselines(ds: Dataset, z_init_raw, var_cfg: VarConfig, enkf_cfg: EnkfConfig, seed: int = 0):
    """3D-Var and EnKF analyses for every sample; returns ``(var_fields, enkf_fields, backgrounds)``."""
    p = ds.pool_factor
    xv, xe, xb = [], [], []
    for i in range(len(ds)):
        bg = baseline_background(ds, z_init_raw, i)
        xb.append(bg)
        xv.append(threedvar_analyze(ds.y[i], ds.mask[i], bg, ds.sigma_obs, p, var_cfg).x)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11, i]))
        xe.append(enkf_analyze(ds.y[i], ds.mask[i], bg, ds.sigma_obs, p, enkf_cfg, rng).mean)
    return np.array(xv), np.array(xe), np.array(xb)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

RESULT_COLUMNS = ("regime", "mask_kind", "sparsity", "noise", "method", "metric", "value",
                  "seed", "instance")


def metric_rows(ds: Dataset, method: str, fields_hr, seed: int, ensembles=None):
    """Per-instance long-format rows for one method."""
    rows = []
    for i in range(len(ds)):
        truth = ds.u_out_hr[i]
        pred = fields_hr[i]
        vals = {"rmse": rmse(pred, truth), "psd_log_err": psd_log_err(pred, truth)}
        if ensembles is not None and len(ensembles[i].members) >= 2:
            vals["crps"] = crps_ensemble(ensembles[i].members, truth)
        else:
            vals["mae"] = mae(pred, truth)
        for k, v in vals.items():
            rows.append({"regime": ds.regime.name, "mask_kind": ds.mask_kind(i),
                         "sparsity": float(ds.meta[i, 0]), "noise": ds.sigma_obs,
                         "method": method, "metric": k, "value": float(v), "seed": seed,
                         "instance": int(ds.meta[i, 3])})
    return rows


def aggregate_rows(rows):
    """Mean over instances per (regime, method, metric); marked with ``instance = 'mean'``."""
    groups = {}
    for r in rows:
        if r["instance"] == "mean":
            continue
        key = (r["regime"], r["noise"], r["method"], r["metric"], r["seed"])
        groups.setdefault(key, []).append(float(r["value"]))
    out = []
    for (regime, noise, method, metric, seed), vals in sorted(groups.items()):
        out.append({"regime": regime, "mask_kind": "all", "sparsity": "all", "noise": noise,
                    "method": method, "metric": metric, "value": float(np.mean(vals)),
                    "seed": seed, "instance": "mean"})
    return out


def write_results(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary(rows) -> dict:
    """``{method: {metric: mean}}`` over per-instance rows."""
    out = {}
    for r in aggregate_rows(rows):
        out.setdefault(r["method"], {})[r["metric"]] = r["value"]
    return out


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _rel(path, root) -> str:
    return os.path.relpath(Path(path).resolve(), Path(root).resolve())


def write_manifest(out_dir, command: str, cfg: ExperimentConfig, inputs=(), outputs=(), extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.digest(),
        "inputs": {_rel(p, out_dir): file_digest(p) for p in inputs},
        "outputs": {_rel(p, out_dir): file_digest(p) for p in outputs if Path(p).exists()},
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
