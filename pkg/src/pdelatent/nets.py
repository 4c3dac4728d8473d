"""Networks: sparse-observation CNN, initial-condition CNN, latent encoder, FiLM denoiser."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .storage import read_container, write_tensors

CHECKPOINT_FORMAT = "pdelatent-checkpoint/1"


class Module:
    """Container of named parameter tensors and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._children.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"parameter {k}: stored shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=float)

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, scale=1.0):
        super().__init__()
        self.w = self.param("w", _he(rng, n_in, (n_in, n_out)) * scale)
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class Conv(Module):
    def __init__(self, c_in, c_out, rng, k=3, stride=1):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        self.w = self.param("w", _he(rng, c_in * k * k, (c_out, c_in, k, k)))
        self.b = self.param("b", np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, self.stride, self.pad)


class GroupNorm(Module):
    def __init__(self, c, groups):
        super().__init__()
        self.groups = groups
        self.g = self.param("g", np.ones(c))
        self.b = self.param("b", np.zeros(c))

    def __call__(self, x):
        return ad.group_norm(x, self.groups, self.g, self.b)


class LayerNorm(Module):
    def __init__(self, d):
        super().__init__()
        self.g = self.param("g", np.ones(d))
        self.b = self.param("b", np.zeros(d))

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b)


def _groups(c):
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class ConvStack(Module):
    """Conv + GroupNorm + GELU layers, then global average pooling."""

    def __init__(self, c_in, layers, rng):
        super().__init__()
        self.blocks = []
        c = c_in
        for i, (c_out, stride) in enumerate(layers):
            conv = self.child(f"conv{i}", Conv(c, c_out, rng, stride=stride))
            norm = self.child(f"norm{i}", GroupNorm(c_out, _groups(c_out)))
            self.blocks.append((conv, norm))
            c = c_out
        self.out_channels = c

    def __call__(self, x):
        for conv, norm in self.blocks:
            x = ad.gelu(norm(conv(x)))
        return ad.global_avg_pool(x)


def sparse_layers(channels):
    """Six convolutions over three widths; the first conv of widths 2 and 3 has stride 2."""
    c1, c2, c3 = channels
    return [(c1, 1), (c1, 1), (c2, 2), (c2, 1), (c3, 2), (c3, 1)]


class SparseObsEncoder(Module):
    """``[y, M, d(M), rho(M)]`` stack -> observation embedding ``c_obs``."""

    def __init__(self, channels, out_dim, rng):
        super().__init__()
        self.cnn = self.child("cnn", ConvStack(4, sparse_layers(channels), rng))
        self.fc1 = self.child("fc1", Linear(self.cnn.out_channels, out_dim, rng))
        self.fc2 = self.child("fc2", Linear(out_dim, out_dim, rng))
        self.out_dim = out_dim

    def __call__(self, chans):
        chans = ad.as_tensor(chans)
        if chans.ndim != 4 or chans.shape[1] != 4:
            raise ValueError(f"sparse encoder expects (B, 4, H, W) input, got {chans.shape}")
        return self.fc2(ad.gelu(self.fc1(self.cnn(chans))))


class IcEncoder(Module):
    """Low-resolution initial condition -> ``c_u0``; three convs, two with stride 2."""

    def __init__(self, channels, out_dim, rng):
        super().__init__()
        c1, c2, c3 = channels
        self.cnn = self.child("cnn", ConvStack(1, [(c1, 1), (c2, 2), (c3, 2)], rng))
        self.fc = self.child("fc", Linear(c3, out_dim, rng))
        self.out_dim = out_dim

    def __call__(self, u0):
        u0 = ad.as_tensor(u0)
        if u0.ndim == 3:
            u0 = ad.reshape(u0, (u0.shape[0], 1) + u0.shape[1:])
        return self.fc(self.cnn(u0))


class Mlp(Module):
    """``depth`` linear layers; LayerNorm + GELU between them."""

    def __init__(self, n_in, hidden, n_out, depth, rng):
        super().__init__()
        self.layers = []
        dims = [n_in] + [hidden] * (depth - 1) + [n_out]
        for i in range(depth):
            lin = self.child(f"lin{i}", Linear(dims[i], dims[i + 1], rng,
                                                scale=0.1 if i == depth - 1 else 1.0))
            norm = self.child(f"norm{i}", LayerNorm(dims[i + 1])) if i < depth - 1 else None
            self.layers.append((lin, norm))

    def __call__(self, x):
        for lin, norm in self.layers:
            x = lin(x)
            if norm is not None:
                x = ad.gelu(norm(x))
        return x


@dataclass
class EncoderConfig:
    latent_dim: int
    obs_channels: tuple = (64, 128, 256)
    obs_dim: int = 256
    ic_channels: tuple = (32, 64, 128)
    ic_dim: int = 128
    hidden: int = 512
    depth: int = 4
    seed: int = 0

    @classmethod
    def desk(cls, latent_dim, seed=0):
        return cls(latent_dim, (16, 32, 64), 64, (8, 16, 32), 32, 128, 4, seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["obs_channels"] = tuple(d["obs_channels"])
        d["ic_channels"] = tuple(d["ic_channels"])
        return cls(**d)


class LatentEncoder(Module):
    """Amortized map ``(y, M, u0_lr) -> normalized latent``."""

    kind = "encoder"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.obs = self.child("obs", SparseObsEncoder(cfg.obs_channels, cfg.obs_dim, rng))
        self.ic = self.child("ic", IcEncoder(cfg.ic_channels, cfg.ic_dim, rng))
        self.head = self.child("head", Mlp(cfg.obs_dim + cfg.ic_dim, cfg.hidden, cfg.latent_dim,
                                           cfg.depth, rng))

    def __call__(self, chans, u0_lr):
        c = ad.concat([self.obs(chans), self.ic(u0_lr)], axis=-1)
        return self.head(c)


@dataclass
class DenoiserConfig:
    latent_dim: int
    hidden: int = 512
    blocks: int = 6
    obs_channels: tuple = (64, 128, 256)
    obs_dim: int = 256
    ic_channels: tuple = (32, 64, 128)
    ic_dim: int = 128
    time_dim: int = 128
    seed: int = 0

    @property
    def cond_dim(self) -> int:
        return self.obs_dim + self.ic_dim + self.time_dim

    @classmethod
    def desk(cls, latent_dim, seed=0):
        return cls(latent_dim, 128, 6, (16, 32, 64), 64, (8, 16, 32), 32, 32, seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["obs_channels"] = tuple(d["obs_channels"])
        d["ic_channels"] = tuple(d["ic_channels"])
        return cls(**d)


class FilmBlock(Module):
    """Linear + LayerNorm + GELU, FiLM-modulated by the conditioning vector, with a skip."""

    def __init__(self, hidden, cond_dim, rng):
        super().__init__()
        self.lin = self.child("lin", Linear(hidden, hidden, rng, scale=0.5))
        self.norm = self.child("norm", LayerNorm(hidden))
        self.film = self.child("film", Linear(cond_dim, 2 * hidden, rng, scale=0.1))
        self.hidden = hidden

    def __call__(self, h, cond):
        ss = self.film(cond)
        scale = ad.add(1.0, _cols(ss, 0, self.hidden))
        shift = _cols(ss, self.hidden, 2 * self.hidden)
        return ad.add(h, ad.film_modulate(ad.gelu(self.norm(self.lin(h))), scale, shift))


def _cols(x, lo, hi):
    idx = np.arange(lo, hi)
    return ad.custom_op(x.data[..., lo:hi], [x], [lambda g: _scatter_cols(g, x.shape, idx)])


def _scatter_cols(g, shape, idx):
    out = np.zeros(shape)
    out[..., idx] = g
    return out


class Denoiser(Module):
    """Noise predictor ``eps(z_t, c_obs, c_u0, t)`` with a learned null conditioning."""

    kind = "denoiser"

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.obs = self.child("obs", SparseObsEncoder(cfg.obs_channels, cfg.obs_dim, rng))
        self.ic = self.child("ic", IcEncoder(cfg.ic_channels, cfg.ic_dim, rng))
        self.null = self.param("null", rng.normal(0.0, 0.02, cfg.obs_dim + cfg.ic_dim))
        self.t1 = self.child("t1", Linear(cfg.time_dim, cfg.time_dim, rng))
        self.t2 = self.child("t2", Linear(cfg.time_dim, cfg.time_dim, rng))
        self.inp = self.child("inp", Linear(cfg.latent_dim, cfg.hidden, rng))
        self.blocks = [self.child(f"block{i}", FilmBlock(cfg.hidden, cfg.cond_dim, rng))
                       for i in range(cfg.blocks)]
        self.out_norm = self.child("out_norm", LayerNorm(cfg.hidden))
        self.out = self.child("out", Linear(cfg.hidden, cfg.latent_dim, rng, scale=0.1))

    def condition(self, chans, u0_lr, drop=None):
        """Observation/IC conditioning ``[c_obs, c_u0]``; rows with ``drop`` True use the null embedding."""
        c = ad.concat([self.obs(chans), self.ic(u0_lr)], axis=-1)
        if drop is None or not np.any(drop):
            return c
        keep = (~np.asarray(drop, dtype=bool)).astype(float)[:, None]
        return ad.add(ad.mul(c, keep), ad.mul(ad.reshape(self.null, (1, -1)), 1.0 - keep))

    def null_condition(self, batch: int):
        return ad.mul(ad.reshape(self.null, (1, -1)), np.ones((batch, 1)))

    def forward_from_condition(self, z_t, cond, t_frac):
        z_t = ad.as_tensor(z_t)
        emb = ad.sinusoidal_time_embed(np.broadcast_to(t_frac, (z_t.shape[0],)), self.cfg.time_dim)
        c_t = self.t2(ad.gelu(self.t1(Tensor(emb))))
        full = ad.concat([cond, c_t], axis=-1)
        h = self.inp(z_t)
        for blk in self.blocks:
            h = blk(h, full)
        return self.out(ad.gelu(self.out_norm(h)))

    def __call__(self, z_t, chans, u0_lr, t_frac, drop=None):
        return self.forward_from_condition(z_t, self.condition(chans, u0_lr, drop), t_frac)


def save_checkpoint(path, model: Module, header: dict):
    hdr = dict(header, format=CHECKPOINT_FORMAT, kind=model.kind, config=model.cfg.to_dict())
    write_tensors(path, hdr, model.state_dict())


def load_checkpoint(path):
    """Return ``(model, header)``; the model class comes from the header's ``kind``."""
    header, tensors = read_container(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format {header.get('format')!r})")
    if header["kind"] == "encoder":
        model = LatentEncoder(EncoderConfig.from_dict(header["config"]))
    elif header["kind"] == "denoiser":
        model = Denoiser(DenoiserConfig.from_dict(header["config"]))
    else:
        raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
    model.load_state_dict(tensors)
    return model, header
