"""Synthetic inverse-problem data: initial conditions, masks, observations, datasets."""
from __future__ import annotations

import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from .latent import RegimeSpec, get_regime, sample_regime_latent, split_latent, theta_from_raw
from .spectral import PdeFamily, decode_forcing, forward_solve

FORMAT_VERSION = "pdelatent-dataset/1"
IC_KINDS = ("broadband_fourier", "front", "vortex_dipole", "multiscale_gaussian_fourier")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
DENSITY_WINDOW = 7


class MaskKind(str, enum.Enum):
    RANDOM = "random"
    CLUSTERED = "clustered"
    LINE = "line"
    CORNERS = "corners"
    GRID = "grid"
    BOUNDARY = "boundary"
    RADIAL = "radial"
    SINGLE_PATCH = "single_patch"


MASK_KINDS = tuple(MaskKind)
TRAIN_MASKS = MASK_KINDS[:4]
EVAL_MASKS = MASK_KINDS[4:]


# --------------------------------------------------------------------------
# initial conditions
# --------------------------------------------------------------------------

def _grid(shape):
    h, w = shape
    x = np.arange(h)[:, None] / h
    y = np.arange(w)[None, :] / w
    return x, y


def _random_spectrum_field(shape, rng, decay, max_mode=None):
    h, w = shape
    nx = np.fft.fftfreq(h, d=1.0 / h)[:, None]
    ny = np.fft.rfftfreq(w, d=1.0 / w)[None, :]
    nn = np.hypot(nx, ny)
    amp = np.where(nn > 0, np.maximum(nn, 1.0) ** (-decay), 0.0)
    if max_mode is not None:
        amp = np.where(nn <= max_mode, amp, 0.0)
    coef = amp * (rng.normal(size=amp.shape) + 1j * rng.normal(size=amp.shape))
    return np.fft.irfft2(coef, s=shape)


def _periodic_offset(a, c):
    d = a - c
    return d - np.round(d)


def _gaussian_bump(shape, center, width):
    x, y = _grid(shape)
    dx = _periodic_offset(x, center[0])
    dy = _periodic_offset(y, center[1])
    return np.exp(-(dx**2 + dy**2) / (2.0 * width**2))


def _raw_ic(kind, shape, rng):
    if kind == "broadband_fourier":
        return _random_spectrum_field(shape, rng, decay=1.0)
    if kind == "front":
        level = _random_spectrum_field(shape, rng, decay=1.0, max_mode=2)
        level /= level.std() + 1e-300
        return np.tanh(20.0 * level)
    if kind == "vortex_dipole":
        c1 = rng.uniform(0, 1, 2)
        c2 = c1 + rng.uniform(0.1, 0.3, 2) * rng.choice([-1, 1], 2)
        w1, w2 = rng.uniform(0.05, 0.15, 2)
        return _gaussian_bump(shape, c1, w1) - _gaussian_bump(shape, c2, w2)
    if kind == "multiscale_gaussian_fourier":
        u = 0.5 * _random_spectrum_field(shape, rng, decay=1.5, max_mode=4)
        u /= max(u.std(), 1e-12)
        for _ in range(3):
            u = u + rng.normal() * 2.0 * _gaussian_bump(shape, rng.uniform(0, 1, 2), rng.uniform(0.03, 0.2))
        return u
    raise ValueError(f"unknown initial-condition kind {kind!r}; known: {IC_KINDS}")


def generate_initial_condition(kind: str, shape, rng, max_tries: int = 16) -> np.ndarray:
    """Initial condition of the named kind, standardized to zero mean and unit variance."""
    h, w = shape
    if h < 8 or w < 8:
        raise ValueError("initial conditions need at least an 8x8 grid")
    for _ in range(max_tries):
        u = _raw_ic(kind, shape, rng)
        sd = u.std()
        if sd > 1e-8:
            u = (u - u.mean()) / sd
            # second pass removes residual rounding in mean and std
            return (u - u.mean()) / u.std()
    raise RuntimeError(f"could not draw a non-constant {kind} initial condition")


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------

def observation_count(s: float, shape) -> int:
    if not 0 < s <= 1:
        raise ValueError(f"sparsity must lie in (0, 1], got {s}")
    h, w = shape
    return max(1, int(np.floor(s * h * w)))


def _take_lowest(score, n, rng):
    flat = score.ravel()
    order = np.lexsort((rng.random(flat.size), flat))
    mask = np.zeros(flat.size)
    mask[order[:n]] = 1.0
    return mask.reshape(score.shape)


def _periodic_dist_to(shape, centers):
    h, w = shape
    ii = np.arange(h)[:, None, None]
    jj = np.arange(w)[None, :, None]
    ci = np.asarray(centers)[:, 0][None, None, :]
    cj = np.asarray(centers)[:, 1][None, None, :]
    di = np.abs(ii - ci)
    dj = np.abs(jj - cj)
    di = np.minimum(di, h - di)
    dj = np.minimum(dj, w - dj)
    return np.sqrt(di**2 + dj**2)


def _segment_distance(shape, p0, p1):
    h, w = shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([ii, jj], -1).astype(float)
    d = p1 - p0
    t = np.clip(((pts - p0) @ d) / max(d @ d, 1e-12), 0.0, 1.0)
    proj = p0 + t[..., None] * d
    return np.linalg.norm(pts - proj, axis=-1)


def generate_mask(kind, s: float, shape, rng) -> np.ndarray:
    """Binary mask on ``shape`` with exactly ``max(1, floor(s*H*W))`` ones."""
    kind = MaskKind(kind)
    h, w = shape
    n = observation_count(s, shape)
    if kind is MaskKind.RANDOM:
        mask = np.zeros(h * w)
        mask[rng.choice(h * w, size=n, replace=False)] = 1.0
        return mask.reshape(shape)
    if kind is MaskKind.CLUSTERED:
        k = rng.integers(1, 5)
        centers = np.column_stack([rng.integers(0, h, k), rng.integers(0, w, k)])
        width = max(1.0, np.sqrt(n / (np.pi * k)))
        dist = _periodic_dist_to(shape, centers)
        weight = np.exp(-dist**2 / (2 * width**2)).sum(-1) + 1e-9
        mask = np.zeros(h * w)
        mask[rng.choice(h * w, size=n, replace=False, p=(weight / weight.sum()).ravel())] = 1.0
        return mask.reshape(shape)
    if kind is MaskKind.LINE:
        k = rng.integers(1, 4)
        dist = np.full(shape, np.inf)
        for _ in range(k):
            p0 = rng.uniform(0, [h - 1, w - 1])
            p1 = rng.uniform(0, [h - 1, w - 1])
            dist = np.minimum(dist, _segment_distance(shape, p0, p1))
        return _take_lowest(dist, n, rng)
    if kind is MaskKind.CORNERS:
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        di = np.minimum(ii, h - 1 - ii)
        dj = np.minimum(jj, w - 1 - jj)
        return _take_lowest(np.maximum(di, dj).astype(float), n, rng)
    if kind is MaskKind.GRID:
        stride = max(1, int(np.floor(np.sqrt(h * w / n))))
        oi, oj = rng.integers(0, stride, 2)
        lattice = np.zeros(shape)
        lattice[oi::stride, oj::stride] = 1.0
        # lattice points first (random order among them), then the rest
        return _take_lowest(1.0 - lattice, n, rng)
    if kind is MaskKind.BOUNDARY:
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        edge = np.minimum.reduce([ii, h - 1 - ii, jj, w - 1 - jj]).astype(float)
        # walk the frame in order so the kept cells form a contiguous run
        start = rng.uniform(0, 2 * np.pi)
        ang = np.mod(np.arctan2(ii - (h - 1) / 2, jj - (w - 1) / 2) - start, 2 * np.pi)
        return _take_lowest(edge * 10.0 + ang / (2 * np.pi), n, rng)
    if kind is MaskKind.RADIAL:
        c = rng.uniform(0, [h, w])
        radius = rng.uniform(0.2, 0.35) * min(h, w)
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        di = _periodic_offset(ii / h, c[0] / h) * h
        dj = _periodic_offset(jj / w, c[1] / w) * w
        r = np.hypot(di, dj)
        ang = np.arctan2(di, dj)
        rays = rng.uniform(0, 2 * np.pi) + np.arange(4) * np.pi / 2
        dang = np.abs(np.angle(np.exp(1j * (ang[..., None] - rays)))).min(-1)
        score = np.minimum(np.abs(r - radius), r * dang)
        return _take_lowest(score, n, rng)
    if kind is MaskKind.SINGLE_PATCH:
        a = int(np.ceil(np.sqrt(n)))
        b = int(np.ceil(n / a))
        a, b = min(a, h), min(max(b, int(np.ceil(n / min(a, h)))), w)
        i0, j0 = rng.integers(0, h), rng.integers(0, w)
        mask = np.zeros(shape)
        cells = [((i0 + i) % h, (j0 + j) % w) for i in range(a) for j in range(b)][:n]
        for i, j in cells:
            mask[i, j] = 1.0
        return mask
    raise AssertionError(kind)


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------

def avg_pool(u, p: int):
    """Non-overlapping ``p x p`` average pooling over the last two axes."""
    u = np.asarray(u, dtype=float)
    h, w = u.shape[-2:]
    if h % p or w % p:
        raise ValueError(f"grid {h}x{w} is not divisible by pooling factor {p}")
    return u.reshape(u.shape[:-2] + (h // p, p, w // p, p)).mean(axis=(-3, -1))


def pool_adjoint(v, p: int):
    """Adjoint of :func:`avg_pool` (spread each coarse value over its block / p^2)."""
    v = np.asarray(v, dtype=float)
    return np.repeat(np.repeat(v, p, axis=-2), p, axis=-1) / (p * p)


@dataclass
class ObservationBundle:
    y: np.ndarray
    mask: np.ndarray
    u0_lr: np.ndarray
    sigma_obs: float
    pool_factor: int
    family: PdeFamily
    regime: str = ""

    def __post_init__(self):
        if self.mask.sum() < 1:
            raise ValueError("observation mask has no observed cells")


def make_observation(u_out_hr, p: int, mask, sigma_obs: float, rng, u0_lr=None,
                     family=PdeFamily.ADVECTION_DIFFUSION, regime="") -> ObservationBundle:
    """``y = M * AvgPool_p(u_out_hr) + sigma_obs * M * eps``."""
    pooled = avg_pool(u_out_hr, p)
    mask = np.asarray(mask, dtype=float)
    if mask.shape != pooled.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pooled grid {pooled.shape}")
    eps = rng.standard_normal(pooled.shape)
    y = mask * pooled + sigma_obs * mask * eps
    if u0_lr is None:
        u0_lr = np.zeros_like(pooled)
    return ObservationBundle(y, mask, u0_lr, float(sigma_obs), int(p), PdeFamily(family), regime)


def conditioning_channels(y, mask, window: int = DENSITY_WINDOW) -> np.ndarray:
    """Stack ``[y, M, d(M), rho(M)]`` on a new axis before the grid axes."""
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if y.shape != mask.shape:
        raise ValueError(f"y shape {y.shape} does not match mask shape {mask.shape}")
    if y.ndim == 3:
        return np.stack([conditioning_channels(a, b, window) for a, b in zip(y, mask)])
    h, w = mask.shape
    dist = _kernels.periodic_distance(mask) / np.hypot(h, w)
    rho = ndimage.uniform_filter(mask, size=window, mode="wrap")
    return np.stack([y, mask, dist, rho])


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    header: dict
    z_raw: np.ndarray
    u0_hr: np.ndarray
    u0_lr: np.ndarray
    u_out_hr: np.ndarray
    u_out_lr: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    meta: np.ndarray  # (n, 4): sparsity, mask-kind index, ic-kind index, sample index

    RECORD_FIELDS = ("z_raw", "u0_hr", "u0_lr", "u_out_hr", "u_out_lr", "mask", "y", "meta")

    def __len__(self):
        return self.z_raw.shape[0]

    @property
    def regime(self) -> RegimeSpec:
        return RegimeSpec.from_dict(self.header["regime"])

    @property
    def sigma_obs(self) -> float:
        return float(self.header["sigma_obs"])

    @property
    def pool_factor(self) -> int:
        return int(self.header["pool_factor"])

    @property
    def forcing_modes(self) -> int:
        return int(self.header["forcing_modes"])

    @property
    def hr_shape(self):
        return tuple(self.header["hr_shape"])

    @property
    def lr_shape(self):
        return tuple(self.header["lr_shape"])

    def mask_kind(self, i) -> str:
        return MASK_KINDS[int(self.meta[i, 1])].value

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(dict(self.header), *(getattr(self, f)[idx] for f in self.RECORD_FIELDS))

    def channels(self, idx=None) -> np.ndarray:
        sl = slice(None) if idx is None else idx
        return conditioning_channels(self.y[sl], self.mask[sl])

    def save(self, path):
        from .storage import write_records
        write_records(path, dict(self.header, format=FORMAT_VERSION),
                      {f: getattr(self, f) for f in self.RECORD_FIELDS})

    @classmethod
    def load(cls, path) -> "Dataset":
        from .storage import read_container
        header, arrays = read_container(path)
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a dataset file (format {header.get('format')!r})")
        return cls(header, *(arrays[f] for f in cls.RECORD_FIELDS))


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per (seed, split, index); splits never share a stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLIT_CODES[split], int(index)]))


def generate_sample(regime: RegimeSpec, index: int, split: str, seed: int, hr_shape, pool: int,
                    forcing_modes: int, sparsity, mask_kinds, sigma_obs: float, forcing: bool = True,
                    ic_kinds=IC_KINDS) -> dict:
    rng = sample_rng(seed, split, index)
    lr_shape = (hr_shape[0] // pool, hr_shape[1] // pool)
    ic_idx = int(rng.integers(len(ic_kinds)))
    u0_hr = generate_initial_condition(ic_kinds[ic_idx], hr_shape, rng)
    z = sample_regime_latent(regime, rng, forcing_modes, forcing=forcing)
    r, q = split_latent(z)
    theta = theta_from_raw(r, regime)
    u_out_hr = forward_solve(u0_hr, decode_forcing(q, hr_shape), regime.family, theta, regime.horizon)
    u0_lr = avg_pool(u0_hr, pool)
    u_out_lr = forward_solve(u0_lr, decode_forcing(q, lr_shape), regime.family, theta, regime.horizon)
    if np.ndim(sparsity) == 0:
        s = float(sparsity)
    else:
        s = float(rng.uniform(*sparsity))
    kind = MaskKind(mask_kinds[int(rng.integers(len(mask_kinds)))])
    mask = generate_mask(kind, s, lr_shape, rng)
    obs = make_observation(u_out_hr, pool, mask, sigma_obs, rng)
    meta = np.array([s, MASK_KINDS.index(kind), IC_KINDS.index(ic_kinds[ic_idx]), index], dtype=float)
    return dict(z_raw=z, u0_hr=u0_hr, u0_lr=u0_lr, u_out_hr=u_out_hr, u_out_lr=u_out_lr,
                mask=mask, y=obs.y, meta=meta)


def _sample_star(args):
    return generate_sample(*args)


def build_dataset(regime, n: int, split: str = "train", hr_shape=(32, 32), pool: int = 2,
                  forcing_modes: int = 4, sparsity=None, mask_kinds=None, sigma_obs: float = 0.15,
                  seed: int = 0, forcing: bool = True, workers: int = 1) -> Dataset:
    """Generate ``n`` independent samples for one regime and split.

    ``sparsity`` is a fixed fraction or a ``(low, high)`` range; defaults are
    ``(0.01, 0.15)`` for training and ``0.05`` otherwise.  Mask kinds default to
    the four training generators for ``train`` and the four structured
    generators otherwise.
    """
    if isinstance(regime, str):
        regime = get_regime(regime)
    if split not in SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(SPLIT_CODES)}")
    hr_shape = tuple(int(v) for v in hr_shape)
    if hr_shape[0] % pool or hr_shape[1] % pool:
        raise ValueError(f"HR grid {hr_shape} not divisible by pooling factor {pool}")
    if sparsity is None:
        sparsity = (0.01, 0.15) if split == "train" else 0.05
    if mask_kinds is None:
        mask_kinds = TRAIN_MASKS if split == "train" else EVAL_MASKS
    mask_kinds = tuple(MaskKind(k).value for k in mask_kinds)
    args = [(regime, i, split, seed, hr_shape, pool, forcing_modes, sparsity, mask_kinds,
             sigma_obs, forcing) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            samples = list(ex.map(_sample_star, args, chunksize=max(1, n // (4 * workers))))
    else:
        samples = [_sample_star(a) for a in args]
    fields = {f: np.stack([s[f] for s in samples]) for f in Dataset.RECORD_FIELDS}
    lr_shape = [hr_shape[0] // pool, hr_shape[1] // pool]
    header = {
        "format": FORMAT_VERSION,
        "regime": regime.to_dict(),
        "split": split,
        "seed": int(seed),
        "n": int(n),
        "hr_shape": list(hr_shape),
        "lr_shape": lr_shape,
        "pool_factor": int(pool),
        "forcing_modes": int(forcing_modes),
        "forcing": bool(forcing),
        "sigma_obs": float(sigma_obs),
        "sparsity": list(sparsity) if np.ndim(sparsity) else float(sparsity),
        "mask_kinds": list(mask_kinds),
        "mask_kind_table": [k.value for k in MASK_KINDS],
        "ic_kind_table": list(IC_KINDS),
    }
    return Dataset(header, **fields)


def load_dataset(path) -> Dataset:
    return Dataset.load(Path(path))
