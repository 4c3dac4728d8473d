"""Latent layout ``z = [r1, r2, r3, q]``, coefficient maps, regimes and normalization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .spectral import PdeFamily, forcing_modes_from_length

N_COEFF = 3
LOGISTIC_STD = np.pi / np.sqrt(3.0)


@dataclass(frozen=True)
class RegimeSpec:
    """A named sampling distribution over one PDE family's coefficients and forcing."""

    name: str
    family: PdeFamily
    bounds: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    forcing_std: float
    horizon: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "family", PdeFamily(self.family))
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        if len(bounds) != N_COEFF:
            raise ValueError(f"regime {self.name!r} needs exactly three intervals")
        for a, b in bounds:
            if not a < b:
                raise ValueError(f"regime {self.name!r}: empty interval [{a}, {b}]")
        object.__setattr__(self, "bounds", bounds)
        if self.forcing_std < 0:
            raise ValueError("forcing_std must be non-negative")
        if self.family is PdeFamily.HELMHOLTZ and min(a for a, _ in bounds) < 0:
            raise ValueError("Helmholtz coefficients must be positive")

    @property
    def lower(self) -> np.ndarray:
        return np.array([a for a, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b for _, b in self.bounds])

    def to_dict(self) -> dict:
        return {"name": self.name, "family": self.family.value,
                "bounds": [list(b) for b in self.bounds],
                "forcing_std": self.forcing_std, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeSpec":
        return cls(name=d["name"], family=d["family"], bounds=tuple(map(tuple, d["bounds"])),
                   forcing_std=float(d["forcing_std"]), horizon=float(d.get("horizon", 0.1)))


def load_regimes(path=None) -> dict[str, RegimeSpec]:
    """Read a regime table; defaults to the bundled six-regime table."""
    if path is None:
        text = resources.files("pdelatent").joinpath("data/regimes.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)["regimes"]
    return {name: RegimeSpec(name=name, **spec) for name, spec in raw.items()}


REGIMES = load_regimes()


def get_regime(name: str) -> RegimeSpec:
    try:
        return REGIMES[name]
    except KeyError:
        raise KeyError(f"unknown regime {name!r}; known: {sorted(REGIMES)}") from None


def latent_dim(forcing_modes: int) -> int:
    return N_COEFF + 4 * forcing_modes**2


def forcing_modes_of(z) -> int:
    return forcing_modes_from_length(np.shape(z)[-1] - N_COEFF)


def split_latent(z):
    """``(r, q)`` views of a latent array of shape ``(..., 3 + 4*M_f**2)``."""
    z = np.asarray(z, dtype=float)
    forcing_modes_of(z)
    return z[..., :N_COEFF], z[..., N_COEFF:]


def theta_from_raw(r, regime: RegimeSpec) -> np.ndarray:
    """Interval-constrained sigmoid map ``theta_j = a_j + (b_j - a_j) * sigmoid(r_j)``."""
    r = np.asarray(r, dtype=float)
    return regime.lower + (regime.upper - regime.lower) * expit(r)


def theta_jacobian(r, regime: RegimeSpec) -> np.ndarray:
    """Diagonal of d theta / d r."""
    s = expit(np.asarray(r, dtype=float))
    return (regime.upper - regime.lower) * s * (1.0 - s)


def raw_from_theta(theta, regime: RegimeSpec) -> np.ndarray:
    xi = (np.asarray(theta, dtype=float) - regime.lower) / (regime.upper - regime.lower)
    if np.any((xi <= 0) | (xi >= 1)):
        raise ValueError("theta must lie strictly inside the regime bounds")
    return logit(xi)


def sample_regime_latent(regime: RegimeSpec, rng, forcing_modes: int = 4,
                         forcing: bool = True, size=None) -> np.ndarray:
    """Raw latent whose decoded coefficients are uniform on the regime intervals."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    xi = rng.uniform(0.0, 1.0, size=shape + (N_COEFF,))
    # uniform draws at exactly 0 are possible in principle; nudge off the boundary
    xi = np.clip(xi, 1e-15, 1.0 - 1e-15)
    r = logit(xi)
    nq = 4 * forcing_modes**2
    if forcing and regime.forcing_std > 0:
        q = rng.normal(0.0, regime.forcing_std, size=shape + (nq,))
    else:
        q = np.zeros(shape + (nq,))
    return np.concatenate([r, q], axis=-1)


@dataclass
class LatentStats:
    """Coordinate-wise normalization statistics for one branch."""

    mu: np.ndarray
    sigma: np.ndarray
    branch: str = "prior"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma must be 1-D and of equal length")
        if np.any(~(self.sigma > 0)):
            raise ValueError("normalization sigma must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def _check(self, z):
        if np.shape(z)[-1] != self.dim:
            raise ValueError(f"latent length {np.shape(z)[-1]} does not match "
                             f"statistics of length {self.dim}")

    def normalize(self, z_raw):
        self._check(z_raw)
        return (np.asarray(z_raw, dtype=float) - self.mu) / self.sigma

    def denormalize(self, z):
        self._check(z)
        return np.asarray(z, dtype=float) * self.sigma + self.mu

    @classmethod
    def from_latents(cls, latents, branch: str, floor: float = 1e-6) -> "LatentStats":
        latents = np.asarray(latents, dtype=float)
        sigma = np.maximum(latents.std(axis=0), floor)
        return cls(latents.mean(axis=0), sigma, branch)

    @classmethod
    def prior(cls, regime: RegimeSpec, forcing_modes: int) -> "LatentStats":
        """Moments of :func:`sample_regime_latent` (logistic ``r``, Gaussian ``q``)."""
        d = latent_dim(forcing_modes)
        sigma = np.empty(d)
        sigma[:N_COEFF] = LOGISTIC_STD
        sigma[N_COEFF:] = regime.forcing_std if regime.forcing_std > 0 else 1.0
        return cls(np.zeros(d), sigma, "prior")

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "branch": self.branch}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(np.array(d["mu"]), np.array(d["sigma"]), d.get("branch", "prior"))
