"""Latent-to-field decoder and its adjoint."""
from __future__ import annotations

import numpy as np

from .latent import RegimeSpec, forcing_modes_of, split_latent, theta_from_raw, theta_jacobian
from .spectral import (gather_forcing, irfft2_adjoint, place_forcing, spectral_resample,
                       transfer_on_grid, wavevectors)


class DecodeContext:
    """Fixed initial condition(s) and output grid, reused across many latents.

    ``u0`` is ``(h, w)`` or ``(B, h, w)``; it is spectrally resampled to
    ``shape`` once.  Latents passed to :meth:`field` / :meth:`vjp` are raw
    (denormalized) and have shape ``(d,)`` or ``(B, d)``.
    """

    def __init__(self, regime: RegimeSpec, u0, shape=None):
        u0 = np.asarray(u0, dtype=float)
        if not np.all(np.isfinite(u0)):
            raise ValueError("initial condition contains non-finite values")
        self.regime = regime
        self.shape = tuple(shape) if shape is not None else u0.shape[-2:]
        src = u0.shape[-2:]
        if any(t % s and s % t for s, t in zip(src, self.shape)):
            raise ValueError(f"initial-condition grid {src} and target {self.shape} are not "
                             "related by an integer factor")
        self.u0_hat = np.fft.rfft2(spectral_resample(u0, self.shape))
        self.kx, self.ky = wavevectors(self.shape)

    def _parts(self, z, with_grad):
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite values")
        r, q = split_latent(z)
        theta = theta_from_raw(r, self.regime)
        mult = transfer_on_grid(self.regime.family, theta, self.kx, self.ky,
                                self.regime.horizon, with_grad=with_grad)
        F = place_forcing(q, self.shape)
        return r, theta, mult, F

    def spectrum(self, z):
        _, _, (G, Hm), F = self._parts(z, False)
        return G * self.u0_hat + Hm * F

    def field(self, z):
        return np.fft.irfft2(self.spectrum(z), s=self.shape)

    def vjp(self, z, g):
        """Gradient of ``sum(g * field(z))`` with respect to the raw latent."""
        r, theta, (G, Hm, dG, dH), F = self._parts(z, True)
        gS = irfft2_adjoint(np.asarray(g, dtype=float), self.shape)
        u0h = self.u0_hat[..., None, :, :]
        dS = dG * u0h + dH * F[..., None, :, :]
        dtheta = np.real(np.conj(gS)[..., None, :, :] * dS).sum(axis=(-1, -2))
        dr = dtheta * theta_jacobian(r, self.regime)
        h, w = self.shape
        dq = gather_forcing(gS * np.conj(Hm), forcing_modes_of(z)) * (h * w)
        return np.concatenate([dr, dq], axis=-1)


def decode(z, u0_lr, regime: RegimeSpec, shape=None):
    """Decode raw latent(s) to output field(s) at ``shape`` (default: the u0 grid)."""
    return DecodeContext(regime, u0_lr, shape).field(z)
