"""FFT solver for linear, constant-coefficient PDEs on the periodic unit square.

Each Fourier mode evolves independently, so a solve is one multiplication
per mode:

    u_out_hat(k) = G(k) * u0_hat(k) + H(k) * f_hat(k)

Integer FFT indices ``n`` map to physical wavevectors ``k = 2*pi*n``.
Axis 0 of every field is ``x``, axis 1 is ``y``.  Forward transforms are
unnormalized and inverse transforms carry the ``1/(H*W)`` factor (numpy's
default); the transfer multipliers do not depend on that choice.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy import signal

# branch switches to the series form of the forcing multiplier
AD_SERIES_THRESHOLD = 1e-6   # on |lambda| * T
KG_SERIES_THRESHOLD = 1e-4   # on omega * T
# derivatives cancel earlier than the values, so they switch later
_KG_DERIV_SERIES = 1e-2
_AD_DERIV_SERIES = 1e-4


class PdeFamily(str, enum.Enum):
    ADVECTION_DIFFUSION = "advection_diffusion"
    KLEIN_GORDON = "klein_gordon"
    HELMHOLTZ = "helmholtz"

    @property
    def evolutionary(self) -> bool:
        return self is not PdeFamily.HELMHOLTZ

    @property
    def parameter_names(self) -> tuple[str, str, str]:
        return {
            PdeFamily.ADVECTION_DIFFUSION: ("v_x", "v_y", "kappa"),
            PdeFamily.KLEIN_GORDON: ("c_x", "c_y", "m"),
            PdeFamily.HELMHOLTZ: ("kappa_x", "kappa_y", "k"),
        }[self]


def wavevectors(shape):
    """Physical wavevectors on the rfft half plane, shaped to broadcast.

    Returns ``kx`` with shape ``(H, 1)`` and ``ky`` with shape ``(1, W//2 + 1)``.
    """
    h, w = shape
    kx = 2.0 * np.pi * np.fft.fftfreq(h, d=1.0 / h)[:, None]
    ky = 2.0 * np.pi * np.fft.rfftfreq(w, d=1.0 / w)[None, :]
    return kx, ky


def _split_theta(theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != 3:
        raise ValueError(f"theta must have a trailing axis of length 3, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains non-finite values")
    return [theta[..., j, None, None] for j in range(3)]


def _advection_diffusion(theta, kx, ky, T, with_grad):
    vx, vy, kappa = _split_theta(theta)
    k2 = kx**2 + ky**2
    lam = -1j * (vx * kx + vy * ky) - kappa * k2
    lt = lam * T
    G = np.exp(lt)
    small = np.abs(lt) < AD_SERIES_THRESHOLD
    safe = np.where(small, 1.0, lam)
    Hm = np.where(small, T * (1.0 + lt / 2.0 + lt**2 / 6.0), np.expm1(lt) / safe)
    if not with_grad:
        return G, Hm
    dG_dlam = T * G
    dsmall = np.abs(lt) < _AD_DERIV_SERIES
    safe_d = np.where(dsmall, 1.0, lam)
    dH_dlam = np.where(dsmall, T**2 * (0.5 + lt / 3.0 + lt**2 / 8.0 + lt**3 / 30.0),
                       (T * G - Hm) / safe_d)
    dlam = [-1j * kx * np.ones_like(vx), -1j * ky * np.ones_like(vy), -k2 * np.ones_like(kappa)]
    dG = np.stack(np.broadcast_arrays(*[dG_dlam * d for d in dlam]), axis=-3)
    dH = np.stack(np.broadcast_arrays(*[dH_dlam * d for d in dlam]), axis=-3)
    return G, Hm, dG, dH


def _klein_gordon(theta, kx, ky, T, with_grad):
    cx, cy, m = _split_theta(theta)
    s = cx**2 * kx**2 + cy**2 * ky**2 + m**2
    w = np.sqrt(s)
    x = w * T
    G = np.cos(x)
    small = x < KG_SERIES_THRESHOLD
    safe_s = np.where(small, 1.0, s)
    Hm = np.where(small, T**2 * (0.5 - x**2 / 24.0 + x**4 / 720.0),
                  2.0 * np.sin(x / 2.0) ** 2 / safe_s)
    if not with_grad:
        return G, Hm
    dsmall = x < _KG_DERIV_SERIES
    safe_x = np.where(dsmall, 1.0, x)
    u = x**2
    # G = cos(sqrt(u)), H = T^2 g(u) with g(u) = (1 - cos sqrt(u)) / u, u = s T^2
    dG_ds = np.where(dsmall, -(T**2 / 2.0) * (1.0 - u / 6.0 + u**2 / 120.0),
                     -T * np.sin(safe_x) / (2.0 * np.where(dsmall, 1.0, w)))
    gprime = np.where(dsmall,
                      -1.0 / 24.0 + 2.0 * u / 720.0 - 3.0 * u**2 / 40320.0 + 4.0 * u**3 / 3628800.0,
                      (safe_x * np.sin(safe_x) / 2.0 - 2.0 * np.sin(safe_x / 2.0) ** 2) / safe_x**4)
    dH_ds = T**4 * gprime
    ds = [2.0 * cx * kx**2, 2.0 * cy * ky**2, 2.0 * m * np.ones_like(kx * ky)]
    dG = np.stack(np.broadcast_arrays(*[dG_ds * d for d in ds]), axis=-3).astype(complex)
    dH = np.stack(np.broadcast_arrays(*[dH_ds * d for d in ds]), axis=-3).astype(complex)
    return G.astype(complex), Hm.astype(complex), dG, dH


def _helmholtz(theta, kx, ky, T, with_grad):
    kapx, kapy, k = _split_theta(theta)
    D = kapx * kx**2 + kapy * ky**2 + k**2
    if np.any(D <= 0):
        raise ValueError("Helmholtz denominator is not strictly positive; "
                         "kappa_x, kappa_y and k must be > 0")
    G = (1.0 / D).astype(complex)
    if not with_grad:
        return G, G
    dG_dD = -1.0 / D**2
    dD = [kx**2 * np.ones_like(kapx), ky**2 * np.ones_like(kapy), 2.0 * k * np.ones_like(kx * ky)]
    dG = np.stack(np.broadcast_arrays(*[dG_dD * d for d in dD]), axis=-3).astype(complex)
    return G, G, dG, dG


_TRANSFER = {
    PdeFamily.ADVECTION_DIFFUSION: _advection_diffusion,
    PdeFamily.KLEIN_GORDON: _klein_gordon,
    PdeFamily.HELMHOLTZ: _helmholtz,
}


def transfer_on_grid(family, theta, kx, ky, T, with_grad=False):
    """Transfer multipliers ``(G, H)`` evaluated on broadcastable wavevectors.

    ``theta`` has shape ``(..., 3)``; the result has shape
    ``(..., *broadcast(kx, ky).shape)``.  With ``with_grad`` the derivatives
    with respect to the three parameters are also returned, stacked on a new
    axis just before the two spatial axes: ``(..., 3, Hk, Wk)``.
    """
    family = PdeFamily(family)
    if family.evolutionary and not np.isfinite(T):
        raise ValueError("horizon T must be finite")
    return _TRANSFER[family](theta, kx, ky, float(T), with_grad)


def transfer_multipliers(family, theta, mode, T=1.0):
    """``(G, H)`` for a single integer Fourier mode ``(n_x, n_y)``."""
    nx, ny = mode
    kx = np.array([[2.0 * np.pi * nx]])
    ky = np.array([[2.0 * np.pi * ny]])
    G, Hm = transfer_on_grid(family, theta, kx, ky, T)
    return complex(np.asarray(G).reshape(-1)[0]), complex(np.asarray(Hm).reshape(-1)[0])


# --------------------------------------------------------------------------
# forcing layout
# --------------------------------------------------------------------------

def forcing_modes_from_length(n):
    """Retained mode count ``M_f`` for a forcing vector of length ``4*M_f**2``."""
    mf = int(round(np.sqrt(n / 4.0)))
    if 4 * mf * mf != n:
        raise ValueError(f"forcing vector length {n} is not of the form 4*M_f^2")
    return mf


def _forcing_rows(h, mf):
    return np.arange(mf), h - mf + np.arange(mf)


def place_forcing(q, shape):
    """Scatter forcing coefficients into an rfft half spectrum at ``shape``.

    ``q`` has shape ``(..., 4*M_f**2)``, laid out as ``(band, row, col, re/im)``
    with band 0 holding row frequencies ``0..M_f-1`` and band 1 holding
    ``-M_f..-1``; columns are frequencies ``0..M_f-1``.  The returned spectrum
    is scaled by ``H*W`` so the decoded field is independent of resolution.
    """
    q = np.asarray(q, dtype=float)
    h, w = shape
    mf = forcing_modes_from_length(q.shape[-1])
    # row -M_f must not be the self-conjugate Nyquist row
    if h <= 2 * mf or w <= 2 * mf:
        raise ValueError(f"resolution {shape} too small for {mf} retained forcing modes "
                         f"(need more than {2 * mf} per axis)")
    blocks = q.reshape(q.shape[:-1] + (2, mf, mf, 2))
    coef = (blocks[..., 0] + 1j * blocks[..., 1]) * (h * w)
    spec = np.zeros(q.shape[:-1] + (h, w // 2 + 1), dtype=complex)
    pos, neg = _forcing_rows(h, mf)
    spec[..., pos, :mf] = coef[..., 0, :, :]
    spec[..., neg, :mf] = coef[..., 1, :, :]
    return spec


def gather_forcing(spec, mf):
    """Adjoint companion of :func:`place_forcing`: read the retained block.

    Returns real and imaginary parts of the block entries, laid out like ``q``
    (without the ``H*W`` scale).
    """
    h = spec.shape[-2]
    pos, neg = _forcing_rows(h, mf)
    block = np.stack([spec[..., pos, :mf], spec[..., neg, :mf]], axis=-3)
    out = np.stack([block.real, block.imag], axis=-1)
    return out.reshape(spec.shape[:-2] + (4 * mf * mf,))


def decode_forcing(q, shape):
    """Real forcing field at ``shape`` from low-mode coefficients ``q``."""
    return np.fft.irfft2(place_forcing(q, shape), s=shape)


# --------------------------------------------------------------------------
# solves and resampling
# --------------------------------------------------------------------------

def spectral_resample(u, shape):
    """Band-limited interpolation (or truncation) of periodic fields to ``shape``.

    Works on the last two axes; Nyquist components are split or folded
    symmetrically so the output stays real.
    """
    u = np.asarray(u, dtype=float)
    h, w = shape
    if u.shape[-2] != h:
        u = signal.resample(u, h, axis=-2)
    if u.shape[-1] != w:
        u = signal.resample(u, w, axis=-1)
    return u


def forward_solve(u0, f, family, theta, T=1.0):
    """Solve one PDE on the grid of ``u0`` with steady forcing ``f``.

    Fields may carry leading batch axes that broadcast against ``theta[..., :]``.
    """
    u0 = np.asarray(u0, dtype=float)
    f = np.asarray(f, dtype=float)
    if u0.shape[-2:] != f.shape[-2:]:
        raise ValueError(f"u0 grid {u0.shape[-2:]} does not match forcing grid {f.shape[-2:]}")
    if not (np.all(np.isfinite(u0)) and np.all(np.isfinite(f))):
        raise ValueError("non-finite input field")
    shape = u0.shape[-2:]
    kx, ky = wavevectors(shape)
    G, Hm = transfer_on_grid(family, theta, kx, ky, T)
    spec = G * np.fft.rfft2(u0) + Hm * np.fft.rfft2(f)
    return np.fft.irfft2(spec, s=shape)


def half_spectrum_weights(shape):
    """Multiplicity of each rfft column in the real inverse transform."""
    w = shape[1]
    wt = np.full(w // 2 + 1, 2.0)
    wt[0] = 1.0
    if w % 2 == 0:
        wt[-1] = 1.0
    return wt[None, :]


def irfft2_adjoint(g, shape):
    """Gradient of ``<g, irfft2(S)>`` with respect to ``S`` (as ``dRe + i dIm``)."""
    h, w = shape
    return np.fft.rfft2(g) * half_spectrum_weights(shape) / (h * w)
