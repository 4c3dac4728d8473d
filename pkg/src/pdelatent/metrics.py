"""Reconstruction metrics: RMSE, MAE, radial PSD log error, empirical CRPS."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

PSD_FLOOR = 1e-12


def _pair(u_hat, u):
    u_hat = np.asarray(u_hat, dtype=float)
    u = np.asarray(u, dtype=float)
    if u_hat.shape != u.shape:
        raise ValueError(f"shape mismatch: prediction {u_hat.shape} vs truth {u.shape}")
    return u_hat, u


def rmse(u_hat, u) -> float:
    u_hat, u = _pair(u_hat, u)
    return float(np.sqrt(np.mean((u_hat - u) ** 2)))


def mae(u_hat, u) -> float:
    u_hat, u = _pair(u_hat, u)
    return float(np.mean(np.abs(u_hat - u)))


@dataclass
class RadialPsd:
    k: np.ndarray       # integer radii 1..K_max
    power: np.ndarray   # annulus-averaged periodogram
    counts: np.ndarray  # cells per annulus


def periodogram(u) -> np.ndarray:
    """Mean-removed two-dimensional periodogram ``|FFT(u - mean)|^2 / (H W)``."""
    u = np.asarray(u, dtype=float)
    h, w = u.shape
    return np.abs(np.fft.fft2(u - u.mean())) ** 2 / (h * w)


def _annulus_index(shape):
    h, w = shape
    nx = np.fft.fftfreq(h, d=1.0 / h)[:, None]
    ny = np.fft.fftfreq(w, d=1.0 / w)[None, :]
    rad = np.hypot(nx, ny)
    # A_k = [k - 1/2, k + 1/2)  <=>  floor(rad + 1/2) == k
    return np.floor(rad + 0.5).astype(int)


def radial_psd(u) -> RadialPsd:
    u = np.asarray(u, dtype=float)
    h, w = u.shape
    if h < 4 or w < 4:
        raise ValueError("radial PSD needs a grid of at least 4x4")
    kmax = min(h, w) // 2
    idx = _annulus_index(u.shape).ravel()
    p2 = periodogram(u).ravel()
    sums = np.bincount(idx, weights=p2, minlength=kmax + 1)[1:kmax + 1]
    counts = np.bincount(idx, minlength=kmax + 1)[1:kmax + 1]
    return RadialPsd(np.arange(1, kmax + 1), sums / counts, counts)


def psd_log_err(u_hat, u, floor: float = PSD_FLOOR) -> float:
    u_hat, u = _pair(u_hat, u)
    a = np.log10(np.maximum(radial_psd(u_hat).power, floor))
    b = np.log10(np.maximum(radial_psd(u).power, floor))
    return float(np.sqrt(np.mean((a - b) ** 2)))


def crps_pointwise(members, u) -> np.ndarray:
    members = np.asarray(members, dtype=float)
    u = np.asarray(u, dtype=float)
    if members.ndim < 1 or members.shape[0] < 2:
        raise ValueError("CRPS needs an ensemble of at least two members")
    if members.shape[1:] != u.shape:
        raise ValueError(f"member shape {members.shape[1:]} does not match truth {u.shape}")
    s = members.shape[0]
    return _kernels.crps_pointwise(members.reshape(s, -1), u.ravel()).reshape(u.shape)


def crps_ensemble(members, u) -> float:
    """Grid-averaged empirical CRPS with the ``1/(2S(S-1))`` pair term."""
    return float(np.mean(crps_pointwise(members, u)))


def evaluate_fields(u_hat, u, members=None) -> dict[str, float]:
    """All metrics for one instance; CRPS only when an ensemble is given."""
    out = {"rmse": rmse(u_hat, u), "mae": mae(u_hat, u), "psd_log_err": psd_log_err(u_hat, u)}
    if members is not None and len(members) >= 2:
        out["crps"] = crps_ensemble(members, u)
    return out
