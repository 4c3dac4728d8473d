import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from pdelatent.decoder import DecodeContext, decode
from pdelatent.latent import (REGIMES, LatentStats, get_regime, latent_dim, raw_from_theta,
                              sample_regime_latent, split_latent, theta_from_raw)
from pdelatent.spectral import decode_forcing, forward_solve, spectral_resample

REFERENCE_REGIMES = {
    "diffusion": ("advection_diffusion", [(-1, 1), (-1, 1), (0.02, 0.35)], 0.30),
    "advection": ("advection_diffusion", [(-3, 3), (-3, 3), (0.001, 0.08)], 0.30),
    "balanced": ("advection_diffusion", [(-2, 2), (-2, 2), (0.01, 0.20)], 0.40),
    "forcing": ("advection_diffusion", [(-1.5, 1.5), (-1.5, 1.5), (0.01, 0.20)], 1.00),
    "klein_gordon": ("klein_gordon", [(0.4, 2.8), (0.4, 2.8), (0.3, 3.5)], 0.45),
    "helmholtz": ("helmholtz", [(0.03, 0.55), (0.03, 0.55), (0.4, 3.5)], 0.55),
}


def test_regime_table():
    assert set(REGIMES) == set(REFERENCE_REGIMES)
    for name, (fam, bounds, tau) in REFERENCE_REGIMES.items():
        r = get_regime(name)
        assert r.family.value == fam
        assert [tuple(b) for b in r.bounds] == [tuple(map(float, b)) for b in bounds]
        assert r.forcing_std == tau


def test_unknown_regime():
    with pytest.raises(KeyError):
        get_regime("nope")


def test_latent_length():
    assert latent_dim(12) == 579
    assert latent_dim(4) == 67


def test_midpoint_and_saturation():
    reg = get_regime("diffusion")
    np.testing.assert_allclose(theta_from_raw(np.zeros(3), reg), [0.0, 0.0, 0.185])
    assert abs(theta_from_raw(np.full(3, 20.0), reg) - reg.upper).max() < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.sampled_from(sorted(REFERENCE_REGIMES)))
def test_bounds_and_round_trip(r, name):
    reg = get_regime(name)
    th = theta_from_raw(np.array(r), reg)
    assert np.all(th >= reg.lower) and np.all(th <= reg.upper)
    inner = np.abs(np.array(r)) < 15
    if inner.all():
        np.testing.assert_allclose(raw_from_theta(th, reg), r, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.floats(0.01, 5))
def test_monotone(r, dr):
    reg = get_regime("klein_gordon")
    a = theta_from_raw(np.array([r, r, r]), reg)
    b = theta_from_raw(np.array([r + dr] * 3), reg)
    assert np.all(b > a)


def test_uniform_coefficients():
    rng = np.random.default_rng(0)
    reg = get_regime("advection")
    z = sample_regime_latent(reg, rng, size=10_000)
    kappa = theta_from_raw(z[:, :3], reg)[:, 2]
    se = (0.08 - 0.001) / np.sqrt(12) / 100
    assert abs(kappa.mean() - (0.001 + 0.08) / 2) < 3 * se
    th1 = theta_from_raw(z[:5000, :3], reg)[:, 0]
    assert sps.kstest(th1, sps.uniform(loc=-3, scale=6).cdf).pvalue > 0.01


def test_forcing_disabled_is_zero():
    z = sample_regime_latent(get_regime("forcing"), np.random.default_rng(0), forcing=False)
    assert np.all(split_latent(z)[1] == 0)


def test_normalize_round_trip(rng):
    z = rng.standard_normal((20, 67)) * 3 + 1
    st_ = LatentStats.from_latents(z, "map")
    zn = st_.normalize(z)
    np.testing.assert_allclose(zn.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(zn.std(axis=0), 1, atol=1e-6)
    assert np.abs(st_.denormalize(zn) - z).max() < 1e-12
    ident = LatentStats(np.zeros(67), np.ones(67))
    assert np.all(ident.normalize(z) == z)


def test_stats_validation():
    with pytest.raises(ValueError):
        LatentStats(np.zeros(3), np.array([1.0, 0.0, 1.0]))
    s = LatentStats(np.zeros(67), np.ones(67))
    with pytest.raises(ValueError):
        s.normalize(np.zeros(579))
    assert LatentStats.from_dict(s.to_dict()).dim == 67


# ----------------------------------------------------------------- decoder


def test_decode_reproduces_generator(rng):
    reg = get_regime("klein_gordon")
    z = sample_regime_latent(reg, rng)
    u0 = rng.standard_normal((16, 16))
    th = theta_from_raw(z[:3], reg)
    ref = forward_solve(u0, decode_forcing(z[3:], (16, 16)), reg.family, th, reg.horizon)
    np.testing.assert_allclose(decode(z, u0, reg), ref, atol=1e-12)


def test_decode_super_resolution_consistency(rng):
    reg = get_regime("diffusion")
    z = sample_regime_latent(reg, rng)
    u0 = rng.standard_normal((16, 16))
    a = decode(z, u0, reg, (32, 32))
    b = decode(z, u0, reg, (64, 64))
    np.testing.assert_allclose(spectral_resample(b, (32, 32)), a, atol=1e-10)


def test_decode_pool_vs_band_limit(rng):
    # characterization only: LR decode vs pooled HR decode differ by a bounded amount
    reg = get_regime("diffusion")
    z = sample_regime_latent(reg, rng)
    u0 = rng.standard_normal((16, 16))
    lr = decode(z, u0, reg)
    hr = decode(z, u0, reg, (32, 32))
    pooled = hr.reshape(16, 2, 16, 2).mean(axis=(1, 3))
    gap = np.sqrt(np.mean((lr - pooled) ** 2)) / np.sqrt(np.mean(lr**2))
    assert gap < 0.5


def test_decode_resolution_mismatch():
    reg = get_regime("diffusion")
    with pytest.raises(ValueError):
        DecodeContext(reg, np.zeros((16, 16)), (24, 24))
    with pytest.raises(ValueError):
        decode(np.zeros(10), np.zeros((16, 16)), reg)


def test_decode_batched_matches_single(rng):
    reg = get_regime("helmholtz")
    z = sample_regime_latent(reg, rng, size=3)
    u0 = rng.standard_normal((3, 12, 12))
    ctx = DecodeContext(reg, u0)
    batched = ctx.field(z)
    for i in range(3):
        np.testing.assert_allclose(batched[i], decode(z[i], u0[i], reg), atol=1e-13)


def test_vjp_matches_fd(rng):
    from conftest import fd_grad, rel_err
    for name in ("diffusion", "klein_gordon", "helmholtz"):
        reg = get_regime(name)
        z = sample_regime_latent(reg, rng)
        u0 = rng.standard_normal((12, 12))
        g = rng.standard_normal((12, 12))
        ctx = DecodeContext(reg, u0)
        num = fd_grad(lambda v: float(np.sum(g * ctx.field(v))), z)
        assert rel_err(ctx.vjp(z, g), num) < 1e-6
