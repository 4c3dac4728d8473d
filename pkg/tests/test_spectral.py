import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdelatent.spectral import (AD_SERIES_THRESHOLD, KG_SERIES_THRESHOLD, PdeFamily, decode_forcing,
                                forward_solve, gather_forcing, place_forcing, spectral_resample,
                                transfer_multipliers, transfer_on_grid, wavevectors)

AD, KG, HZ = PdeFamily.ADVECTION_DIFFUSION, PdeFamily.KLEIN_GORDON, PdeFamily.HELMHOLTZ


def test_zero_symbol_limit_ad():
    G, H = transfer_multipliers(AD, (0.0, 0.0, 0.1), (0, 0), T=1.0)
    assert G == pytest.approx(1.0) and H == pytest.approx(1.0)


def test_kg_full_period():
    # omega = m at mode (0, 0); choose m T = 2 pi
    G, H = transfer_multipliers(KG, (1.0, 1.0, 2 * np.pi), (0, 0), T=1.0)
    assert abs(G - 1) < 1e-12 and abs(H) < 1e-12


def test_helmholtz_unit():
    G, H = transfer_multipliers(HZ, (1.0, 1.0, 1.0), (0, 0))
    assert G == pytest.approx(1.0) and H == pytest.approx(1.0)


def test_helmholtz_rejects_nonpositive_denominator():
    with pytest.raises(ValueError):
        transfer_multipliers(HZ, (1.0, 1.0, 0.0), (0, 0))


def test_nonfinite_theta_rejected():
    with pytest.raises(ValueError):
        transfer_multipliers(AD, (np.nan, 0.0, 0.1), (1, 0))


def _ad_reference(lam, T):
    # closed form without any series switch, in extended precision where possible
    import mpmath as mp
    mp.mp.dps = 40
    lt = mp.mpc(lam.real, lam.imag) * T
    return complex(mp.expm1(lt) / mp.mpc(lam.real, lam.imag))


@pytest.mark.parametrize("scale", [0.3, 0.9, 1.1, 3.0])
def test_ad_series_branch_matches_high_precision(scale):
    T = 0.1
    kx = np.array([[2 * np.pi]])
    ky = np.array([[0.0]])
    # pure advection: lambda = -i v k_x; choose v so |lambda| T = scale * threshold
    v = scale * AD_SERIES_THRESHOLD / (T * 2 * np.pi)
    _, H = transfer_on_grid(AD, (v, 0.0, 0.0), kx, ky, T)
    ref = _ad_reference(-1j * v * 2 * np.pi, T)
    assert abs(complex(H.ravel()[0]) - ref) < 1e-15


@pytest.mark.parametrize("scale", [0.3, 0.9, 1.1, 3.0])
def test_kg_series_branch_matches_closed_form(scale):
    T = 0.1
    m = scale * KG_SERIES_THRESHOLD / T
    _, H = transfer_multipliers(KG, (0.5, 0.5, m), (0, 0), T)
    x = m * T
    exact = T**2 * (0.5 - x**2 / 24 + x**4 / 720)
    assert abs(H - exact) < 1e-18


def test_cosine_heat_decay():
    n = 16
    x = np.arange(n) / n
    u0 = np.cos(2 * np.pi * x)[:, None] * np.ones((1, n))
    out = forward_solve(u0, np.zeros_like(u0), AD, (0.0, 0.0, 0.1), T=1.0)
    np.testing.assert_allclose(out, np.exp(-4 * np.pi**2 * 0.1) * u0, atol=1e-13)
    assert np.exp(-4 * np.pi**2 * 0.1) == pytest.approx(0.0193, abs=5e-5)


def test_zero_inputs_zero_output():
    z = np.zeros((8, 8))
    for fam, th in ((AD, (0.3, -0.2, 0.1)), (KG, (1.0, 1.0, 1.0)), (HZ, (0.2, 0.3, 1.0))):
        assert np.all(forward_solve(z, z, fam, th, 0.1) == 0)


def test_helmholtz_applies_to_sum_of_ic_and_forcing(rng):
    u0 = rng.standard_normal((8, 8))
    f = rng.standard_normal((8, 8))
    th = (0.2, 0.3, 1.5)
    a = forward_solve(u0, f, HZ, th, 0.0)
    b = forward_solve(u0 + f, np.zeros_like(f), HZ, th, 0.0)
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_forward_solve_shape_mismatch():
    with pytest.raises(ValueError):
        forward_solve(np.zeros((8, 8)), np.zeros((8, 16)), AD, (0, 0, 0.1))


def test_decode_forcing_zero():
    assert np.all(decode_forcing(np.zeros(64), (16, 16)) == 0)


def _direct_forcing(q, shape):
    # sine-cosine expansion evaluated point by point
    h, w = shape
    mf = int(np.sqrt(q.size / 4))
    blocks = q.reshape(2, mf, mf, 2)
    out = np.zeros(shape)
    for band in range(2):
        for a in range(mf):
            fa = a if band == 0 else a - mf
            for b in range(mf):
                re, im = blocks[band, a, b]
                wt = 1.0 if b == 0 else 2.0
                for i in range(h):
                    for j in range(w):
                        ph = 2 * np.pi * (fa * i / h + b * j / w)
                        out[i, j] += wt * (re * np.cos(ph) - im * np.sin(ph))
    return out


def test_single_forcing_mode_is_cosine():
    q = np.zeros(4 * 9)
    # band 0, row 1, column 0, real part
    q[(0 * 9 + 1 * 3 + 0) * 2] = 1.0
    f = decode_forcing(q, (12, 12))
    x = np.arange(12) / 12
    np.testing.assert_allclose(f, np.cos(2 * np.pi * x)[:, None] * np.ones((1, 12)), atol=1e-13)


def test_forcing_matches_direct_expansion(rng):
    q = rng.standard_normal(4 * 9)
    np.testing.assert_allclose(decode_forcing(q, (12, 16)), _direct_forcing(q, (12, 16)), atol=1e-12)


def test_forcing_too_small_grid():
    with pytest.raises(ValueError):
        decode_forcing(np.zeros(64), (6, 6))


def test_gather_is_adjoint_of_place(rng):
    q = rng.standard_normal(64)
    spec = rng.standard_normal((16, 9)) + 1j * rng.standard_normal((16, 9))
    lhs = np.sum((place_forcing(q, (16, 16)) * np.conj(spec)).real)
    rhs = np.dot(q, gather_forcing(spec, 4)) * 256
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_forcing_resolution_transfer(rng):
    q = rng.standard_normal(64)
    f32 = decode_forcing(q, (32, 32))
    f64 = decode_forcing(q, (64, 64))
    np.testing.assert_allclose(spectral_resample(f64, (32, 32)), f32, atol=1e-10)


def test_wavevector_shapes():
    kx, ky = wavevectors((8, 6))
    assert kx.shape == (8, 1) and ky.shape == (1, 4)
    assert kx[1, 0] == pytest.approx(2 * np.pi) and kx[-1, 0] == pytest.approx(-2 * np.pi)


theta_ad = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.02, 0.35))


@settings(max_examples=30, deadline=None)
@given(theta_ad, st.integers(0, 2**31 - 1))
def test_linearity(theta, seed):
    r = np.random.default_rng(seed)
    a, b, fa, fb = (r.standard_normal((8, 8)) for _ in range(4))
    lhs = forward_solve(a + b, fa + fb, AD, theta, 0.1)
    rhs = forward_solve(a, fa, AD, theta, 0.1) + forward_solve(b, fb, AD, theta, 0.1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([AD, KG, HZ]), st.integers(0, 2**31 - 1))
def test_realness(family, seed):
    # full complex spectrum: the multipliers must preserve Hermitian symmetry
    # (odd grid, so there is no self-conjugate Nyquist line)
    r = np.random.default_rng(seed)
    th = {AD: (0.5, -0.5, 0.1), KG: (1.0, 2.0, 0.5), HZ: (0.2, 0.4, 1.0)}[family]
    u0 = r.standard_normal((9, 9))
    kx = 2 * np.pi * np.fft.fftfreq(9, d=1 / 9)[:, None]
    ky = 2 * np.pi * np.fft.fftfreq(9, d=1 / 9)[None, :]
    G, H = transfer_on_grid(family, th, kx, ky, 0.1)
    full = np.fft.ifft2(np.fft.fft2(u0) * G + np.fft.fft2(u0) * H)
    assert np.abs(full.imag).max() < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 7), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_mode_decoupling(i, j, seed):
    r = np.random.default_rng(seed)
    u0 = r.standard_normal((8, 8))
    spec = np.fft.rfft2(u0)
    spec2 = spec.copy()
    spec2[i, j] += 1.0 + 0.5j
    th = (0.4, 0.2, 0.1)
    kx, ky = wavevectors((8, 8))
    G, _ = transfer_on_grid(AD, th, kx, ky, 0.1)
    diff = G * spec2 - G * spec
    mask = np.ones_like(diff, dtype=bool)
    mask[i, j] = False
    assert np.all(diff[mask] == 0) and abs(diff[i, j]) > 0


def test_analytic_derivatives_match_fd():
    kx, ky = wavevectors((8, 8))
    for fam, th in ((AD, np.array([0.3, -0.4, 0.12])), (KG, np.array([1.1, 0.7, 0.9])),
                    (HZ, np.array([0.2, 0.3, 1.2]))):
        _, _, dG, dH = transfer_on_grid(fam, th, kx, ky, 0.1, with_grad=True)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-6
            Gp, Hp = transfer_on_grid(fam, th + e, kx, ky, 0.1)
            Gm, Hm = transfer_on_grid(fam, th - e, kx, ky, 0.1)
            np.testing.assert_allclose(dG[j], (Gp - Gm) / 2e-6, rtol=1e-5, atol=1e-9)
            np.testing.assert_allclose(dH[j], (Hp - Hm) / 2e-6, rtol=1e-5, atol=1e-9)
