import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from pdelatent.latent import get_regime, sample_regime_latent, theta_from_raw
from pdelatent.map_inference import (MapConfig, ResidualProblem, map_estimate, masked_residual,
                                     projected_objective, residual_gradient)
from pdelatent.spectral import decode_forcing, forward_solve


def make_problem(rng, name="diffusion", shape=(12, 12), frac=0.4, noise=0.0, batch=None):
    reg = get_regime(name)
    lead = () if batch is None else (batch,)
    z = sample_regime_latent(reg, rng, size=batch)
    u0 = rng.standard_normal(lead + shape)
    from pdelatent.decoder import DecodeContext
    u = DecodeContext(reg, u0).field(z)
    mask = (rng.random(lead + shape) < frac).astype(float)
    y = mask * (u + noise * rng.standard_normal(u.shape))
    return reg, z, u0, y, mask


def test_residual_matches_direct_oracle(rng):
    reg, z, u0, y, mask = make_problem(rng, noise=0.1)
    zz = sample_regime_latent(reg, rng)
    th = theta_from_raw(zz[:3], reg)
    u = forward_solve(u0, decode_forcing(zz[3:], (12, 12)), reg.family, th, reg.horizon)
    ref = np.sum(mask * (u - y) ** 2) / (mask.sum() + 1e-8)
    assert masked_residual(zz, y, mask, u0, reg) == pytest.approx(ref, rel=1e-12)


def test_zero_mask_gives_zero(rng):
    reg, z, u0, y, mask = make_problem(rng)
    zero = np.zeros_like(mask)
    assert masked_residual(z + 1, y, zero, u0, reg) == 0
    assert np.all(residual_gradient(z + 1, y, zero, u0, reg) == 0)


def test_exact_fit_is_stationary(rng):
    for name in ("diffusion", "klein_gordon", "helmholtz"):
        reg, z, u0, y, mask = make_problem(rng, name)
        assert masked_residual(z, y, mask, u0, reg) < 1e-12
        assert np.linalg.norm(residual_gradient(z, y, mask, u0, reg)) < 1e-8


def test_gradient_matches_fd(rng):
    for name in ("diffusion", "advection", "klein_gordon", "helmholtz"):
        reg, z, u0, y, mask = make_problem(rng, name, noise=0.2)
        zz = sample_regime_latent(reg, rng)
        num = fd_grad(lambda v: masked_residual(v, y, mask, u0, reg), zz)
        assert rel_err(residual_gradient(zz, y, mask, u0, reg), num) < 1e-5


def test_batched_problem_matches_single(rng):
    reg, z, u0, y, mask = make_problem(rng, batch=3, noise=0.1)
    prob = ResidualProblem(reg, y, mask, u0)
    zz = sample_regime_latent(reg, rng, size=3)
    vals, grads = prob.value_and_grad(zz)
    for i in range(3):
        assert vals[i] == pytest.approx(masked_residual(zz[i], y[i], mask[i], u0[i], reg), rel=1e-12)
        np.testing.assert_allclose(grads[i], residual_gradient(zz[i], y[i], mask[i], u0[i], reg),
                                   rtol=1e-10, atol=1e-14)


def test_affine_in_forcing(rng):
    reg, z, u0, y, mask = make_problem(rng, "klein_gordon")
    prob = ResidualProblem(reg, y, mask, u0)
    base, basis = prob.affine_in_forcing(z[:3])
    np.testing.assert_allclose(base + np.tensordot(z[3:], basis, axes=1), prob.ctx.field(z), atol=1e-12)


def test_best_forcing_is_optimal(rng):
    reg, z, u0, y, mask = make_problem(rng, frac=0.9, noise=0.3)
    prob = ResidualProblem(reg, y, mask, u0)
    r = z[:3] + 0.1
    for lam in (0.0, 0.01):
        q = prob.best_forcing(r, lam)
        obj = lambda qq: prob.value(np.concatenate([r, qq])) + lam * qq @ qq
        g = fd_grad(obj, q, h=1e-6)
        assert np.linalg.norm(g) < 1e-6


def test_shape_errors():
    reg = get_regime("diffusion")
    with pytest.raises(ValueError):
        ResidualProblem(reg, np.zeros((12, 12)), np.zeros((12, 4)), np.zeros((12, 12)))
    with pytest.raises(ValueError):
        ResidualProblem(reg, np.zeros((12, 12)), np.zeros((12, 12)), np.zeros((16, 16)))
    with pytest.raises(ValueError):
        MapConfig(solver="bfgs")


def test_restart_selection_and_recompute(rng):
    reg, z, u0, y, mask = make_problem(rng, batch=4, noise=0.05, frac=0.5)
    prob = ResidualProblem(reg, y, mask, u0)
    cfg = MapConfig(steps=40, restarts=3, screen=4, polish_steps=5)
    res = map_estimate(prob, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(res.best_restart, np.argmin(res.restart_residuals, axis=0))
    np.testing.assert_allclose(prob.value(res.z), res.residual, rtol=1e-12, atol=0)
    assert np.all(res.residual <= res.restart_residuals.min(axis=0) + 1e-15)


def test_map_deterministic(rng):
    reg, z, u0, y, mask = make_problem(rng, batch=2, noise=0.05)
    prob = ResidualProblem(reg, y, mask, u0)
    cfg = MapConfig(steps=20, restarts=2, screen=3, polish_steps=3)
    a = map_estimate(prob, cfg, np.random.default_rng(7))
    b = map_estimate(prob, cfg, np.random.default_rng(7))
    assert np.array_equal(a.z, b.z)


def test_regularization_shrinks_latent(rng):
    reg, z, u0, y, mask = make_problem(rng, shape=(16, 16), noise=0.15, frac=0.1)
    prob = ResidualProblem(reg, y, mask, u0)
    norms = []
    for lam in (0.01, 0.1, 1.0):
        r = map_estimate(prob, MapConfig(steps=60, restarts=2, screen=4, lam=lam, polish_steps=10),
                         np.random.default_rng(1))
        norms.append(np.linalg.norm(r.z[3:]))
    assert norms[0] >= norms[1] >= norms[2]


def test_joint_solver_reduces_residual(rng):
    reg, z, u0, y, mask = make_problem(rng, noise=0.0, frac=0.6)
    prob = ResidualProblem(reg, y, mask, u0)
    z0 = np.zeros_like(z)
    cfg = MapConfig(steps=100, restarts=1, screen=1, polish_steps=0, solver="joint", lam=0.0)
    out = map_estimate(prob, cfg, np.random.default_rng(0))
    assert out.residual < prob.value(z0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projected_objective_lower_bounds_any_forcing(seed):
    r = np.random.default_rng(seed)
    reg, z, u0, y, mask = make_problem(r, noise=0.1)
    prob = ResidualProblem(reg, y, mask, u0)
    rr = r.standard_normal(3)
    q = r.standard_normal(z.size - 3) * 0.1
    assert projected_objective(prob, rr, 0.0) <= prob.value(np.concatenate([rr, q])) + 1e-12
