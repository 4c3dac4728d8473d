import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdelatent.datagen import conditioning_channels
from pdelatent.decoder import DecodeContext
from pdelatent.diffusion import (DiffusionTrainConfig, NoiseSchedule, PosteriorEnsemble,
                                 SamplerConfig, ensemble_reconstruct, ensemble_size_for_ratio,
                                 estimate_ensemble_size, forward_noise, guide, predict_clean,
                                 refine, reverse_chain, train_denoiser)
from pdelatent.latent import LatentStats, get_regime, sample_regime_latent
from pdelatent.map_inference import ResidualProblem
from pdelatent.nets import Denoiser, DenoiserConfig

SCHED = NoiseSchedule()


def test_schedule_invariants():
    ab = SCHED.alpha_bars
    assert np.all(np.diff(ab) < 0) and 0 < ab[-1] < ab[0] < 1
    assert np.sqrt(ab[-1]) < 0.05
    assert SCHED.alpha_bar(0) == 1.0
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.1, beta_end=0.01)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0))
def test_start_step_rule(sigma):
    t = int(SCHED.start_step(sigma))
    s = np.sqrt(1 - SCHED.alpha_bars)
    if t > 0:
        assert s[t - 1] <= sigma
    if t < SCHED.T:
        assert s[t] > sigma


def test_forward_noise_and_clean_prediction(rng):
    z0 = rng.standard_normal((5, 67))
    t = np.array([1, 50, 200, 399, 400])
    zt, eps = forward_noise(z0, t, SCHED, rng)
    ab = SCHED.alpha_bar(t)[:, None]
    np.testing.assert_allclose(predict_clean(zt, eps, ab), z0, atol=1e-10)
    with pytest.raises(ValueError):
        forward_noise(z0, 0, SCHED, rng)
    with pytest.raises(ValueError):
        forward_noise(z0, 401, SCHED, rng)


def test_ensemble_size_examples():
    a = 1 / np.sqrt(2)
    pilot = np.stack([np.full(50, a), np.full(50, -a)])  # sample variance 1 per coordinate
    assert estimate_ensemble_size(pilot, np.sqrt(0.1)) == 10
    assert estimate_ensemble_size(np.concatenate([pilot, pilot], axis=1), np.sqrt(0.1)) == 10
    assert estimate_ensemble_size(np.zeros((3, 10)), 0.1) == 1
    assert ensemble_size_for_ratio(0.3) == 12
    assert ensemble_size_for_ratio(0.5) == 4
    with pytest.raises(ValueError):
        estimate_ensemble_size(np.zeros((1, 4)), 0.1)


def test_posterior_ensemble_summary(rng):
    one = PosteriorEnsemble(rng.standard_normal((1, 4, 4)), np.zeros((1, 67)), np.ones(1, bool))
    assert np.all(one.std == 0)
    m = rng.standard_normal((5, 4, 4))
    ens = PosteriorEnsemble(m, np.zeros((5, 67)), np.ones(5, bool))
    np.testing.assert_allclose(ens.mean, sum(m) / 5, atol=1e-15)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(sigma_init_low=0.7, sigma_init_high=0.6)
    with pytest.raises(ValueError):
        SamplerConfig(window=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(members=0)


# ------------------------------------------------------------------ with a small model

@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(5)
    reg = get_regime("diffusion")
    n, shape = 6, (12, 12)
    z = sample_regime_latent(reg, rng, size=n)
    u0 = rng.standard_normal((n,) + shape)
    u = DecodeContext(reg, u0).field(z)
    mask = (rng.random((n,) + shape) < 0.2).astype(float)
    y = mask * (u + 0.05 * rng.standard_normal(u.shape))
    chans = np.stack([conditioning_channels(y[i], mask[i]) for i in range(n)])
    problem = ResidualProblem(reg, y, mask, u0)
    stats = LatentStats.from_latents(sample_regime_latent(reg, rng, size=200), "prior")
    cfg = DenoiserConfig(latent_dim=67, hidden=16, blocks=1, obs_channels=(4, 4, 8), obs_dim=8,
                         ic_channels=(2, 4, 4), ic_dim=4, time_dim=8, seed=0)
    return dict(reg=reg, z=z, u0=u0, chans=chans, problem=problem, stats=stats,
                model=Denoiser(cfg))


def test_training_reduces_denoising_loss(setup):
    s = setup
    model = Denoiser(s["model"].cfg)
    zn = s["stats"].normalize(s["z"])
    zn = np.concatenate([zn] * 8)
    rep = np.tile(np.arange(6), 8)
    hist = train_denoiser(model, zn, s["chans"][rep], s["u0"][rep], s["problem"].subset(rep),
                          s["stats"], DiffusionTrainConfig(epochs=15, batch_size=16, lam_obs=0.0))
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert all(h["obs"] == 0 for h in hist)


def test_training_rejects_wrong_latent_length(setup):
    s = setup
    with pytest.raises(ValueError):
        train_denoiser(s["model"], np.zeros((6, 10)), s["chans"], s["u0"], s["problem"],
                       s["stats"], DiffusionTrainConfig(epochs=1))


def test_guidance_step_is_clipped(setup):
    s = setup
    cfg = SamplerConfig(inner_steps=2, eta_g=0.1, gamma_g=80.0, clip=0.5)
    z0 = s["stats"].normalize(s["z"]) + 3.0
    out = guide(z0, s["problem"], s["stats"], cfg)
    assert np.abs(out - z0).max() <= 2 * 0.1 * 80.0 * 0.5 + 1e-12


def test_refine_disabled_is_identity(setup):
    s = setup
    z = np.random.default_rng(0).standard_normal((6, 67))
    assert np.array_equal(refine(z, s["problem"], s["stats"], SamplerConfig(lam_ref=0.0)), z)
    moved = refine(z, s["problem"], s["stats"], SamplerConfig(lam_ref=0.01))
    assert not np.array_equal(moved, z)


def test_guidance_window_outside_chain_is_noop(setup):
    s = setup
    cond = s["model"].condition(s["chans"], s["u0"]).data
    zi = s["stats"].normalize(s["z"])
    outs = []
    for cfg in (SamplerConfig(guidance=False, lam_ref=0.0),
                SamplerConfig(window=0.5 / SCHED.T, lam_ref=0.0)):
        z, ok = reverse_chain(s["model"], cond, zi, s["problem"], s["stats"], SCHED, cfg,
                              np.random.default_rng(3), sigma_init=0.3)
        outs.append(z)
    assert np.array_equal(outs[0], outs[1])


def test_ensemble_reconstruct_shapes_and_streams(setup):
    s = setup
    reg = s["reg"]
    cfg = SamplerConfig(members=3, refine_steps=2)

    def decode_fn(zr):
        return np.stack([DecodeContext(reg, s["u0"][i]).field(zr[i]) for i in range(zr.shape[0])])

    args = (s["model"], s["stats"], s["chans"][:2], s["u0"][:2], s["problem"].subset([0, 1]),
            s["z"][:2], decode_fn, cfg)
    ens = ensemble_reconstruct(*args, seed=4)
    assert len(ens) == 2 and ens[0].members.shape == (3, 12, 12)
    again = ensemble_reconstruct(*args, seed=4)
    assert np.array_equal(ens[1].latents, again[1].latents)
    # instance 1 alone, same stream id, gives the same members
    solo = ensemble_reconstruct(s["model"], s["stats"], s["chans"][1:2], s["u0"][1:2],
                                s["problem"].subset([1]), s["z"][1:2], decode_fn, cfg, seed=4,
                                instance_ids=[1])
    np.testing.assert_allclose(solo[0].latents, ens[1].latents, atol=1e-12)


def test_branch_tag_checked(setup):
    s = setup
    bad = LatentStats(s["stats"].mu, s["stats"].sigma, branch="oracle")
    with pytest.raises(ValueError):
        ensemble_reconstruct(s["model"], bad, s["chans"], s["u0"], s["problem"], s["z"],
                             lambda z: z, SamplerConfig())
