import numpy as np
import pytest
import torch
from torch import nn

import msdiff.pipeline as pl
from msdiff.diffusion import GaussianScoreNet, NoiseSchedule, ScoreModel, zero_score
from msdiff.metrics import psnr
from msdiff.phantom import shepp_logan
from msdiff.projector import FanGeometry, fbp, forward_project
from msdiff.sampler import SamplerConfig, SamplingDiverged, sampling_sigmas
from msdiff.sinogram import equidistant_mask, extract_sparse

SCHED = NoiseSchedule(0.01, 5.0, 100)
GEOM = FanGeometry.create(16, views=24, detectors=16)


def gaussian_model(mask=None, s2=0.5, shape=(24, 16)):
    rows = mask.kept_views if mask is not None else shape[0]
    return ScoreModel(GaussianScoreNet(np.zeros((rows, shape[1])), s2), SCHED, view_mask=mask)


class ZeroRng:
    def standard_normal(self, shape):
        return np.zeros(shape)


@pytest.fixture
def sino():
    return forward_project(shepp_logan(16), GEOM)


def test_initialize_examples():
    u = np.arange(6.0)[:, None] * np.ones((1, 3))
    out = pl.initialize(u, 24)
    assert out.shape == (24, 3)
    assert np.array_equal(out[::4], u)
    assert np.allclose(pl.initialize(np.full((3, 4), 2.5), 12), 2.5)
    for bad in (np.zeros((0, 4)), np.ones((1, 4))):
        with pytest.raises(ValueError):
            pl.initialize(bad, 12)


def test_job_validation(sino):
    acq = equidistant_mask(24, 4)
    y = extract_sparse(sino, acq)
    with pytest.raises(ValueError):
        pl.ReconstructionJob(y[:3], acq, GEOM)
    with pytest.raises(ValueError):
        pl.ReconstructionJob(y, acq, GEOM, sdm_mask=equidistant_mask(24, 2))
    with pytest.raises(ValueError):
        # stride 4 acquisition is not inside a stride 3 mask
        pl.ReconstructionJob(extract_sparse(sino, equidistant_mask(24, 6)), equidistant_mask(24, 6),
                             GEOM, sdm_mask=equidistant_mask(24, 8))
    with pytest.raises(ValueError):
        pl.ReconstructionJob(y, acq, GEOM, sdm=gaussian_model(equidistant_mask(24, 12)),
                             sdm_mask=equidistant_mask(24, 8))
    job = pl.ReconstructionJob(y, acq, GEOM, sdm=gaussian_model(equidistant_mask(24, 12)))
    assert job.sdm_mask == equidistant_mask(24, 12)
    with pytest.raises(ValueError):
        pl.msdiff_reconstruct(job)


def test_all_ones_mask_matches_full_view_chain(sino):
    # With mask_1 covering every view and SDM == FDM the alternation is just
    # two full-view PC rounds per level drawing from one noise stream.
    acq = equidistant_mask(24, 6)
    full = equidistant_mask(24, 24)
    y = extract_sparse(sino, acq)
    cfg = SamplerConfig(steps=12, corrector_steps=1, seed=5)
    fdm = gaussian_model()
    sdm = ScoreModel(fdm.net, SCHED, view_mask=full)
    job = pl.ReconstructionJob(y, acq, GEOM, fdm=fdm, sdm=sdm, sampler=cfg)
    img_a, sino_a = pl.msdiff_reconstruct(job)
    img_b, sino_b = pl.fdm_reconstruct(job, rounds_per_step=2)
    assert np.array_equal(sino_a, sino_b)
    assert np.array_equal(img_a, img_b)


def test_zero_score_zero_noise_step_is_identity(sino):
    acq = equidistant_mask(24, 6)
    sdm_mask = equidistant_mask(24, 12)
    y = extract_sparse(sino, acq)
    sigmas = sampling_sigmas(SCHED, 10)
    sdm = ScoreModel(zero_score(SCHED).net, SCHED, view_mask=sdm_mask)
    out = pl.msdiff_step(sino, 4, zero_score(SCHED), sdm, sdm_mask, acq, y, sigmas,
                         SamplerConfig(steps=10), ZeroRng())
    assert np.array_equal(out, sino)


def test_recombination_conserves_rows_outside_mask(monkeypatch, rng):
    acq = equidistant_mask(24, 4)
    sdm_mask = equidistant_mask(24, 8)
    x = rng.standard_normal((24, 16))
    y = extract_sparse(x, acq)
    calls = []
    original = pl._pc_stage

    def spy(x, *args, **kwargs):
        out = original(x, *args, **kwargs)
        calls.append((x.copy(), out.copy()))
        return out

    monkeypatch.setattr(pl, "_pc_stage", spy)
    pl.msdiff_step(x, 3, gaussian_model(), gaussian_model(sdm_mask), sdm_mask, acq, y,
                   sampling_sigmas(SCHED, 10), SamplerConfig(steps=10), np.random.default_rng(0))
    (sdm_in, sdm_out), (fdm_in, _) = calls
    rest = sdm_mask.complement().indices
    # The sparse-view stage sees zeros off the mask and leaves them at zero.
    assert np.all(sdm_in[rest] == 0) and np.all(sdm_out[rest] == 0)
    # After recombination the off-mask rows are the pre-step values, bit for bit.
    assert np.array_equal(fdm_in[rest], x[rest])
    assert np.array_equal(fdm_in[sdm_mask.indices], sdm_out[sdm_mask.indices])


def test_measured_rows_invariant_through_msdiff_loop(sino):
    acq = equidistant_mask(24, 4)
    sdm_mask = equidistant_mask(24, 12)
    y = extract_sparse(sino, acq)
    cfg = SamplerConfig(steps=15, corrector_steps=2)
    sigmas = sampling_sigmas(SCHED, 15)
    rng = np.random.default_rng(2)
    x = pl.initialize(y, 24) + SCHED.sigma_max * rng.standard_normal((24, 16))
    fdm, sdm = gaussian_model(), gaussian_model(sdm_mask)
    for k in range(14, -1, -1):
        x = pl.msdiff_step(x, k, fdm, sdm, sdm_mask, acq, y, sigmas, cfg, rng)
        assert np.array_equal(extract_sparse(x, acq), y)
    job = pl.ReconstructionJob(y, acq, GEOM, fdm=fdm, sdm=sdm, sampler=cfg)
    _, final = pl.msdiff_reconstruct(job)
    assert np.array_equal(extract_sparse(final, acq), y)


def test_full_view_acquisition_reduces_to_fbp(sino):
    full = equidistant_mask(24, 24)
    y = extract_sparse(sino, full)
    truth = shepp_logan(16)
    job = pl.ReconstructionJob(y, full, GEOM, fdm=gaussian_model(), sdm=gaussian_model(full),
                               sampler=SamplerConfig(steps=8))
    img, out = pl.msdiff_reconstruct(job)
    assert np.array_equal(out, sino)
    assert psnr(img, truth, 1.0) >= psnr(fbp(sino, GEOM), truth, 1.0) - 0.1


def test_reconstruction_deterministic(sino):
    acq = equidistant_mask(24, 4)
    y = extract_sparse(sino, acq)
    job = pl.ReconstructionJob(y, acq, GEOM, fdm=gaussian_model(),
                               sdm=gaussian_model(equidistant_mask(24, 12)),
                               sampler=SamplerConfig(steps=10, seed=3))
    for fn in (pl.msdiff_reconstruct, pl.fdm_reconstruct, pl.sdm_reconstruct):
        a, b = fn(job)[0], fn(job)[0]
        assert np.array_equal(a, b)
        assert not np.array_equal(a, fn(job, seed=4)[0])


def test_sdm_reconstruct_fills(sino):
    acq = equidistant_mask(24, 4)
    sdm_mask = equidistant_mask(24, 12)
    y = extract_sparse(sino, acq)
    job = pl.ReconstructionJob(y, acq, GEOM, sdm=gaussian_model(sdm_mask),
                               sampler=SamplerConfig(steps=10))
    img, out = pl.sdm_reconstruct(job)
    assert np.array_equal(extract_sparse(out, acq), y)
    assert np.all(out[1::2] == 0)
    np.testing.assert_array_equal(img, fbp(out[0::2], GEOM.subset(sdm_mask.indices)))
    img_i, out_i = pl.sdm_reconstruct(job, fill="interpolate")
    # Same noise stream, so the sampled rows agree and only the fill differs.
    assert np.array_equal(out_i[0::2], out[0::2])
    np.testing.assert_allclose(out_i[1::2], 0.5 * (out[0::2] + np.roll(out[0::2], -1, axis=0)))
    np.testing.assert_array_equal(img_i, fbp(out_i, GEOM))
    with pytest.raises(ValueError):
        pl.sdm_reconstruct(job, fill="zeros")


class NanNet(nn.Module):
    def forward(self, x, sigma):
        return torch.full_like(x, float("nan"))


def test_divergence_guard(sino):
    acq = equidistant_mask(24, 4)
    job = pl.ReconstructionJob(extract_sparse(sino, acq), acq, GEOM,
                               fdm=ScoreModel(NanNet(), SCHED), sampler=SamplerConfig(steps=4))
    with pytest.raises(SamplingDiverged):
        pl.fdm_reconstruct(job)


def test_models_must_share_schedule(sino):
    acq = equidistant_mask(24, 4)
    other = ScoreModel(GaussianScoreNet(np.zeros((12, 16)), 0.5), NoiseSchedule(0.01, 9.0, 100),
                       view_mask=equidistant_mask(24, 12))
    job = pl.ReconstructionJob(extract_sparse(sino, acq), acq, GEOM, fdm=gaussian_model(), sdm=other,
                               sampler=SamplerConfig(steps=4))
    with pytest.raises(ValueError):
        pl.msdiff_reconstruct(job)


def test_fbp_baselines(sino):
    acq = equidistant_mask(24, 24)
    y = extract_sparse(sino, acq)
    np.testing.assert_allclose(pl.fbp_sparse(y, acq, GEOM), fbp(sino, GEOM), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(pl.fbp_interpolated(y, acq, GEOM), fbp(sino, GEOM), atol=1e-12)
    acq = equidistant_mask(24, 6)
    assert pl.fbp_zero_filled(extract_sparse(sino, acq), acq, GEOM).shape == (16, 16)


def test_ablation_sweep_shape(tmp_path):
    images = np.stack([shepp_logan(16)] * 2)
    sdms = {12: gaussian_model(equidistant_mask(24, 12)), 6: gaussian_model(equidistant_mask(24, 6))}
    rows = pl.ablation_sweep(images, GEOM, gaussian_model(), sdms, 12, view_counts=(2, 4),
                             sampler=SamplerConfig(steps=3), seeds=(0,))
    main = [(r.method, r.views) for r in rows if r.method != "MSDiff-mask"]
    assert main == [(m, v) for v in (2, 4) for m in pl.METHODS + pl.EXTRA_METHODS]
    sweep = [(r.sdm_views, r.views) for r in rows if r.method == "MSDiff-mask"]
    # The 4-view acquisition (stride 6) is not inside the stride-4 mask.
    assert sweep == [(6, 2), (12, 2), (12, 4)]
    pl.write_sweep_csv(tmp_path / "a.csv", rows)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "method,views,psnr,ssim,mse_e-3,sdm_views"
    assert len(lines) == 1 + len(rows)
    assert lines[1].startswith("FBP,2,") and lines[1].endswith(",")
    with pytest.raises(KeyError):
        pl.ablation_sweep(images, GEOM, gaussian_model(), sdms, 8)
    with pytest.raises(ValueError):
        pl.evaluate_method("TV", images, GEOM, equidistant_mask(24, 2))
