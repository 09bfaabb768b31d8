"""Sparse-view reconstruction with a full-view and a sparse-view score prior.

Each outer step ``k`` first runs the sparse-view model on the rows kept by
``sdm_mask`` (predictor + DC, correctors + DC), puts the untouched remaining
rows back, and then runs the full-view model on the whole sinogram. The
final sinogram is reconstructed with FBP.

Measurements ``y`` are compact ``(..., acquired views, detectors)`` arrays in
physical units; the chain itself runs on sinograms divided by the models'
normalization constant.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import ScoreModel
from .metrics import METRIC_COLUMNS, MetricsReport, metrics_row
from .phantom import NoiseSpec, add_poisson_noise
from .projector import FanGeometry, fbp, forward_project
from .sampler import (SamplerConfig, SamplingDiverged, corrector_round, predictor_step,
                      sampling_sigmas)
from .sinogram import (SubsampleMask, apply_mask, data_consistency, equidistant_mask,
                       extract_sparse, interpolate_sinogram, zero_fill)

log = logging.getLogger(__name__)


@dataclass
class ReconstructionJob:
    measurements: np.ndarray
    acq_mask: SubsampleMask
    geometry: FanGeometry
    fdm: ScoreModel | None = None
    sdm: ScoreModel | None = None
    sdm_mask: SubsampleMask | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pure_noise_start: bool = False
    filter_kind: str = "ram-lak"

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if self.acq_mask.total_views != self.geometry.views:
            raise ValueError("acquisition mask and geometry disagree on the view count")
        if self.measurements.shape[-2:] != (self.acq_mask.kept_views, self.geometry.detector_count):
            raise ValueError(f"measurements of shape {self.measurements.shape} do not match the mask")
        if self.sdm_mask is not None:
            if self.sdm_mask.kept_views < self.acq_mask.kept_views:
                raise ValueError("sparse-view mask keeps fewer views than were acquired")
            if not self.acq_mask.issubset(self.sdm_mask):
                raise ValueError("acquired views must all be kept by the sparse-view mask")
        if self.sdm is not None and self.sdm_mask is None:
            self.sdm_mask = self.sdm.view_mask
        if self.sdm is not None and self.sdm.view_mask != self.sdm_mask:
            raise ValueError("sparse-view model was trained on a different mask")

    @property
    def scale(self) -> float:
        model = self.fdm if self.fdm is not None else self.sdm
        return model.scale if model is not None else 1.0

    @property
    def models(self):
        return [m for m in (self.fdm, self.sdm) if m is not None]


def initialize(u, total_views: int) -> np.ndarray:
    """Full-view sinogram from the compact measurement by periodic angular interpolation."""
    u = np.asarray(u, dtype=np.float64)
    if u.size == 0:
        raise ValueError("empty measurement")
    return interpolate_sinogram(u, total_views)


def _chain_start(job: ReconstructionJob, rng, sigma_top: float) -> np.ndarray:
    init = initialize(job.measurements, job.acq_mask.total_views) / job.scale
    noise = sigma_top * rng.standard_normal(init.shape)
    return noise if job.pure_noise_start else init + noise


def _check_models(job):
    models = job.models
    if not models:
        raise ValueError("job has no score model")
    first = models[0]
    for m in models[1:]:
        if m.schedule != first.schedule or not np.isclose(m.scale, first.scale):
            raise ValueError("score models must share one schedule and normalization")
    return first.schedule


def _pc_stage(x, k, model, sigmas, cfg, rng, mask, y, support=None):
    x = predictor_step(x, k, model, sigmas, rng=rng, support=support)
    x = data_consistency(x, y, mask, cfg.dc_lambda)
    for _ in range(cfg.corrector_steps):
        x = corrector_round(x, k, model, sigmas, cfg.snr, rng, support)
        x = data_consistency(x, y, mask, cfg.dc_lambda)
    return x


def msdiff_step(x, k: int, fdm: ScoreModel, sdm: ScoreModel, sdm_mask: SubsampleMask,
                acq_mask: SubsampleMask, y, sigmas, cfg: SamplerConfig, rng) -> np.ndarray:
    """One alternation at level ``k``: sparse-view stage, recombination, full-view stage.

    ``y`` is the normalized compact measurement.
    """
    rows = sdm_mask.rows
    x_sparse = x * rows
    x_rest = x * (1.0 - rows)
    x_sparse = _pc_stage(x_sparse, k, sdm, sigmas, cfg, rng, acq_mask, y, support=sdm_mask)
    x = x_sparse + x_rest
    return _pc_stage(x, k, fdm, sigmas, cfg, rng, acq_mask, y)


def _run_chain(job: ReconstructionJob, stage, rng, trace=None):
    schedule = _check_models(job)
    cfg = job.sampler
    sigmas = sampling_sigmas(schedule, cfg.steps, cfg.sigma_start)
    y = job.measurements / job.scale
    x = _chain_start(job, rng, sigmas[-1])
    for k in range(cfg.steps - 1, -1, -1):
        x_new = stage(x, k, sigmas, y)
        if not np.all(np.isfinite(x_new)):
            raise SamplingDiverged(f"non-finite sinogram at outer step {k}")
        if trace is not None:
            trace.append((k, "update", float(np.linalg.norm(x_new - x))))
        x = x_new
    return x * job.scale


def _rng(job, seed):
    return np.random.default_rng(job.sampler.seed if seed is None else seed)


def msdiff_reconstruct(job: ReconstructionJob, seed: int | None = None, trace=None):
    """Alternating sparse-view / full-view sampling, then FBP. Returns (image, sinogram)."""
    if job.fdm is None or job.sdm is None:
        raise ValueError("multi-scale reconstruction needs both score models")
    rng = _rng(job, seed)

    def stage(x, k, sigmas, y):
        return msdiff_step(x, k, job.fdm, job.sdm, job.sdm_mask, job.acq_mask, y,
                           sigmas, job.sampler, rng)

    sino = _run_chain(job, stage, rng, trace)
    return fbp(sino, job.geometry, job.filter_kind), sino


def fdm_reconstruct(job: ReconstructionJob, seed: int | None = None, rounds_per_step: int = 1,
                    trace=None):
    """Full-view prior only: ``rounds_per_step`` PC rounds per level, then FBP."""
    if job.fdm is None:
        raise ValueError("full-view reconstruction needs the full-view model")
    rng = _rng(job, seed)

    def stage(x, k, sigmas, y):
        for _ in range(rounds_per_step):
            x = _pc_stage(x, k, job.fdm, sigmas, job.sampler, rng, job.acq_mask, y)
        return x

    sino = _run_chain(job, stage, rng, trace)
    return fbp(sino, job.geometry, job.filter_kind), sino


def sdm_reconstruct(job: ReconstructionJob, seed: int | None = None, trace=None,
                    fill: str = "none"):
    """Sparse-view prior only. Returns (image, sinogram).

    The chain samples the mask rows alone. With ``fill="none"`` the image is
    FBP over the mask views, which is everything the sparse-view model
    produces; the returned sinogram holds zeros off the mask. With
    ``fill="interpolate"`` the off-mask rows are interpolated from the
    sampled rows and FBP runs over all views.
    """
    if job.sdm is None:
        raise ValueError("sparse-view reconstruction needs the sparse-view model")
    if fill not in ("none", "interpolate"):
        raise ValueError(f"unknown fill {fill!r}")
    rng = _rng(job, seed)
    mask = job.sdm_mask
    rows = mask.rows

    def stage(x, k, sigmas, y):
        x = x * rows
        return _pc_stage(x, k, job.sdm, sigmas, job.sampler, rng, job.acq_mask, y, support=mask)

    sino = _run_chain(job, stage, rng, trace) * rows
    kept = extract_sparse(sino, mask)
    if fill == "none":
        return fbp(kept, job.geometry.subset(mask.indices), job.filter_kind), sino
    sino = interpolate_sinogram(kept, mask.total_views)
    return fbp(sino, job.geometry, job.filter_kind), sino


def fbp_sparse(y, acq_mask: SubsampleMask, geometry: FanGeometry, filter_kind="ram-lak"):
    """Plain FBP over the acquired views only."""
    return fbp(y, geometry.subset(acq_mask.indices), filter_kind)


def fbp_zero_filled(y, acq_mask: SubsampleMask, geometry: FanGeometry, filter_kind="ram-lak"):
    return fbp(zero_fill(y, acq_mask), geometry, filter_kind)


def fbp_interpolated(y, acq_mask: SubsampleMask, geometry: FanGeometry, filter_kind="ram-lak"):
    return fbp(initialize(y, acq_mask.total_views), geometry, filter_kind)


def acquire(images, geometry: FanGeometry, acq_mask: SubsampleMask,
            noise: NoiseSpec | None = None) -> np.ndarray:
    """Full-view projection, optional Poisson noise, then the compact acquired rows."""
    sino = forward_project(images, geometry)
    if noise is not None:
        sino = add_poisson_noise(sino, noise)
    return extract_sparse(sino, acq_mask)


# ---------------------------------------------------------------------------
# ablation


METHODS = ("FBP", "FDM", "SDM", "MSDiff")
# Reported next to the table: the sparse-view model with interpolated off-mask rows.
EXTRA_METHODS = ("SDM-interp",)


@dataclass
class SweepRow:
    method: str
    views: int
    report: MetricsReport
    sdm_views: int | None = None


def _mean_report(reports):
    return MetricsReport(float(np.mean([r.psnr for r in reports])),
                         float(np.mean([r.ssim for r in reports])),
                         float(np.mean([r.mse for r in reports])),
                         float(np.mean([r.data_range for r in reports])))


def evaluate_method(method: str, images, geometry, acq_mask, fdm=None, sdm=None,
                    sampler=SamplerConfig(), seeds=(0,), noise=None) -> MetricsReport:
    """Mean metrics of one method over test images and sampling seeds."""
    images = np.asarray(images, dtype=np.float64)
    y = acquire(images, geometry, acq_mask, noise)
    if method not in METHODS + EXTRA_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "FBP":
        recon = [fbp_sparse(y, acq_mask, geometry)]
    else:
        uses_sdm = method != "FDM"
        job = ReconstructionJob(y, acq_mask, geometry, fdm=fdm if method in ("FDM", "MSDiff") else None,
                                sdm=sdm if uses_sdm else None,
                                sdm_mask=sdm.view_mask if sdm is not None and uses_sdm else None,
                                sampler=sampler)
        fn = {"FDM": fdm_reconstruct, "SDM": sdm_reconstruct, "MSDiff": msdiff_reconstruct,
              "SDM-interp": lambda j, seed: sdm_reconstruct(j, seed=seed, fill="interpolate")}[method]
        recon = [fn(job, seed=s)[0] for s in seeds]
    reports = [MetricsReport.compare(r_img, truth)
               for r in recon for r_img, truth in zip(r, images)]
    return _mean_report(reports)


def ablation_sweep(images, geometry: FanGeometry, fdm: ScoreModel,
                   sdms: dict[int, ScoreModel], default_sdm_views: int,
                   view_counts=(10, 20, 30), sampler=SamplerConfig(), seeds=(0,),
                   noise: NoiseSpec | None = None, methods=METHODS + EXTRA_METHODS) -> list[SweepRow]:
    """Method ablation at every view count plus a sweep over sparse-view masks.

    ``sdms`` maps a mask view count to the sparse-view model trained on that
    mask. Sweep rows are only produced where the acquisition is contained in
    the mask.
    """
    if default_sdm_views not in sdms:
        raise KeyError(f"no sparse-view model for the {default_sdm_views}-view mask")
    rows = []
    for views in view_counts:
        acq = equidistant_mask(geometry.views, views)
        for method in methods:
            sdm = sdms[default_sdm_views]
            report = evaluate_method(method, images, geometry, acq, fdm, sdm, sampler, seeds, noise)
            rows.append(SweepRow(method, views, report,
                                 default_sdm_views if method.startswith(("SDM", "MSDiff")) else None))
            log.info("%s @ %d views: %.2f dB", method, views, report.psnr)
    for mask_views, sdm in sorted(sdms.items()):
        for views in view_counts:
            acq = equidistant_mask(geometry.views, views)
            if not acq.issubset(sdm.view_mask):
                continue
            report = evaluate_method("MSDiff", images, geometry, acq, fdm, sdm, sampler, seeds, noise)
            rows.append(SweepRow("MSDiff-mask", views, report, mask_views))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*METRIC_COLUMNS, "sdm_views"])
        for r in rows:
            writer.writerow([*metrics_row(r.method, r.views, r.report),
                             "" if r.sdm_views is None else r.sdm_views])
