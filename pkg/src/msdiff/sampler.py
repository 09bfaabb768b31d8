"""Reverse-time predictor-corrector sampling with data-consistency injections.

A sampler with ``T`` steps uses noise levels ``sigma_1 .. sigma_T`` from the
geometric schedule of the score model (rescaled to ``T`` steps) and
``sigma_0 = 0``. ``sigma_start`` optionally lowers the top level below the
schedule's ``sigma_max`` so a chain can begin near a good initial estimate
instead of at the full prior spread. Arrays are ``(..., views, detectors)``; the leading
dimensions are independent chains sharing one random stream.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .sinogram import SubsampleMask, data_consistency, extract_sparse

EPS_FLOOR = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 200
    corrector_steps: int = 1
    snr: float = 0.16
    dc_lambda: float = 0.0
    seed: int = 0
    sigma_start: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.corrector_steps < 0:
            raise ValueError("corrector step count must be nonnegative")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.dc_lambda < 0:
            raise ValueError("data-consistency weight must be nonnegative")
        if self.sigma_start is not None and not self.sigma_start > 0:
            raise ValueError("sigma_start must be positive")


def sampling_sigmas(schedule: NoiseSchedule, steps: int, sigma_start: float | None = None) -> np.ndarray:
    """``[0, sigma_1, ..., sigma_T]``: geometric from ``sigma_min`` to ``sigma_start``
    (default the schedule's ``sigma_max``) over ``steps``."""
    top = schedule.sigma_max if sigma_start is None else sigma_start
    if not schedule.sigma_min < top <= schedule.sigma_max:
        raise ValueError(f"sigma_start {top} outside ({schedule.sigma_min}, {schedule.sigma_max}]")
    sched = NoiseSchedule(schedule.sigma_min, top, steps)
    sigmas = sched.sigmas.copy()
    sigmas[0] = 0.0
    return sigmas


def _score_sigma(sigmas, k, model):
    # sigma_0 = 0 has no score; the smallest trained noise level stands in.
    s = sigmas[k]
    return s if s > 0 else model.schedule.sigma_min


def _noise(rng, shape, support: SubsampleMask | None):
    z = rng.standard_normal(shape)
    if support is not None:
        z = z * support.rows
    return z


def predictor_step(x, k: int, model, sigmas, rng=None, z=None,
                   support: SubsampleMask | None = None) -> np.ndarray:
    """Reverse-diffusion step from level ``k + 1`` to ``k``."""
    T = len(sigmas) - 1
    if not 0 <= k < T:
        raise ValueError(f"predictor index {k} outside [0, {T})")
    x = np.asarray(x, dtype=np.float64)
    if z is None:
        z = _noise(rng, x.shape, support)
    delta = sigmas[k + 1] ** 2 - sigmas[k] ** 2
    score = model.evaluate(x, sigmas[k + 1])
    return x + delta * score + np.sqrt(delta) * z


def epsilon_schedule(score, z, snr: float) -> np.ndarray:
    """Langevin step ``2 * (snr * |z| / |score|)^2`` per chain, floored for vanishing scores."""
    if not snr > 0:
        raise ValueError("snr must be positive")
    score = np.asarray(score)
    z = np.asarray(z)
    z_norm = np.sqrt(np.sum(z * z, axis=(-2, -1)))
    s_norm = np.sqrt(np.sum(score * score, axis=(-2, -1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = 2.0 * (snr * z_norm / s_norm) ** 2
    eps = np.where(s_norm > 0, eps, EPS_FLOOR)
    return np.maximum(np.nan_to_num(eps, nan=EPS_FLOOR, posinf=EPS_FLOOR), EPS_FLOOR)


def corrector_step(x, k: int, model, epsilon, sigmas, rng=None, z=None,
                   support: SubsampleMask | None = None, score=None,
                   allow_zero: bool = False) -> np.ndarray:
    """Langevin update ``x + eps * S(x, sigma_k) + sqrt(2 eps) z``."""
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps < 0) or (not allow_zero and np.any(eps == 0)):
        raise ValueError("Langevin step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    if z is None:
        z = _noise(rng, x.shape, support)
    if score is None:
        score = model.evaluate(x, _score_sigma(sigmas, k, model))
    eps = eps.reshape(eps.shape + (1, 1))
    return x + eps * score + np.sqrt(2.0 * eps) * z


def corrector_round(x, k, model, sigmas, snr, rng, support=None) -> np.ndarray:
    """One corrector update with its step size chosen by :func:`epsilon_schedule`."""
    z = _noise(rng, np.shape(x), support)
    score = model.evaluate(x, _score_sigma(sigmas, k, model))
    eps = epsilon_schedule(score, z, snr)
    return corrector_step(x, k, model, eps, sigmas, z=z, score=score)


class SamplingDiverged(RuntimeError):
    pass


def pc_step(x, k, model, sigmas, cfg: SamplerConfig, rng, mask=None, y=None,
            support: SubsampleMask | None = None, trace=None) -> np.ndarray:
    """Predictor, DC, then ``M`` x (corrector, DC) at level ``k``."""
    x = predictor_step(x, k, model, sigmas, rng=rng, support=support)
    if trace is not None and mask is not None:
        trace.append((k, "predictor", float(np.linalg.norm(extract_sparse(x, mask) - y))))
    if mask is not None:
        x = data_consistency(x, y, mask, cfg.dc_lambda)
    for _ in range(cfg.corrector_steps):
        x = corrector_round(x, k, model, sigmas, cfg.snr, rng, support)
        if mask is not None:
            x = data_consistency(x, y, mask, cfg.dc_lambda)
    if not np.all(np.isfinite(x)):
        raise SamplingDiverged(f"non-finite sinogram at step {k}")
    return x


def pc_sample(x_init, model, mask: SubsampleMask | None = None, y=None,
              cfg: SamplerConfig = SamplerConfig(), rng=None,
              support: SubsampleMask | None = None, trace=None) -> np.ndarray:
    """Run ``k = T-1 .. 0`` predictor-corrector steps from ``x_init``.

    With ``mask`` and compact measurements ``y``, data consistency follows the
    predictor and every corrector. ``support`` confines the injected noise to
    its rows (for models that only live on a subset of views).
    """
    if (mask is None) != (y is None):
        raise ValueError("mask and measurements must be given together")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    sigmas = sampling_sigmas(model.schedule, cfg.steps, cfg.sigma_start)
    x = np.array(x_init, dtype=np.float64, copy=True)
    for k in range(cfg.steps - 1, -1, -1):
        x = pc_step(x, k, model, sigmas, cfg, rng, mask, y, support, trace)
    return x


def write_trace(path, trace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "stage", "residual_norm"])
        for row in trace:
            writer.writerow([row[0], row[1], f"{row[2]:.8g}"])
