"""Experiment configuration: an INI file with fixed sections and keys.

Every section maps onto a frozen dataclass. Unknown sections or keys are
errors, missing keys take their defaults, and ``to_text`` writes every key so
that parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, TrainConfig
from .projector import FanGeometry
from .sampler import SamplerConfig, sampling_sigmas
from .sinogram import SubsampleMask, equidistant_mask


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeometrySection:
    image_size: int = 64
    total_views: int = 120
    detectors: int = 64
    source_to_center: float = 400.0
    center_to_detector: float = 400.0
    margin: float = 0.1


@dataclass(frozen=True)
class ScheduleSection:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    steps: int = 1000


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 1e-4
    warmup_steps: int = 5000
    grad_clip: float = 1.0
    batch_size: int = 8
    total_steps: int = 100_000
    crop_views: int = 0
    channels: int = 32
    depth: int = 4
    view_dilations: tuple[int, ...] = (1, 1, 1, 1)


@dataclass(frozen=True)
class SamplerSection:
    steps: int = 200
    corrector_steps: int = 1
    snr: float = 0.16
    dc_lambda: float = 0.0
    pure_noise_start: bool = False
    sigma_start: float | None = None


@dataclass(frozen=True)
class MasksSection:
    acquired_views: int = 10
    sdm_views: int = 60
    ablation_views: tuple[int, ...] = (10, 20, 30)
    sweep_sdm_views: tuple[int, ...] = (30, 60)


@dataclass(frozen=True)
class DataSection:
    train_count: int = 256
    test_count: int = 5
    min_ellipses: int = 3
    max_ellipses: int = 8
    poisson_noise: bool = False
    incident_photons: float = 1e6


@dataclass(frozen=True)
class PathsSection:
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    sample_seeds: int = 1


_SECTIONS = {
    "geometry": GeometrySection,
    "schedule": ScheduleSection,
    "training": TrainingSection,
    "sampler": SamplerSection,
    "masks": MasksSection,
    "data": DataSection,
    "paths": PathsSection,
    "run": RunSection,
}


def _parse_value(kind, text: str, where: str):
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            low = text.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind in (str, "str"):
            return text
        if kind == "float | None":
            return None if text.strip().lower() == "none" else float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind}") from None
    raise TypeError(f"unsupported config type {kind}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    masks: MasksSection = field(default_factory=MasksSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    # -- text form ---------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        sections = {}
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            kind = _SECTIONS[name]
            types = {f.name: f.type for f in fields(kind)}
            values = {}
            for key, raw in parser.items(name):
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                values[key] = _parse_value(types[key], raw, f"[{name}] {key}")
            try:
                sections[name] = kind(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        lines = []
        for name in _SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """sha256 of the canonical text form."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))

    # -- derived objects ---------------------------------------------------

    def validate(self) -> None:
        g, m, d = self.geometry, self.masks, self.data
        try:
            sampling_sigmas(self.noise_schedule(), self.sampler.steps, self.sampler.sigma_start)
            self.sampler_config(0)
            self.train_config(0)
            acq = self.acquisition_mask()
            sdm = self.sdm_mask()
            for views in (*m.ablation_views, *m.sweep_sdm_views):
                equidistant_mask(g.total_views, views)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not acq.issubset(sdm):
            raise ConfigError("acquired views must be a subset of the sparse-view mask")
        for views in m.ablation_views:
            if not self.acquisition_mask(views).issubset(sdm):
                raise ConfigError(f"ablation acquisition of {views} views is not inside the sparse-view mask")
        if len(self.training.view_dilations) != self.training.depth:
            raise ConfigError("view_dilations needs one entry per conv layer")
        if not 1 <= d.min_ellipses <= d.max_ellipses <= 16:
            raise ConfigError("ellipse counts must satisfy 1 <= min <= max <= 16")
        if d.train_count < 1 or d.test_count < 1:
            raise ConfigError("dataset counts must be positive")
        if self.run.sample_seeds < 1:
            raise ConfigError("sample_seeds must be positive")

    def fan_geometry(self) -> FanGeometry:
        g = self.geometry
        return FanGeometry.create(g.image_size, views=g.total_views, detectors=g.detectors,
                                  source_to_center=g.source_to_center,
                                  center_to_detector=g.center_to_detector, margin=g.margin)

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return NoiseSchedule(s.sigma_min, s.sigma_max, s.steps)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.training
        return TrainConfig(t.learning_rate, t.warmup_steps, t.grad_clip, t.batch_size,
                           t.total_steps, seed, t.crop_views)

    def sampler_config(self, seed: int) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(s.steps, s.corrector_steps, s.snr, s.dc_lambda, seed, s.sigma_start)

    def acquisition_mask(self, views: int | None = None) -> SubsampleMask:
        return equidistant_mask(self.geometry.total_views, views or self.masks.acquired_views)

    def sdm_mask(self, views: int | None = None) -> SubsampleMask:
        return equidistant_mask(self.geometry.total_views, views or self.masks.sdm_views)

    def seed_for(self, stream: str, index: int = 0) -> int:
        return substream_seed(self.run.seed, stream, index)


def substream_seed(root: int, stream: str, index: int = 0) -> int:
    """Independent 63-bit seed for the named stream (``train``, ``sample``, ``noise`` ...)."""
    seq = np.random.SeedSequence(entropy=root, spawn_key=(zlib.crc32(stream.encode()), index))
    return int(seq.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1 << 32, 1], dtype=np.uint64)) >> 1
