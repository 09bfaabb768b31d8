"""Synthetic ellipse phantoms and Poisson-noise simulation.

Images live on an n x n raster covering the square [-1, 1]^2 (pixel size
2/n). Row 0 is the top of the image, so pixel (i, j) has its center at
``x = -1 + (j + 0.5) * 2/n`` and ``y = 1 - (i + 0.5) * 2/n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Ellipse:
    center_x: float
    center_y: float
    semi_axis_a: float
    semi_axis_b: float
    rotation: float  # radians, counter-clockwise
    density: float

    def __post_init__(self):
        if self.semi_axis_a <= 0 or self.semi_axis_b <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def contains(self, x, y):
        """Boolean membership of points (x, y); boundary counts as inside."""
        dx = np.asarray(x, dtype=np.float64) - self.center_x
        dy = np.asarray(y, dtype=np.float64) - self.center_y
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        u = (dx * c + dy * s) / self.semi_axis_a
        v = (-dx * s + dy * c) / self.semi_axis_b
        return u * u + v * v <= 1.0


@dataclass(frozen=True)
class EllipsePhantomSpec:
    ellipses: tuple[Ellipse, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.ellipses)

    def to_text(self) -> str:
        lines = [f"count = {len(self.ellipses)}"]
        for k, e in enumerate(self.ellipses):
            lines.append(
                f"ellipse.{k} = {e.center_x!r} {e.center_y!r} {e.semi_axis_a!r} "
                f"{e.semi_axis_b!r} {e.rotation!r} {e.density!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EllipsePhantomSpec":
        entries = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed phantom spec line: {raw!r}")
            entries[key.strip()] = value.strip()
        try:
            count = int(entries.pop("count"))
        except KeyError:
            raise ValueError("phantom spec is missing 'count'") from None
        ellipses = []
        for k in range(count):
            fields = entries.pop(f"ellipse.{k}", None)
            if fields is None:
                raise ValueError(f"phantom spec is missing ellipse.{k}")
            values = [float(v) for v in fields.split()]
            if len(values) != 6:
                raise ValueError(f"ellipse.{k} needs 6 values, got {len(values)}")
            ellipses.append(Ellipse(*values))
        if entries:
            raise ValueError(f"unknown phantom spec keys: {sorted(entries)}")
        return cls(tuple(ellipses))


# Modified Shepp-Logan (Toft) parameters: density, a, b, x0, y0, angle in degrees.
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def shepp_logan_spec() -> EllipsePhantomSpec:
    return EllipsePhantomSpec(
        tuple(
            Ellipse(x0, y0, a, b, np.deg2rad(phi), rho)
            for rho, a, b, x0, y0, phi in _SHEPP_LOGAN
        )
    )


def pixel_centers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Physical (x, y) coordinates of every pixel center, each shaped (n, n)."""
    h = 2.0 / n
    coords = -1.0 + (np.arange(n) + 0.5) * h
    x = np.broadcast_to(coords[None, :], (n, n))
    y = np.broadcast_to(coords[::-1, None], (n, n))
    return x, y


def rasterize(spec: EllipsePhantomSpec, n: int) -> np.ndarray:
    """Sample the phantom at pixel centers: sum of densities of containing ellipses."""
    x, y = pixel_centers(n)
    image = np.zeros((n, n))
    for e in spec.ellipses:
        image[e.contains(x, y)] += e.density
    return image


def shepp_logan(n: int) -> np.ndarray:
    if n < 16:
        raise ValueError(f"phantom size must be at least 16, got {n}")
    # 1.0 - 0.8 - 0.2 style overlaps leave -1e-17 residues; the phantom is nonnegative.
    return np.clip(rasterize(shepp_logan_spec(), n), 0.0, 1.0)


def _fits_fov(e: Ellipse, radius: float = 0.95) -> bool:
    return np.hypot(e.center_x, e.center_y) + max(e.semi_axis_a, e.semi_axis_b) <= radius


def random_phantom(spec_count: int, seed: int, n: int = 64) -> tuple[EllipsePhantomSpec, np.ndarray]:
    """Random body ellipse plus ``spec_count - 1`` inner features.

    All densities are positive so the raster is nonnegative. Every ellipse
    lies inside the disk of radius 0.95.
    """
    if not 1 <= spec_count <= 16:
        raise ValueError(f"spec_count must be in [1, 16], got {spec_count}")
    rng = np.random.default_rng(seed)
    body = Ellipse(
        center_x=rng.uniform(-0.05, 0.05),
        center_y=rng.uniform(-0.05, 0.05),
        semi_axis_a=rng.uniform(0.6, 0.85),
        semi_axis_b=rng.uniform(0.6, 0.85),
        rotation=rng.uniform(0.0, np.pi),
        density=rng.uniform(0.3, 0.6),
    )
    ellipses = [body]
    while len(ellipses) < spec_count:
        candidate = Ellipse(
            center_x=rng.uniform(-0.6, 0.6),
            center_y=rng.uniform(-0.6, 0.6),
            semi_axis_a=rng.uniform(0.05, 0.3),
            semi_axis_b=rng.uniform(0.05, 0.3),
            rotation=rng.uniform(0.0, np.pi),
            density=rng.uniform(0.05, 0.4),
        )
        if _fits_fov(candidate):
            ellipses.append(candidate)
    spec = EllipsePhantomSpec(tuple(ellipses))
    return spec, rasterize(spec, n)


@dataclass(frozen=True)
class NoiseSpec:
    enabled: bool = True
    incident_photons: float = 1e6
    rng_seed: int = 0

    def __post_init__(self):
        if self.enabled and not self.incident_photons > 0:
            raise ValueError("incident photon count must be positive")


def add_poisson_noise(sino: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """Transmission-domain Poisson noise; counts are clamped at one photon."""
    sino = np.asarray(sino, dtype=np.float64)
    if not noise.enabled:
        return sino
    if not np.all(np.isfinite(sino)):
        raise ValueError("sinogram contains non-finite entries")
    if np.any(sino < 0):
        raise ValueError("sinogram line integrals must be nonnegative")
    rng = np.random.default_rng(noise.rng_seed)
    i0 = noise.incident_photons
    counts = rng.poisson(i0 * np.exp(-sino))
    return -np.log(np.maximum(counts, 1) / i0)


def phantom_set(count: int, seed: int, n: int = 64, min_ellipses: int = 3,
                max_ellipses: int = 8) -> tuple[list[EllipsePhantomSpec], np.ndarray]:
    """``count`` random phantoms with ellipse counts drawn from ``[min, max]``."""
    if count < 1:
        raise ValueError("phantom count must be positive")
    rng = np.random.default_rng(seed)
    specs, images = [], []
    for _ in range(count):
        k = int(rng.integers(min_ellipses, max_ellipses + 1))
        spec, img = random_phantom(k, int(rng.integers(0, 2**63 - 1)), n)
        specs.append(spec)
        images.append(img)
    return specs, np.stack(images)
