"""Fan-beam system model with a flat detector.

The source sits at ``R_s * (cos b, sin b)`` for view angle ``b``; the detector
line passes through ``-R_d * (cos b, sin b)`` and runs along
``(-sin b, cos b)``. Detector element ``d`` is centered at
``u_d = (d - (D - 1) / 2) * pitch``. Each ray starts at the source, passes
through the element center and is integrated over the whole image grid.

Pixel boundaries are half-open: column ``j`` covers ``[x_j, x_j + h)`` and row
``i`` (row 0 on top) covers ``(y_i - h, y_i]``, so a ray running exactly
along a grid line is assigned to the pixel with the larger index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

FILTERS = ("ram-lak", "hann")
_CHUNK_VIEWS = 8


@dataclass(frozen=True)
class FanGeometry:
    image_size: int
    pixel_size: float
    source_to_center: float
    center_to_detector: float
    detector_count: int
    detector_pitch: float
    view_angles: tuple[float, ...]

    def __post_init__(self):
        if self.image_size < 1 or self.pixel_size <= 0:
            raise ValueError("image size and pixel size must be positive")
        if self.detector_count < 1 or self.detector_pitch <= 0:
            raise ValueError("detector needs at least one element of positive pitch")
        if self.source_to_center <= self.fov_radius:
            raise ValueError("source must lie outside the field of view")
        if self.center_to_detector <= 0:
            raise ValueError("center-to-detector distance must be positive")
        angles = np.asarray(self.view_angles, dtype=np.float64)
        if angles.ndim != 1 or angles.size < 1:
            raise ValueError("geometry needs at least one view angle")
        if angles.size > 1:
            steps = np.diff(angles)
            if np.any(steps <= 0):
                raise ValueError("view angles must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise ValueError("view angles must be evenly spaced")

    @classmethod
    def create(
        cls,
        image_size: int,
        views: int = 720,
        detectors: int = 720,
        source_to_center: float = 400.0,
        center_to_detector: float = 400.0,
        pixel_size: float | None = None,
        margin: float = 0.1,
    ) -> "FanGeometry":
        """Evenly spaced full-circle scan; pitch makes the detector cover the
        field of view plus ``margin``."""
        if pixel_size is None:
            pixel_size = 2.0 / image_size
        fov = 0.5 * image_size * pixel_size
        if source_to_center <= fov:
            raise ValueError("source must lie outside the field of view")
        half_fan = math.asin(fov / source_to_center)
        half_width = (source_to_center + center_to_detector) * math.tan(half_fan)
        pitch = 2.0 * (1.0 + margin) * half_width / detectors
        angles = tuple(2.0 * math.pi * v / views for v in range(views))
        return cls(image_size, pixel_size, source_to_center, center_to_detector,
                   detectors, pitch, angles)

    @property
    def views(self) -> int:
        return len(self.view_angles)

    @property
    def angles(self) -> np.ndarray:
        return np.asarray(self.view_angles, dtype=np.float64)

    @property
    def fov_radius(self) -> float:
        return 0.5 * self.image_size * self.pixel_size

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return self.views, self.detector_count

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.image_size, self.image_size

    @property
    def detector_positions(self) -> np.ndarray:
        d = np.arange(self.detector_count, dtype=np.float64)
        return (d - 0.5 * (self.detector_count - 1)) * self.detector_pitch

    def subset(self, indices) -> "FanGeometry":
        angles = self.angles[np.asarray(indices, dtype=np.int64)]
        return replace(self, view_angles=tuple(float(a) for a in angles))

    def ray_endpoints(self):
        """Source points and detector-element centers, each shaped (views, detectors, 2)."""
        b = self.angles[:, None]
        u = self.detector_positions[None, :]
        c, s = np.cos(b), np.sin(b)
        src = np.stack(np.broadcast_arrays(self.source_to_center * c, self.source_to_center * s), -1)
        det = np.stack(
            (-self.center_to_detector * c - u * s, -self.center_to_detector * s + u * c), -1
        )
        src = np.broadcast_to(src, det.shape)
        return src, det


@numba.njit(cache=True)
def _trace_ray(sx, sy, dx, dy, n, h, idx, seg):
    """Siddon traversal of the ray sx + a*dx, a >= 0. Returns the segment count."""
    half = 0.5 * n * h
    lo = -half
    inf = np.inf
    if dx != 0.0:
        a0 = (lo - sx) / dx
        a1 = (half - sx) / dx
        amin_x = min(a0, a1)
        amax_x = max(a0, a1)
    else:
        if sx < lo or sx >= half:
            return 0
        amin_x = -inf
        amax_x = inf
    if dy != 0.0:
        a0 = (lo - sy) / dy
        a1 = (half - sy) / dy
        amin_y = min(a0, a1)
        amax_y = max(a0, a1)
    else:
        if sy <= lo or sy > half:
            return 0
        amin_y = -inf
        amax_y = inf
    amin = max(0.0, max(amin_x, amin_y))
    amax = min(amax_x, amax_y)
    if not amax > amin:
        return 0

    length = math.sqrt(dx * dx + dy * dy)
    # Plane crossings in increasing parameter order for each axis.
    px = 0
    py = 0
    ax = np.empty(n + 1)
    ay = np.empty(n + 1)
    nx = 0
    ny = 0
    if dx != 0.0:
        for m in range(n + 1):
            k = m if dx > 0 else n - m
            ax[m] = (lo + k * h - sx) / dx
        nx = n + 1
    if dy != 0.0:
        for m in range(n + 1):
            k = m if dy > 0 else n - m
            ay[m] = (lo + k * h - sy) / dy
        ny = n + 1
    while px < nx and ax[px] <= amin:
        px += 1
    while py < ny and ay[py] <= amin:
        py += 1

    count = 0
    a_prev = amin
    while a_prev < amax:
        a_next = amax
        if px < nx and ax[px] < a_next:
            a_next = ax[px]
        if py < ny and ay[py] < a_next:
            a_next = ay[py]
        if a_next > a_prev:
            am = 0.5 * (a_prev + a_next)
            col = int(math.floor((sx + am * dx - lo) / h))
            row = int(math.floor((half - (sy + am * dy)) / h))
            if col < 0:
                col = 0
            elif col > n - 1:
                col = n - 1
            if row < 0:
                row = 0
            elif row > n - 1:
                row = n - 1
            idx[count] = row * n + col
            seg[count] = (a_next - a_prev) * length
            count += 1
        a_prev = a_next
        while px < nx and ax[px] <= a_prev:
            px += 1
        while py < ny and ay[py] <= a_prev:
            py += 1
    return count


@numba.njit(cache=True, parallel=True)
def _forward_kernel(image, src, det, n, h, out):
    views, dets = out.shape
    flat = image.ravel()
    for v in numba.prange(views):
        idx = np.empty(2 * n + 4, dtype=np.int64)
        seg = np.empty(2 * n + 4)
        for d in range(dets):
            sx = src[v, d, 0]
            sy = src[v, d, 1]
            cnt = _trace_ray(sx, sy, det[v, d, 0] - sx, det[v, d, 1] - sy, n, h, idx, seg)
            acc = 0.0
            for k in range(cnt):
                acc += flat[idx[k]] * seg[k]
            out[v, d] = acc


@numba.njit(cache=True, parallel=True)
def _back_kernel(sino, src, det, n, h, chunk, buffers):
    views, dets = sino.shape
    nchunks = buffers.shape[0]
    for c in numba.prange(nchunks):
        idx = np.empty(2 * n + 4, dtype=np.int64)
        seg = np.empty(2 * n + 4)
        buf = buffers[c]
        for v in range(c * chunk, min(views, (c + 1) * chunk)):
            for d in range(dets):
                val = sino[v, d]
                if val == 0.0:
                    continue
                sx = src[v, d, 0]
                sy = src[v, d, 1]
                cnt = _trace_ray(sx, sy, det[v, d, 0] - sx, det[v, d, 1] - sy, n, h, idx, seg)
                for k in range(cnt):
                    buf[idx[k]] += val * seg[k]


def _check_image(image, geom: FanGeometry):
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != geom.image_shape:
        raise ValueError(f"image shape {image.shape[-2:]} does not match geometry {geom.image_shape}")
    return image


def _check_sino(sino, geom: FanGeometry):
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape[-2:] != geom.sinogram_shape:
        raise ValueError(
            f"sinogram shape {sino.shape[-2:]} does not match geometry {geom.sinogram_shape}"
        )
    return sino


def forward_project(image, geom: FanGeometry) -> np.ndarray:
    """Ray-driven line integrals; leading batch dimensions are looped over."""
    image = _check_image(image, geom)
    src, det = geom.ray_endpoints()
    src = np.ascontiguousarray(src)
    det = np.ascontiguousarray(det)
    batch = image.reshape(-1, *geom.image_shape)
    out = np.empty((batch.shape[0], *geom.sinogram_shape))
    for b in range(batch.shape[0]):
        _forward_kernel(np.ascontiguousarray(batch[b]), src, det,
                        geom.image_size, geom.pixel_size, out[b])
    return out.reshape(*image.shape[:-2], *geom.sinogram_shape)


def back_project(sino, geom: FanGeometry) -> np.ndarray:
    """Exact adjoint of :func:`forward_project`.

    Views are accumulated in fixed chunks and the chunk buffers summed in
    order, so the result does not depend on the number of worker threads.
    """
    sino = _check_sino(sino, geom)
    src, det = geom.ray_endpoints()
    src = np.ascontiguousarray(src)
    det = np.ascontiguousarray(det)
    n = geom.image_size
    nchunks = -(-geom.views // _CHUNK_VIEWS)
    batch = sino.reshape(-1, *geom.sinogram_shape)
    out = np.empty((batch.shape[0], n, n))
    for b in range(batch.shape[0]):
        buffers = np.zeros((nchunks, n * n))
        _back_kernel(np.ascontiguousarray(batch[b]), src, det, n, geom.pixel_size,
                     _CHUNK_VIEWS, buffers)
        acc = np.zeros(n * n)
        for c in range(nchunks):
            acc += buffers[c]
        out[b] = acc.reshape(n, n)
    return out.reshape(*sino.shape[:-2], n, n)


def ramp_filter_response(length: int, spacing: float, kind: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited spatial ramp kernel on an FFT grid of ``length``."""
    if kind not in FILTERS:
        raise ValueError(f"unknown filter {kind!r}; expected one of {FILTERS}")
    k = np.arange(length)
    k = np.where(k <= length // 2, k, k - length)
    kernel = np.zeros(length)
    kernel[0] = 1.0 / (4.0 * spacing**2)
    odd = k % 2 == 1
    kernel[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    response = np.real(np.fft.fft(kernel))
    if kind == "hann":
        f = np.fft.fftfreq(length)
        response = response * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    return response


def fbp(sino, geom: FanGeometry, filter_kind: str = "ram-lak") -> np.ndarray:
    """Fan-beam filtered back-projection for a flat detector.

    Cosine pre-weighting on the virtual detector through the rotation center,
    ramp filtering, then distance-weighted pixel-driven back-projection with a
    Riemann sum over views. Views are assumed to span the full circle evenly.
    """
    sino = _check_sino(sino, geom)
    if geom.views < 2:
        raise ValueError("filtered back-projection needs at least two views")
    if filter_kind not in FILTERS:
        raise ValueError(f"unknown filter {filter_kind!r}; expected one of {FILTERS}")
    rs = geom.source_to_center
    scale = rs / (rs + geom.center_to_detector)
    s = geom.detector_positions * scale
    a = geom.detector_pitch * scale
    D = geom.detector_count
    nfft = 1 << int(math.ceil(math.log2(2 * D - 1)))
    response = ramp_filter_response(nfft, a, filter_kind)
    weight = rs / np.sqrt(rs * rs + s * s)
    dbeta = 2.0 * math.pi / geom.views

    n = geom.image_size
    h = geom.pixel_size
    coords = (np.arange(n) + 0.5) * h - 0.5 * n * h
    X = coords[None, :]
    Y = coords[::-1, None]
    cos_b = np.cos(geom.angles)
    sin_b = np.sin(geom.angles)

    batch = sino.reshape(-1, *geom.sinogram_shape)
    out = np.zeros((batch.shape[0], n, n))
    for b in range(batch.shape[0]):
        padded = np.zeros((geom.views, nfft))
        padded[:, :D] = batch[b] * weight
        q = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))[:, :D]
        q *= 0.5 * a
        img = np.zeros((n, n))
        for v in range(geom.views):
            t = X * cos_b[v] + Y * sin_b[v]
            w = -X * sin_b[v] + Y * cos_b[v]
            dist = rs - t
            img += (rs / dist) ** 2 * np.interp(w * rs / dist, s, q[v], left=0.0, right=0.0)
        out[b] = img * dbeta
    return out.reshape(*sino.shape[:-2], n, n)


def dense_system_matrix(geom: FanGeometry, n: int | None = None) -> np.ndarray:
    """Explicit system matrix by clipping every ray against every pixel box.

    Verification oracle only: it shares no traversal logic with the Siddon
    kernels. Rows are ordered (view, detector); columns follow the row-major
    pixel order.
    """
    n = geom.image_size if n is None else n
    if n != geom.image_size:
        raise ValueError("matrix size must match the geometry image size")
    if n > 32:
        raise ValueError(f"dense system matrix limited to n <= 32, got {n}")
    h = geom.pixel_size
    src, det = geom.ray_endpoints()
    sx = src[..., 0].reshape(-1, 1)
    sy = src[..., 1].reshape(-1, 1)
    dx = det[..., 0].reshape(-1, 1) - sx
    dy = det[..., 1].reshape(-1, 1) - sy
    half = 0.5 * n * h
    j = np.arange(n)
    x0 = np.tile(-half + j * h, n)[None, :]
    x1 = x0 + h
    y1 = np.repeat(half - j * h, n)[None, :]
    y0 = y1 - h

    def slab(s, d, lo, hi, upper_closed):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - s) / d
            tb = (hi - s) / d
        t_in = np.where(d != 0, np.minimum(ta, tb), -np.inf)
        t_out = np.where(d != 0, np.maximum(ta, tb), np.inf)
        if upper_closed:
            inside = (s > lo) & (s <= hi)
        else:
            inside = (s >= lo) & (s < hi)
        parallel_miss = (d == 0) & ~inside
        return t_in, t_out, parallel_miss

    tx_in, tx_out, miss_x = slab(sx, dx, x0, x1, upper_closed=False)
    ty_in, ty_out, miss_y = slab(sy, dy, y0, y1, upper_closed=True)
    t_in = np.maximum(np.maximum(tx_in, ty_in), 0.0)
    t_out = np.minimum(tx_out, ty_out)
    lengths = np.clip(t_out - t_in, 0.0, None) * np.hypot(dx, dy)
    lengths[miss_x | miss_y] = 0.0
    return lengths
