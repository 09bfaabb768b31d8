"""View masks, sparse acquisition, angular interpolation and data consistency.

Sinograms are arrays shaped ``(..., views, detectors)``; every operation here
acts on whole view rows and broadcasts over leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SubsampleMask:
    total_views: int
    kept_view_indices: tuple[int, ...]

    def __post_init__(self):
        idx = self.kept_view_indices
        if self.total_views < 1:
            raise ValueError("mask needs at least one view")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("kept view indices must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.total_views):
            raise ValueError("kept view index out of range")

    @property
    def kept_views(self) -> int:
        return len(self.kept_view_indices)

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.kept_view_indices, dtype=np.int64)

    @property
    def rows(self) -> np.ndarray:
        """Binary column vector ``(total_views, 1)`` broadcastable over detectors."""
        r = np.zeros((self.total_views, 1))
        r[self.indices, 0] = 1.0
        return r

    def complement(self) -> "SubsampleMask":
        kept = set(self.kept_view_indices)
        return SubsampleMask(self.total_views, tuple(v for v in range(self.total_views) if v not in kept))

    def issubset(self, other: "SubsampleMask") -> bool:
        return (self.total_views == other.total_views
                and set(self.kept_view_indices) <= set(other.kept_view_indices))

    def to_text(self) -> str:
        return f"{self.total_views}: " + " ".join(str(i) for i in self.kept_view_indices)

    @classmethod
    def from_text(cls, text: str) -> "SubsampleMask":
        total, sep, rest = text.partition(":")
        if not sep:
            raise ValueError(f"malformed mask {text!r}")
        return cls(int(total), tuple(int(v) for v in rest.split()))


def equidistant_mask(total_views: int, kept_views: int) -> SubsampleMask:
    if kept_views < 1 or total_views % kept_views:
        raise ValueError(f"{kept_views} kept views do not evenly divide {total_views} views")
    stride = total_views // kept_views
    return SubsampleMask(total_views, tuple(range(0, total_views, stride)))


def _check_views(x, mask: SubsampleMask):
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] != mask.total_views:
        raise ValueError(f"sinogram with shape {x.shape} does not have {mask.total_views} views")
    return x


def apply_mask(x, mask: SubsampleMask) -> np.ndarray:
    x = _check_views(x, mask)
    return x * mask.rows


def extract_sparse(x, mask: SubsampleMask) -> np.ndarray:
    """Compact sinogram holding only the kept rows."""
    x = _check_views(x, mask)
    return x[..., mask.indices, :]


def zero_fill(y, mask: SubsampleMask) -> np.ndarray:
    """Inverse of :func:`extract_sparse` up to the dropped rows, which are zero."""
    y = np.asarray(y)
    if y.ndim < 2 or y.shape[-2] != mask.kept_views:
        raise ValueError(f"compact sinogram with shape {y.shape} does not have {mask.kept_views} views")
    out = np.zeros((*y.shape[:-2], mask.total_views, y.shape[-1]), dtype=y.dtype)
    out[..., mask.indices, :] = y
    return out


def interpolate_sinogram(u, target_views: int) -> np.ndarray:
    """Linear interpolation along the periodic view axis; detector axis untouched.

    Input row ``k`` lands on output row ``k * target_views / views``; the last
    input row interpolates toward the first across the 2*pi wrap.
    """
    u = np.asarray(u, dtype=np.float64)
    views = u.shape[-2]
    if views < 2:
        raise ValueError("angular interpolation needs at least two views")
    if target_views % views:
        raise ValueError(f"{target_views} target views is not a multiple of {views}")
    stride = target_views // views
    frac = (np.arange(stride) / stride)[:, None]
    nxt = np.roll(u, -1, axis=-2)
    rows = u[..., :, None, :] * (1.0 - frac) + nxt[..., :, None, :] * frac
    # Kept rows are copied verbatim (frac == 0 already reproduces them; this
    # keeps them bit-exact regardless of rounding in the blend).
    rows[..., :, 0, :] = u
    return rows.reshape(*u.shape[:-2], target_views, u.shape[-1])


def data_consistency(x_tau, y, mask: SubsampleMask, lam: float = 0.0) -> np.ndarray:
    """Closed-form minimizer of ``|P x - y|^2 + lam * |x - x_tau|^2``.

    Rows outside the mask are returned unchanged; measured rows become
    ``(y + lam * x_tau) / (1 + lam)``. ``y`` is the compact measurement.
    ``lam = inf`` is the limit that ignores the measurement entirely.
    """
    if not lam >= 0:
        raise ValueError("data-consistency weight must be nonnegative")
    x_tau = _check_views(x_tau, mask)
    y = np.asarray(y)
    if y.shape[-2] != mask.kept_views or y.shape[-1] != x_tau.shape[-1]:
        raise ValueError(f"measurement shape {y.shape} does not match the mask")
    out = np.array(x_tau, dtype=np.float64, copy=True)
    idx = mask.indices
    if lam == 0:
        out[..., idx, :] = y
    elif math.isinf(lam):
        pass
    else:
        out[..., idx, :] = (y + lam * x_tau[..., idx, :]) / (1.0 + lam)
    return out
