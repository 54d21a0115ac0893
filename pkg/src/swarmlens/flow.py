"""Dense optical flow between grayscale frames and classifier input packing.

Flow is estimated with Horn-Schunck (global variational smoothness,
Jacobi relaxation) at the frame's native resolution, then block-mean
reduced to the 64x64 working grid. Two consecutive flow fields are
packed into one 4-channel sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ShapeError, ValidationError

SAMPLE_SIZE = 64  # spatial side of a classifier input
HS_ALPHA = 1.0
HS_ITERS = 200
FRAME_GAP_S = 0.5  # seconds between the two frames of one flow
PAIR_GAP_S = 0.5   # seconds between the starts of the two flows of one sample


def _check_image_array(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} pixel values must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class GrayImage:
    """Single-channel frame, row-major float64 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _check_image_array(self.pixels, "pixels"))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel motion between two frames: u horizontal, v vertical."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ShapeError(f"u and v must be 2-D with identical dims, "
                             f"got {u.shape} and {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValidationError("flow components must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class Sample:
    """One classifier input: two flow fields stacked as (u1, v1, u2, v2).

    label 0 = Stable, 1 = Unstable; timestamp in episode seconds.
    """

    tensor: np.ndarray
    label: int
    timestamp: float

    def __post_init__(self):
        tensor = np.ascontiguousarray(self.tensor, dtype=np.float64)
        if tensor.shape != (4, SAMPLE_SIZE, SAMPLE_SIZE):
            raise ShapeError(f"sample tensor must be (4, {SAMPLE_SIZE}, {SAMPLE_SIZE}), "
                             f"got {tensor.shape}")
        if not np.isfinite(tensor).all():
            raise ValidationError("sample tensor must be finite")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "tensor", tensor)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    def flows(self) -> tuple[FlowField, FlowField]:
        """Unpack the two flow fields back out of the channel stack."""
        t = self.tensor
        return FlowField(t[0], t[1]), FlowField(t[2], t[3])


def to_gray(rgb) -> GrayImage:
    """Rec.601 luma (0.299 R + 0.587 G + 0.114 B) of a 3xHxW image in [0, 1]."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected a 3xHxW image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("rgb values must be finite")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("rgb channel values must lie in [0, 1]")
    luma = 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]
    return GrayImage(np.clip(luma, 0.0, 1.0))


@numba.njit(parallel=True, cache=True)
def _hs_sweeps(ix, iy, it, inv_den, iters):  # pragma: no cover - exercised via horn_schunck
    h, w = ix.shape
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    for _ in range(iters):
        un = np.empty((h, w))
        vn = np.empty((h, w))
        for i in numba.prange(h):
            im = i - 1 if i > 0 else 0
            ip = i + 1 if i < h - 1 else h - 1
            for j in range(w):
                jm = j - 1 if j > 0 else 0
                jp = j + 1 if j < w - 1 else w - 1
                ubar = ((u[im, jm] + u[im, jp] + u[ip, jm] + u[ip, jp]) / 12.0
                        + (u[im, j] + u[ip, j] + u[i, jm] + u[i, jp]) / 6.0)
                vbar = ((v[im, jm] + v[im, jp] + v[ip, jm] + v[ip, jp]) / 12.0
                        + (v[im, j] + v[ip, j] + v[i, jm] + v[i, jp]) / 6.0)
                frac = (ix[i, j] * ubar + iy[i, j] * vbar + it[i, j]) * inv_den[i, j]
                un[i, j] = ubar - ix[i, j] * frac
                vn[i, j] = vbar - iy[i, j] * frac
        u, v = un, vn
    return u, v


def horn_schunck(a: GrayImage, b: GrayImage,
                 alpha: float = HS_ALPHA, iters: int = HS_ITERS) -> FlowField:
    """Horn-Schunck flow from frame a to frame b via Jacobi relaxation.

    Spatial derivatives are central differences averaged over the two
    frames; the temporal derivative is the frame difference smoothed by
    a 2x2 mean (edge-replicated). The smoothness weight alpha trades
    data fidelity against flow regularity.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValidationError(f"frame dims differ: {a.pixels.shape} vs {b.pixels.shape}")
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")

    ix = 0.5 * (np.gradient(a.pixels, axis=1) + np.gradient(b.pixels, axis=1))
    iy = 0.5 * (np.gradient(a.pixels, axis=0) + np.gradient(b.pixels, axis=0))
    diff = np.pad(b.pixels - a.pixels, ((0, 1), (0, 1)), mode="edge")
    it = 0.25 * (diff[:-1, :-1] + diff[:-1, 1:] + diff[1:, :-1] + diff[1:, 1:])
    inv_den = 1.0 / (alpha * alpha + ix * ix + iy * iy)

    u, v = _hs_sweeps(ix, iy, it, inv_den, int(iters))
    return FlowField(u, v)


def _block_mean(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape
    if h % size or w % size:
        raise ValidationError(f"dims {h}x{w} are not integer multiples of {size}")
    return arr.reshape(size, h // size, size, w // size).mean(axis=(1, 3))


def downsample(obj, size: int = SAMPLE_SIZE):
    """Non-overlapping block mean down to size x size, same kind as the input."""
    if size < 1:
        raise ValidationError(f"size must be >= 1, got {size}")
    if isinstance(obj, FlowField):
        return FlowField(_block_mean(obj.u, size), _block_mean(obj.v, size))
    if isinstance(obj, GrayImage):
        return GrayImage(_block_mean(obj.pixels, size))
    raise ValidationError(f"downsample expects FlowField or GrayImage, got {type(obj).__name__}")


def make_sample(f1: FlowField, f2: FlowField, label: int, timestamp: float) -> Sample:
    """Pack two 64x64 flow fields into one classifier input."""
    for name, f in (("f1", f1), ("f2", f2)):
        if f.u.shape != (SAMPLE_SIZE, SAMPLE_SIZE):
            raise ShapeError(f"{name} must be {SAMPLE_SIZE}x{SAMPLE_SIZE}, got {f.u.shape}")
    tensor = np.stack([f1.u, f1.v, f2.u, f2.v])
    return Sample(tensor, label, timestamp)


def pair_frame_times(t: float, frame_gap: float = FRAME_GAP_S,
                     pair_gap: float = PAIR_GAP_S) -> tuple[float, float, float, float]:
    """Frame timestamps (a1, b1, a2, b2) for the sample taken at t.

    Flow 1 spans (t, t+frame_gap); flow 2 starts pair_gap after flow 1.
    With the defaults the two flows share the middle frame.
    """
    if frame_gap <= 0 or pair_gap <= 0:
        raise ValidationError("frame_gap and pair_gap must be positive")
    return (t, t + frame_gap, t + pair_gap, t + pair_gap + frame_gap)
