"""Radiometric core: linearization, exposure encoding, mu-law compression.

All pixel data is float32 in [0, 1], shape H x W x 3 (RGB). Types are frozen
dataclasses; every operation is pure, so everything here is safe to call from
multiple threads.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

DEFAULT_GAMMA = 2.2
DEFAULT_MU = 5000.0


class CalibrationError(ValueError):
    """Raised for malformed camera-response tables."""


class ShapeError(ValueError):
    """Raised when image/tensor shapes are inconsistent."""


def _as_pixels(arr, what="pixels"):
    # float64 end to end; float32 appears only at the network/store boundary
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{what} must be H x W x 3, got {arr.shape}")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{what} must lie in [0, 1], got range [{lo}, {hi}]")
    return arr


@dataclasses.dataclass(frozen=True)
class LdrImage:
    """One calibrated low-dynamic-range frame plus its exposure metadata.

    exposure_bias is in stops (log2 of relative exposure); exposure_time is
    relative seconds and defaults to 2**bias when not given explicitly.
    """

    pixels: np.ndarray
    exposure_bias: float = 0.0
    exposure_time: float = None  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_pixels(self.pixels))
        if self.exposure_time is None:
            object.__setattr__(self, "exposure_time", 2.0 ** float(self.exposure_bias))
        if not self.exposure_time > 0:
            raise ValueError(f"exposure_time must be > 0, got {self.exposure_time}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclasses.dataclass(frozen=True)
class RadianceImage:
    """HDR-domain RGB image, bounded to [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_pixels(self.pixels))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclasses.dataclass(frozen=True)
class ExposureStack:
    """Ordered exposure bracket (ascending bias) with a designated reference frame."""

    frames: tuple
    reference_index: int

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValueError("stack needs at least one frame")
        if not 0 <= self.reference_index < len(self.frames):
            raise ValueError(f"reference_index {self.reference_index} out of range")
        biases = [f.exposure_bias for f in self.frames]
        if any(b2 < b1 for b1, b2 in zip(biases, biases[1:])):
            raise ValueError(f"frames must be sorted ascending by exposure_bias, got {biases}")
        shapes = {f.pixels.shape for f in self.frames}
        if len(shapes) != 1:
            raise ShapeError(f"all frames must share one size, got {sorted(shapes)}")

    def __len__(self):
        return len(self.frames)

    @property
    def reference(self):
        return self.frames[self.reference_index]

    def relative_times(self):
        """Exposure times normalized so the reference frame has t = 1."""
        t_ref = self.reference.exposure_time
        return tuple(f.exposure_time / t_ref for f in self.frames)


@dataclasses.dataclass(frozen=True)
class CrfTable:
    """Inverse camera response sampled on a uniform intensity grid in [0, 1].

    samples is N x 3 (one column per channel), non-decreasing per column,
    with endpoints 0 -> 0 and 1 -> 1. Estimating the table from images is out
    of scope; it is supplied by the user (CSV, see hdr_io.read_crf_csv).
    """

    samples: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] < 2:
            raise CalibrationError(f"CRF table must be N x 3 with N >= 2, got {s.shape}")
        if np.any(np.diff(s, axis=0) < 0):
            raise CalibrationError("CRF table must be non-decreasing per channel")
        if not (np.allclose(s[0], 0.0, atol=1e-6) and np.allclose(s[-1], 1.0, atol=1e-6)):
            raise CalibrationError("CRF table endpoints must map 0 -> 0 and 1 -> 1")
        object.__setattr__(self, "samples", s)

    @property
    def grid(self):
        return np.linspace(0.0, 1.0, self.samples.shape[0])


@dataclasses.dataclass(frozen=True)
class TonemapParams:
    """Mu-law compression level; larger mu compresses highlights harder."""

    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")


@dataclasses.dataclass(frozen=True)
class NetworkInput:
    """Stacked per-frame [LDR | HDR-domain] planes ready for the merge network."""

    planes: np.ndarray  # k x H x W x 6, channels (I_r, I_g, I_b, H_r, H_g, H_b)
    reference_index: int


def linearize(image, crf=None):
    """Map an LDR frame through the inverse camera response.

    With no table the frame passes through unchanged (the gamma applied later
    by to_hdr_domain then acts as a rough response approximation).
    """
    if crf is None:
        return image
    grid = crf.grid
    out = np.empty_like(image.pixels)
    for c in range(3):
        out[:, :, c] = np.interp(image.pixels[:, :, c], grid, crf.samples[:, c])
    return LdrImage(out, image.exposure_bias, image.exposure_time)


def to_hdr_domain(image, gamma=DEFAULT_GAMMA, exposure_time=None):
    """Gamma-encode an LDR frame into the HDR domain: I**gamma / t, clamped to [0, 1].

    exposure_time overrides the frame's own time; pass the stack-relative time
    (reference frame = 1) so the medium exposure maps onto [0, 1] unclipped.
    """
    if not gamma > 1:
        raise ValueError(f"gamma must be > 1, got {gamma}")
    t = image.exposure_time if exposure_time is None else exposure_time
    if not t > 0:
        raise ValueError(f"exposure time must be > 0, got {t}")
    h = np.power(image.pixels, float(gamma)) / float(t)
    return RadianceImage(np.clip(h, 0.0, 1.0))


def mu_law(x, mu=DEFAULT_MU):
    """Forward mu-law on a bare array: log(1 + mu*x) / log(1 + mu)."""
    return np.log1p(mu * np.asarray(x, dtype=np.float64)) / math.log1p(mu)


def mu_law_inverse(y, mu=DEFAULT_MU):
    """Exact inverse of mu_law: ((1 + mu)**y - 1) / mu."""
    return np.expm1(np.asarray(y, dtype=np.float64) * math.log1p(mu)) / mu


def tonemap(h, params=TonemapParams()):
    """Mu-law range compression of an HDR image (strictly increasing, 0->0, 1->1)."""
    return RadianceImage(mu_law(h.pixels, params.mu))


def tonemap_inverse(t, params=TonemapParams()):
    """Invert tonemap; round-trips to within 1e-9."""
    return RadianceImage(np.clip(mu_law_inverse(t.pixels, params.mu), 0.0, 1.0))


def build_network_input(stack, gamma=DEFAULT_GAMMA):
    """Assemble the k x H x W x 6 network input from an aligned exposure stack.

    Each frame contributes [I_rgb | H_rgb] where H = to_hdr_domain(I) at the
    stack-relative exposure time. Frames keep stack order; the reference frame
    index is carried alongside.
    """
    if len(stack) < 2:
        raise ValueError(f"need at least 2 frames, got {len(stack)}")
    times = stack.relative_times()
    planes = np.empty((len(stack), stack.frames[0].height, stack.frames[0].width, 6), dtype=np.float32)
    for i, (frame, t) in enumerate(zip(stack.frames, times)):
        planes[i, :, :, :3] = frame.pixels
        planes[i, :, :, 3:] = to_hdr_domain(frame, gamma, t).pixels
    return NetworkInput(planes, stack.reference_index)
