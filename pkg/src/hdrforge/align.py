"""Background alignment of an exposure stack onto its reference frame.

Pipeline: exposure-compensate the moving frame so brightness is comparable,
detect Shi-Tomasi corners, match them into the reference by normalized
cross-correlation, fit a homography with RANSAC and refine it with a
normalized DLT over the inliers. Warping is bilinear with edge clamping, so
out-of-frame samples never inject black borders into patch extraction.
"""

from __future__ import annotations

import dataclasses
import logging

import cv2
import numpy as np
from scipy import ndimage

from .radiance import DEFAULT_GAMMA, ExposureStack, LdrImage

log = logging.getLogger(__name__)

RANSAC_THRESHOLD_PX = 2.0
RANSAC_ITERS = 2000
RANSAC_CONFIDENCE = 0.995
MIN_INLIERS = 4
SATURATION_LIMIT = 0.98  # corners inside clipped regions match unreliably


class AlignmentError(RuntimeError):
    """Raised when too few reliable matches exist to fit a homography."""


@dataclasses.dataclass(frozen=True)
class Homography:
    """3x3 projective transform mapping moving-frame points onto the reference."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        if abs(m[2, 2]) <= 1e-12:
            raise ValueError("cannot normalize: m[2][2] ~ 0")
        object.__setattr__(self, "m", m / m[2, 2])

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def inverse(self):
        return Homography(np.linalg.inv(self.m))

    def apply(self, pts):
        """Project N x 2 pixel coordinates (x, y)."""
        pts = np.asarray(pts, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        q = np.hstack([pts, ones]) @ self.m.T
        return q[:, :2] / q[:, 2:3]


@dataclasses.dataclass(frozen=True)
class MatchSet:
    """Corner correspondences (moving -> reference) with RANSAC inlier flags."""

    src: np.ndarray  # N x 2
    dst: np.ndarray  # N x 2
    inlier_mask: np.ndarray  # N bool

    @property
    def n_inliers(self):
        return int(self.inlier_mask.sum())


def _to_gray_u8(pixels):
    u8 = (np.clip(pixels, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    return cv2.cvtColor(u8, cv2.COLOR_RGB2GRAY)


def _exposure_compensate(moving, reference, gamma):
    """Gamma-lift the moving frame to the reference exposure so NCC sees comparable brightness."""
    ratio = reference.exposure_time / moving.exposure_time
    if abs(ratio - 1.0) < 1e-9:
        return moving.pixels
    return np.clip(moving.pixels * np.float32(ratio ** (1.0 / gamma)), 0.0, 1.0)


def find_matches(moving_gray, reference_gray, mask=None, max_corners=500, quality=0.01,
                 min_distance=8, patch_radius=9, search_radius=32, min_ncc=0.7):
    """Match Shi-Tomasi corners of the moving frame into the reference by NCC.

    An optional validity mask (nonzero = usable) is eroded by the template
    radius so every corner keeps a fully valid window. Returns a MatchSet with
    every candidate marked inlier (RANSAC prunes later).
    """
    h, w = moving_gray.shape
    if mask is not None:
        kernel = np.ones((2 * patch_radius + 1, 2 * patch_radius + 1), np.uint8)
        mask = cv2.erode(mask.astype(np.uint8), kernel)
    corners = cv2.goodFeaturesToTrack(moving_gray, maxCorners=max_corners,
                                      qualityLevel=quality, minDistance=min_distance,
                                      mask=mask)
    src, dst = [], []
    if corners is not None:
        for x, y in corners.reshape(-1, 2):
            xi, yi = int(round(x)), int(round(y))
            if xi - patch_radius < 0 or yi - patch_radius < 0 or \
               xi + patch_radius >= w or yi + patch_radius >= h:
                continue
            tpl = moving_gray[yi - patch_radius:yi + patch_radius + 1,
                              xi - patch_radius:xi + patch_radius + 1]
            y0 = max(yi - search_radius - patch_radius, 0)
            x0 = max(xi - search_radius - patch_radius, 0)
            y1 = min(yi + search_radius + patch_radius + 1, h)
            x1 = min(xi + search_radius + patch_radius + 1, w)
            window = reference_gray[y0:y1, x0:x1]
            if window.shape[0] <= tpl.shape[0] or window.shape[1] <= tpl.shape[1]:
                continue
            scores = cv2.matchTemplate(window, tpl, cv2.TM_CCOEFF_NORMED)
            _, best, _, loc = cv2.minMaxLoc(scores)
            if best < min_ncc:
                continue
            src.append([x, y])
            dst.append([x0 + loc[0] + patch_radius, y0 + loc[1] + patch_radius])
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    return MatchSet(src, dst, np.ones(len(src), dtype=bool))


def _normalized_dlt(src, dst):
    """Direct linear transform with Hartley normalization."""

    def normalizer(pts):
        c = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * c[0]],
                      [0, scale, -scale * c[1]],
                      [0, 0, 1.0]])
        return t

    ts = normalizer(src)
    td = normalizer(dst)
    s = (np.hstack([src, np.ones((len(src), 1))]) @ ts.T)
    d = (np.hstack([dst, np.ones((len(dst), 1))]) @ td.T)
    a = []
    for (x, y, _), (u, v, _) in zip(s, d):
        a.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    _, _, vt = np.linalg.svd(np.asarray(a))
    h = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(td) @ h @ ts)


def estimate_homography(moving, reference, gamma=DEFAULT_GAMMA, **match_kwargs):
    """Estimate the homography aligning `moving` onto `reference`.

    Raises AlignmentError when fewer than 4 RANSAC inliers survive; callers
    normally fall back to the identity.
    """
    if moving.pixels.shape != reference.pixels.shape:
        raise ValueError("frames must have equal size")
    mov_gray = _to_gray_u8(_exposure_compensate(moving, reference, gamma))
    ref_gray = _to_gray_u8(reference.pixels)
    unclipped = (moving.pixels.max(axis=2) < SATURATION_LIMIT) & \
        (reference.pixels.max(axis=2) < SATURATION_LIMIT)
    matches = find_matches(mov_gray, ref_gray, mask=unclipped, **match_kwargs)
    if len(matches.src) < MIN_INLIERS:
        raise AlignmentError(f"only {len(matches.src)} matches, need >= {MIN_INLIERS}")
    h, mask = cv2.findHomography(matches.src.astype(np.float32), matches.dst.astype(np.float32),
                                 cv2.RANSAC, RANSAC_THRESHOLD_PX,
                                 maxIters=RANSAC_ITERS, confidence=RANSAC_CONFIDENCE)
    if h is None:
        raise AlignmentError("RANSAC failed to fit a homography")
    inliers = mask.ravel().astype(bool)
    if inliers.sum() < MIN_INLIERS:
        raise AlignmentError(f"only {int(inliers.sum())} inliers, need >= {MIN_INLIERS}")
    return _normalized_dlt(matches.src[inliers], matches.dst[inliers])


def warp(image, h):
    """Resample an LDR frame under a homography (bilinear, edge-clamped).

    Output pixel (x, y) samples the input at h^-1 (x, y); size is preserved
    and the [0, 1] range survives because bilinear weights are convex.
    """
    height, width = image.pixels.shape[:2]
    inv = h.inverse().m
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    out = np.empty_like(image.pixels)
    for c in range(3):
        out[:, :, c] = ndimage.map_coordinates(
            image.pixels[:, :, c].astype(np.float64), [sy, sx], order=1, mode="nearest"
        ).astype(np.float32)
    return LdrImage(np.clip(out, 0.0, 1.0), image.exposure_bias, image.exposure_time)


def align_stack(stack, homographies=None, gamma=DEFAULT_GAMMA):
    """Warp every non-reference frame onto the reference frame's background.

    Precomputed homographies (one per frame, identity for the reference) skip
    estimation. A frame whose estimate fails stays unwarped with a warning.
    """
    if len(stack) == 1:
        return stack
    ref = stack.reference
    frames = []
    for i, frame in enumerate(stack.frames):
        if i == stack.reference_index:
            frames.append(frame)
            continue
        try:
            h = homographies[i] if homographies is not None else \
                estimate_homography(frame, ref, gamma=gamma)
            frames.append(warp(frame, h))
        except AlignmentError as exc:
            log.warning("alignment failed for frame %d (bias %+.1f): %s; keeping unwarped",
                        i, frame.exposure_bias, exc)
            frames.append(frame)
    return ExposureStack(tuple(frames), stack.reference_index)


def load_homographies(path):
    """Read a sidecar of 3x3 homographies, one 9-number row per frame."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 9:
                raise ValueError(f"expected 9 numbers per line, got {len(vals)}")
            out.append(Homography(np.array(vals).reshape(3, 3)))
    return out


def save_homographies(path, homographies):
    with open(path, "w") as f:
        for h in homographies:
            f.write(" ".join(f"{v:.12g}" for v in h.m.ravel()) + "\n")
