"""Training-data pipeline: patch extraction, dihedral augmentation, motion-aware
oversampling, and scene/split containers.

Patches carry the ready-to-train network inputs (k planes of [LDR | HDR-domain]
channels) plus the ground-truth radiance crop, so training never touches the
original scenes again.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import metrics
from .radiance import DEFAULT_GAMMA, build_network_input

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclasses.dataclass(frozen=True)
class Scene:
    """One background-aligned exposure stack with its ground-truth radiance."""

    stack: object  # ExposureStack
    ground_truth: object  # RadianceImage
    name: str

    def __post_init__(self):
        ref = self.stack.frames[0].pixels.shape
        if self.ground_truth.pixels.shape != ref:
            raise ValueError(
                f"ground truth {self.ground_truth.pixels.shape} does not match frames {ref}")


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test scene-name lists."""

    train_scenes: tuple
    test_scenes: tuple

    def __post_init__(self):
        object.__setattr__(self, "train_scenes", tuple(self.train_scenes))
        object.__setattr__(self, "test_scenes", tuple(self.test_scenes))
        overlap = set(self.train_scenes) & set(self.test_scenes)
        if overlap:
            raise ValueError(f"train/test scene lists overlap: {sorted(overlap)}")


@dataclasses.dataclass(frozen=True)
class PatchRecord:
    """One training example: k input planes, target radiance crop, motion flag."""

    inputs: np.ndarray  # k x size x size x 6 float32
    target: np.ndarray  # size x size x 3 float32
    motion_flag: bool
    provenance: str  # "<scene>|y<row>x<col>|aug<id>"

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.ascontiguousarray(self.inputs, dtype=np.float32))
        object.__setattr__(self, "target", np.ascontiguousarray(self.target, dtype=np.float32))
        if self.inputs.ndim != 4 or self.inputs.shape[3] != 6:
            raise ValueError(f"inputs must be k x s x s x 6, got {self.inputs.shape}")
        if self.target.shape != self.inputs.shape[1:3] + (3,):
            raise ValueError(
                f"target {self.target.shape} does not match inputs {self.inputs.shape}")

    @property
    def k(self):
        return self.inputs.shape[0]

    @property
    def size(self):
        return self.inputs.shape[1]


def patch_grid(height, width, size, stride):
    """Row-major top-left offsets of every full patch on the stride grid."""
    if height < size or width < size:
        return []
    rows = (height - size) // stride + 1
    cols = (width - size) // stride + 1
    return [(r * stride, c * stride) for r in range(rows) for c in range(cols)]


def motion_score(stack, region, gamma=DEFAULT_GAMMA):
    """Foreground-motion score of a region: 1 - min pairwise SSIM, in [0, 1].

    Frames are compared in the exposure-normalized HDR domain (luminance) so an
    exposure difference alone does not read as motion.
    """
    y0, x0, h, w = region
    net_in = build_network_input(stack, gamma)
    lums = [net_in.planes[i, y0:y0 + h, x0:x0 + w, 3:] @ LUMA
            for i in range(len(stack))]
    worst = min(metrics.ssim(lums[i], lums[j])
                for i in range(len(lums)) for j in range(i + 1, len(lums)))
    return float(np.clip(1.0 - worst, 0.0, 1.0))


def extract_patches(scene, size=256, stride=64, gamma=DEFAULT_GAMMA, motion_threshold=None):
    """Cut a scene into size x size patches on a stride grid, row-major.

    Count is (floor((H-size)/stride)+1) * (floor((W-size)/stride)+1). With a
    motion_threshold, each patch region is SSIM-scored across exposures and
    flagged when score > threshold; with None all flags stay False.
    """
    h, w = scene.ground_truth.pixels.shape[:2]
    offsets = patch_grid(h, w, size, stride)
    if not offsets:
        log.warning("scene %s (%dx%d) smaller than patch size %d; no patches",
                    scene.name, h, w, size)
        return []
    net_in = build_network_input(scene.stack, gamma)
    lums = net_in.planes[:, :, :, 3:] @ LUMA  # k x H x W exposure-normalized luminance
    records = []
    for y0, x0 in offsets:
        flag = False
        if motion_threshold is not None:
            worst = min(metrics.ssim(lums[i, y0:y0 + size, x0:x0 + size],
                                     lums[j, y0:y0 + size, x0:x0 + size])
                        for i in range(lums.shape[0]) for j in range(i + 1, lums.shape[0]))
            flag = bool(np.clip(1.0 - worst, 0.0, 1.0) > motion_threshold)
        records.append(PatchRecord(
            inputs=np.ascontiguousarray(net_in.planes[:, y0:y0 + size, x0:x0 + size, :]),
            target=np.ascontiguousarray(scene.ground_truth.pixels[y0:y0 + size, x0:x0 + size, :]),
            motion_flag=flag,
            provenance=f"{scene.name}|y{y0}x{x0}|aug0",
        ))
    return records


def _dihedral(arr, element, hw_axes):
    """Apply dihedral-group element 0..7: clockwise quarter-turns (element % 4),
    then a horizontal flip for elements >= 4. Under one clockwise turn pixel
    (r, c) of an N x N patch lands at (c, N-1-r)."""
    rot, flip = element % 4, element >= 4
    out = np.rot90(arr, -rot, axes=hw_axes)
    if flip:
        out = np.flip(out, axis=hw_axes[1])
    return np.ascontiguousarray(out)


def augment(record):
    """All 8 dihedral variants of a square patch; element 0 is the identity.

    The same transform hits every input plane and the target, so geometry stays
    consistent across the record.
    """
    if record.size != record.inputs.shape[2]:
        raise ValueError("augmentation requires square patches")
    base = record.provenance.rsplit("|aug", 1)[0]
    return [
        PatchRecord(
            inputs=_dihedral(record.inputs, t, hw_axes=(1, 2)),
            target=_dihedral(record.target, t, hw_axes=(0, 1)),
            motion_flag=record.motion_flag,
            provenance=f"{base}|aug{t}",
        )
        for t in range(8)
    ]


def oversample(records, factor=2, seed=0):
    """Replicate motion-flagged records `factor`-fold and shuffle deterministically.

    A flagged record appears factor times in total, an unflagged one once;
    factor 1 leaves the multiset unchanged.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    out = []
    for rec in records:
        out.extend([rec] * (factor if rec.motion_flag else 1))
    order = np.random.default_rng(seed).permutation(len(out))
    return [out[i] for i in order]
