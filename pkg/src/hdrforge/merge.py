"""Full-image merging: reference slotting, padding, tiled inference, blending.

Networks are trained on fixed-k inputs with the reference in the middle slot,
so merging fewer frames (or a different reference) re-arranges the stack and
duplicates the reference into the empty slots; feeding {Low, Low, Medium}
yields an output registered to the low exposure.

Full frames rarely match the training patch size, so inference reflect-pads to
the variant's divisibility and, above a size threshold, runs overlapping tiles
blended with linear ramps.
"""

from __future__ import annotations

import numpy as np

from . import net as netmod
from .radiance import DEFAULT_GAMMA, ExposureStack, RadianceImage, build_network_input

TILE_SIZE = 256
TILE_OVERLAP = 32


def arrange_for_reference(frames, reference_index, k):
    """Slot frames into a k-wide stack with the reference in the middle.

    Frames must be sorted ascending by exposure bias. Missing slots on either
    side are filled with duplicates of the reference frame (adjacent to it, so
    the bias ordering survives). Raises when a side has more frames than slots.
    """
    frames = list(frames)
    if not 0 <= reference_index < len(frames):
        raise ValueError(f"reference_index {reference_index} out of range")
    mid = k // 2
    below = frames[:reference_index]
    above = frames[reference_index + 1:]
    n_below, n_above = mid, k - mid - 1
    if len(below) > n_below or len(above) > n_above:
        raise ValueError(
            f"cannot slot {len(frames)} frames with reference {reference_index} into k={k}; "
            f"sides hold at most {n_below}/{n_above} frames")
    ref = frames[reference_index]
    slotted = below + [ref] * (n_below - len(below)) + [ref] \
        + [ref] * (n_above - len(above)) + above
    return ExposureStack(tuple(slotted), mid)


def _pad_to_divisor(planes, divisor):
    _, h, w, _ = planes.shape
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph or pw:
        planes = np.pad(planes, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")
    return planes, (h, w)


def _tile_starts(length, tile, overlap):
    if length <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def _ramp(tile, overlap):
    up = np.minimum(np.arange(1, tile + 1), np.arange(tile, 0, -1))
    return np.minimum(up / (overlap + 1.0), 1.0)


def predict(network, stack, gamma=DEFAULT_GAMMA, tile=TILE_SIZE, overlap=TILE_OVERLAP):
    """Merge an aligned exposure stack into radiance with the given network.

    tile=None forces a single whole-image forward pass (memory permitting);
    otherwise tiles of `tile` px with `overlap` px of linearly blended overlap
    are equivalent to within small border effects.
    """
    if len(stack) != network.k:
        raise ValueError(f"network expects k={network.k} frames, stack has {len(stack)}")
    planes = build_network_input(stack, gamma).planes
    padded, (h, w) = _pad_to_divisor(planes, network.divisor)
    _, ph, pw, _ = padded.shape

    if tile is None or (ph <= tile and pw <= tile):
        out = netmod.forward(network, padded, mode="eval")
        return RadianceImage(out[:h, :w])

    if tile % network.divisor:
        raise ValueError(f"tile size {tile} not divisible by {network.divisor}")
    acc = np.zeros((ph, pw, 3), dtype=np.float64)
    weight = np.zeros((ph, pw, 1), dtype=np.float64)
    ramp_y = _ramp(min(tile, ph), overlap)
    ramp_x = _ramp(min(tile, pw), overlap)
    w2d = (ramp_y[:, None] * ramp_x[None, :])[:, :, None]
    for y0 in _tile_starts(ph, tile, overlap):
        for x0 in _tile_starts(pw, tile, overlap):
            ty = min(tile, ph)
            tx = min(tile, pw)
            patch = padded[:, y0:y0 + ty, x0:x0 + tx, :]
            out = netmod.forward(network, patch, mode="eval")
            acc[y0:y0 + ty, x0:x0 + tx] += out * w2d
            weight[y0:y0 + ty, x0:x0 + tx] += w2d
    merged = (acc / weight).astype(np.float32)
    return RadianceImage(np.clip(merged[:h, :w], 0.0, 1.0))


def merge_exposures(network, frames, reference_index, align=True, gamma=DEFAULT_GAMMA,
                    homographies=None, tile=TILE_SIZE, overlap=TILE_OVERLAP):
    """End-to-end merge: slot frames for the reference, align backgrounds, infer.

    frames must be sorted ascending by exposure bias. Returns (radiance, stack)
    where stack is the aligned, slotted input actually fed to the network.
    """
    from . import align as alignmod  # pulled lazily: cv2 import is heavy

    if align:
        # align the original frames first so reference duplicates stay exact copies
        aligned = alignmod.align_stack(ExposureStack(tuple(frames), reference_index),
                                       homographies=homographies, gamma=gamma)
        frames = aligned.frames
    slotted = arrange_for_reference(frames, reference_index, network.k)
    return predict(network, slotted, gamma=gamma, tile=tile, overlap=overlap), slotted
