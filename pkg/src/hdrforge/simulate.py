"""Synthetic bracketed stacks with known ground truth.

Used by the test suite and the experiment scripts: a smooth random radiance
field is exposed through the forward imaging model (exposure scale, gamma
encoding, optional sensor noise, quantization), optionally with a foreground
object pasted at different positions per frame to mimic subject motion. The
clean radiance field is the ground truth, so merge quality is measurable
without any captured data.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from .radiance import DEFAULT_GAMMA, ExposureStack, LdrImage, RadianceImage
from .dataset import Scene

DEFAULT_BIASES = (-2.0, 0.0, 2.0)


def smooth_field(rng, height, width, scale=16):
    """Random smooth scalar field in [0, 1] (low-frequency, cubic upsampled)."""
    h0 = max(height // scale, 2)
    w0 = max(width // scale, 2)
    f = ndimage.zoom(rng.random((h0, w0)), (height / h0, width / w0), order=3)
    f = f[:height, :width]
    lo, hi = f.min(), f.max()
    return ((f - lo) / max(hi - lo, 1e-9)).astype(np.float32)


def radiance_field(rng, height, width, darkness=1.0, scale=16):
    """Smooth RGB radiance in [0, 1]; darkness > 1 pushes content into shadows."""
    chans = [smooth_field(rng, height, width, scale) for _ in range(3)]
    field = np.stack(chans, axis=-1) ** np.float32(darkness)
    return np.clip(field, 0.0, 1.0)


def paste_disc(field, center, radius, color):
    """Return a copy of the field with a soft-edged disc of the given color."""
    h, w = field.shape[:2]
    ys, xs = np.ogrid[:h, :w]
    d = np.sqrt((ys - center[0]) ** 2 + (xs - center[1]) ** 2)
    alpha = np.clip(radius + 1 - d, 0.0, 1.0)[..., None].astype(np.float32)
    out = field * (1 - alpha) + np.asarray(color, dtype=np.float32) * alpha
    return np.clip(out, 0.0, 1.0)


def render_ldr(radiance, bias, gamma=DEFAULT_GAMMA, bits=8, noise=0.0, rng=None):
    """Expose a radiance field into an LDR frame: clip(H * 2**bias) ** (1/gamma).

    Gaussian sensor noise (std in [0, 1] intensity units) is added before the
    bits-deep quantization; bits=None skips quantization entirely.
    """
    t = 2.0 ** bias
    intensity = np.clip(radiance * np.float32(t), 0.0, 1.0) ** np.float32(1.0 / gamma)
    if noise > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        intensity = intensity + rng.normal(0.0, noise, intensity.shape).astype(np.float32)
    intensity = np.clip(intensity, 0.0, 1.0)
    if bits is not None:
        peak = 2 ** bits - 1
        intensity = np.round(intensity * peak) / np.float32(peak)
    return LdrImage(intensity.astype(np.float32), exposure_bias=bias)


def make_scene(name, height=192, width=256, seed=0, biases=DEFAULT_BIASES,
               gamma=DEFAULT_GAMMA, bits=8, noise=0.0, darkness=1.8,
               moving_object=True):
    """Build a synthetic Scene: aligned backgrounds, optional foreground motion.

    The ground truth holds the object at the reference position (as a static
    capture would); non-reference frames see it displaced, which is exactly the
    ghosting the merge must reject.
    """
    rng = np.random.default_rng(seed)
    background = radiance_field(rng, height, width, darkness=darkness)
    ref_index = len(biases) // 2
    radius = min(height, width) / 8
    center = np.array([height / 2, width / 2]) + rng.uniform(-height / 8, height / 8, 2)
    color = rng.uniform(0.2, 1.0, 3)

    truth = paste_disc(background, center, radius, color) if moving_object else background
    frames = []
    for i, bias in enumerate(sorted(biases)):
        field = truth
        if moving_object and i != ref_index:
            shift = rng.uniform(radius, 2 * radius, 2) * rng.choice([-1.0, 1.0], 2)
            field = paste_disc(background, center + shift, radius, color)
        frames.append(render_ldr(field, bias, gamma=gamma, bits=bits, noise=noise, rng=rng))
    stack = ExposureStack(tuple(frames), ref_index)
    return Scene(stack, RadianceImage(truth), name)


def write_scene_dir(scene, root, bits=16):
    """Materialize a Scene as an on-disk dataset directory."""
    from . import hdr_io  # late import: hdr_io pulls cv2

    scene_dir = os.path.join(root, scene.name)
    os.makedirs(scene_dir, exist_ok=True)
    for i, frame in enumerate(scene.stack.frames, start=1):
        hdr_io.write_ldr(os.path.join(scene_dir, f"input_{i}.png"), frame.pixels, bits=bits)
    hdr_io.write_exposures(os.path.join(scene_dir, "exposures.txt"),
                           [f.exposure_bias for f in scene.stack.frames])
    hdr_io.write_rgbe(os.path.join(scene_dir, "gt.hdr"), scene.ground_truth.pixels)
    return scene_dir
