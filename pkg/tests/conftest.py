import numpy as np
import pytest
import torch
from hypothesis import settings

import cv2

from hdrforge.radiance import ExposureStack, LdrImage

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")

torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def textured_image(seed, height=300, width=400):
    """Corner-rich test content for feature matching (coarse blobs + fine grain)."""
    r = np.random.default_rng(seed)
    img = r.random((height // 8, width // 8, 3)).astype(np.float32)
    img = cv2.resize(img, (width, height), interpolation=cv2.INTER_CUBIC)
    img = img + 0.25 * r.random((height, width, 3)).astype(np.float32)
    return np.clip(img, 0.05, 0.95)


def textured_ldr(seed, height=300, width=400, bias=0.0):
    return LdrImage(textured_image(seed, height, width), exposure_bias=bias)


def static_stack(seed=0, height=96, width=128, biases=(-2.0, 0.0, 2.0)):
    """Same radiance re-exposed per frame: alignment/motion ground truth is 'none'."""
    from hdrforge import simulate

    scene = simulate.make_scene("static", height=height, width=width, seed=seed,
                                biases=biases, moving_object=False, bits=None, noise=0.0)
    return scene


@pytest.fixture
def small_scene():
    from hdrforge import simulate

    return simulate.make_scene("s0", height=96, width=128, seed=1)
