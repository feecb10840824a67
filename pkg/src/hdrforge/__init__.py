"""hdrforge: ghost-free HDR merging of bracketed exposure stacks.

Library layout:
    radiance   radiometric core (exposure encoding, mu-law, network inputs)
    align      homography background alignment
    dataset    patch extraction, augmentation, motion-aware oversampling
    store      binary patch store
    net        merge networks (unet / resnet variants) and checkpoints
    train      loss, Adam loop, gradient check
    metrics    PSNR / SSIM in tonemapped and linear domains
    merge      reference slotting and (tiled) full-image inference
    hdr_io     RGBE, LDR, exposure/CRF/scene/split file formats
    simulate   synthetic bracketed stacks for tests and experiments
    cli        hdrforge prepare / train / merge / eval
"""

from .radiance import (
    CrfTable,
    ExposureStack,
    LdrImage,
    RadianceImage,
    TonemapParams,
    build_network_input,
    linearize,
    to_hdr_domain,
    tonemap,
    tonemap_inverse,
)

__version__ = "0.1.0"

__all__ = [
    "CrfTable",
    "ExposureStack",
    "LdrImage",
    "RadianceImage",
    "TonemapParams",
    "build_network_input",
    "linearize",
    "to_hdr_domain",
    "tonemap",
    "tonemap_inverse",
    "__version__",
]
