"""File I/O: Radiance RGBE (.hdr), 8/16-bit LDR images, exposure lists,
CRF tables, scene directories and split files.

Scene directory layout:
    <scene>/input_1.tif ... input_k.tif   (or .tiff/.png, 8- or 16-bit)
    <scene>/exposures.txt                 one exposure bias (stops) per line
    <scene>/gt.hdr                        ground-truth radiance (RGBE)
    <scene>/homographies.txt              optional precomputed 3x3 sidecar
"""

from __future__ import annotations

import json
import os
import re

import cv2
import numpy as np

from .align import load_homographies
from .dataset import Scene, SplitSpec
from .radiance import CrfTable, ExposureStack, LdrImage, RadianceImage


class HdrFormatError(ValueError):
    """Raised for unreadable Radiance RGBE files."""


# ---------------------------------------------------------------------------
# Radiance RGBE

_RESOLUTION_RE = re.compile(rb"^-Y (\d+) \+X (\d+)\s*$")


def _rgbe_to_float(rgbe):
    expo = rgbe[..., 3].astype(np.int32)
    scale = np.where(expo == 0, 0.0, np.ldexp(1.0, expo - 136)).astype(np.float32)
    return rgbe[..., :3].astype(np.float32) * scale[..., None]


def _float_to_rgbe(pixels):
    maxc = pixels.max(axis=-1)
    rgbe = np.zeros(pixels.shape[:2] + (4,), dtype=np.uint8)
    nz = maxc >= 1e-32
    mant, expo = np.frexp(maxc[nz])
    scale = mant * 256.0 / maxc[nz]
    rgbe[nz, :3] = np.clip(pixels[nz] * scale[:, None], 0, 255).astype(np.uint8)
    rgbe[nz, 3] = (expo + 128).astype(np.uint8)
    return rgbe


def _decode_rle_scanline(f, width, path):
    rle_possible = 8 <= width <= 0x7FFF
    head = f.read(4)
    if len(head) < 4:
        raise HdrFormatError(f"{path}: truncated scanline")
    if not (rle_possible and head[0] == 2 and head[1] == 2
            and (head[2] << 8 | head[3]) == width):
        # flat (uncompressed) scanline: the 4 bytes we read are the first pixel
        rest = f.read(4 * (width - 1))
        if len(rest) < 4 * (width - 1):
            raise HdrFormatError(f"{path}: truncated flat scanline")
        return np.frombuffer(head + rest, dtype=np.uint8).reshape(width, 4)
    out = np.empty((4, width), dtype=np.uint8)
    for c in range(4):
        pos = 0
        while pos < width:
            code = f.read(1)
            if not code:
                raise HdrFormatError(f"{path}: truncated RLE stream")
            n = code[0]
            if n > 128:  # run
                n -= 128
                val = f.read(1)
                if not val or pos + n > width:
                    raise HdrFormatError(f"{path}: corrupt RLE run")
                out[c, pos:pos + n] = val[0]
            else:  # literals
                lit = f.read(n)
                if len(lit) < n or pos + n > width:
                    raise HdrFormatError(f"{path}: corrupt RLE literals")
                out[c, pos:pos + n] = np.frombuffer(lit, dtype=np.uint8)
            pos += n
    return out.T


def _encode_rle_component(vals):
    """Radiance new-style RLE for one scanline component (runs of >= 4 pay off)."""
    out = bytearray()
    n = len(vals)
    i = 0
    while i < n:
        run_start = i
        run_len = 1
        # find the next run of at least 4 equal bytes
        while run_start < n:
            run_len = 1
            while run_start + run_len < n and run_len < 127 and \
                    vals[run_start + run_len] == vals[run_start]:
                run_len += 1
            if run_len >= 4:
                break
            run_start += run_len
        else:
            run_start = n
        pos = i
        while pos < run_start:  # literals before the run
            chunk = min(128, run_start - pos)
            out.append(chunk)
            out.extend(vals[pos:pos + chunk].tobytes())
            pos += chunk
        if run_start < n:
            out.append(128 + run_len)
            out.append(int(vals[run_start]))
            i = run_start + run_len
        else:
            i = n
    return bytes(out)


def read_rgbe(path):
    """Read a Radiance .hdr image; returns float32 H x W x 3 (linear RGB)."""
    with open(path, "rb") as f:
        line = f.readline()
        if not line.startswith(b"#?"):
            raise HdrFormatError(f"{path}: missing #? signature")
        exposure = 1.0
        fmt = None
        while True:
            line = f.readline()
            if not line:
                raise HdrFormatError(f"{path}: truncated header")
            line = line.strip()
            if not line:
                break
            if line.startswith(b"FORMAT="):
                fmt = line.split(b"=", 1)[1]
            elif line.startswith(b"EXPOSURE="):
                exposure *= float(line.split(b"=", 1)[1])
        if fmt not in (b"32-bit_rle_rgbe", None):
            raise HdrFormatError(f"{path}: unsupported format {fmt!r}")
        m = _RESOLUTION_RE.match(f.readline())
        if not m:
            raise HdrFormatError(f"{path}: unsupported resolution line")
        height, width = int(m.group(1)), int(m.group(2))
        rgbe = np.empty((height, width, 4), dtype=np.uint8)
        for row in range(height):
            rgbe[row] = _decode_rle_scanline(f, width, path)
    out = _rgbe_to_float(rgbe)
    if exposure != 1.0:
        out /= np.float32(exposure)
    return out


def write_rgbe(path, pixels):
    """Write float32 H x W x 3 linear RGB as run-length-encoded Radiance .hdr."""
    pixels = np.ascontiguousarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3, got {pixels.shape}")
    if not np.isfinite(pixels).all() or pixels.min() < 0:
        raise ValueError("RGBE requires finite, non-negative pixels")
    height, width = pixels.shape[:2]
    rgbe = _float_to_rgbe(pixels)
    rle = 8 <= width <= 0x7FFF
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\n")
        f.write(b"FORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {height} +X {width}\n".encode())
        for row in range(height):
            if rle:
                f.write(bytes([2, 2, width >> 8, width & 0xFF]))
                for c in range(4):
                    f.write(_encode_rle_component(rgbe[row, :, c]))
            else:
                f.write(rgbe[row].tobytes())


# ---------------------------------------------------------------------------
# LDR images

def read_ldr(path, exposure_bias=0.0):
    """Read an 8/16-bit PNG/TIFF as an LdrImage normalized to [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image: {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise ValueError(f"{path}: unsupported dtype {raw.dtype}; expected 8/16-bit integer")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / np.float32(peak)
    return LdrImage(rgb, exposure_bias=exposure_bias)


def write_ldr(path, pixels, bits=8):
    """Write a [0, 1] RGB array as an 8- or 16-bit PNG/TIFF."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    peak = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    q = np.round(np.clip(pixels, 0, 1) * peak).astype(dtype)
    if not cv2.imwrite(str(path), cv2.cvtColor(q, cv2.COLOR_RGB2BGR)):
        raise IOError(f"cannot write image: {path}")


# ---------------------------------------------------------------------------
# Sidecar text formats

def read_exposures(path):
    """One exposure bias (stops, decimal) per line, frame order."""
    biases = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                biases.append(float(line))
    if not biases:
        raise ValueError(f"{path}: no exposure values")
    return biases


def write_exposures(path, biases):
    with open(path, "w") as f:
        for b in biases:
            f.write(f"{b}\n")


def read_crf_csv(path):
    """CRF table CSV: one row per intensity sample (uniform grid over [0, 1]),
    three columns of linear irradiance (R, G, B)."""
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[1] == 1:
        table = np.repeat(table, 3, axis=1)
    return CrfTable(table)


def write_crf_csv(path, crf):
    np.savetxt(path, crf.samples, delimiter=",", fmt="%.8f")


def read_split(path):
    with open(path) as f:
        doc = json.load(f)
    return SplitSpec(tuple(doc["train"]), tuple(doc["test"]))


def write_split(path, split):
    with open(path, "w") as f:
        json.dump({"train": list(split.train_scenes), "test": list(split.test_scenes)}, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# Scene directories

_INPUT_RE = re.compile(r"input_(\d+)\.(tif|tiff|png)$", re.IGNORECASE)


def list_scene_inputs(scene_dir):
    names = []
    for name in os.listdir(scene_dir):
        m = _INPUT_RE.match(name)
        if m:
            names.append((int(m.group(1)), name))
    return [os.path.join(scene_dir, name) for _, name in sorted(names)]


def load_stack(scene_dir, crf=None, reference_index=None):
    """Load a scene's LDR frames + exposures as an ascending ExposureStack.

    Frames are sorted by bias; the reference defaults to the middle frame.
    Applies the inverse CRF when a table is given.
    """
    from .radiance import linearize  # local import to keep module load light

    paths = list_scene_inputs(scene_dir)
    if not paths:
        raise FileNotFoundError(f"{scene_dir}: no input_*.tif/png frames")
    biases = read_exposures(os.path.join(scene_dir, "exposures.txt"))
    if len(biases) != len(paths):
        raise ValueError(f"{scene_dir}: {len(paths)} frames but {len(biases)} exposure values")
    frames = [read_ldr(p, exposure_bias=b) for p, b in zip(paths, biases)]
    if crf is not None:
        frames = [linearize(f, crf) for f in frames]
    frames.sort(key=lambda f: f.exposure_bias)
    ref = len(frames) // 2 if reference_index is None else reference_index
    return ExposureStack(tuple(frames), ref)


def load_scene(scene_dir, crf=None):
    """Load a full training scene (stack + ground truth); name = directory name."""
    stack = load_stack(scene_dir, crf=crf)
    gt_path = os.path.join(scene_dir, "gt.hdr")
    if not os.path.exists(gt_path):
        raise FileNotFoundError(gt_path)
    gt = RadianceImage(np.clip(read_rgbe(gt_path), 0.0, 1.0))
    return Scene(stack, gt, os.path.basename(os.path.normpath(scene_dir)))


def scene_homographies(scene_dir):
    """Load the optional homography sidecar; None when absent."""
    path = os.path.join(scene_dir, "homographies.txt")
    return load_homographies(path) if os.path.exists(path) else None
