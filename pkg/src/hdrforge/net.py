"""Merge networks: per-exposure encoders, merger, decoder.

Two variants share the k-branch front end (two 5x5 stride-2 conv layers per
exposure, concatenated channel-wise after the second):

  unet    8 encoding layers down to a 1x1x512 block (for 256 input), then 8
          deconv layers with skip concatenations from the mirrored encoder
          outputs, then a flat output conv.
  resnet  3 encoding layers to a 32x32x256 block, 9 residual blocks (3x3),
          3 deconv layers, flat output conv.

Encoders use leaky ReLU, decoders ReLU, the output conv a sigmoid so the
merged radiance stays in (0, 1). Batchnorm follows every conv except the first
layer and the output layer. Tensors cross the module boundary as numpy
float32 in (k, H, W, 6) / (H, W, 3) layout; torch handles autodiff internally.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .radiance import ShapeError

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
BN_EPS = 1e-5
BN_MOMENTUM = 0.01  # torch semantics: running = (1 - m) * running + m * batch

CHECKPOINT_MAGIC = b"HDRW"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<IBIIIIQQB")  # version, variant, k, patch, width, blocks, seed, iteration, has_opt
_VARIANTS = ("unet", "resnet")


class NumericError(RuntimeError):
    """Raised when a forward pass produces a non-finite activation."""


class CheckpointError(RuntimeError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one unit in the network plan."""

    name: str
    kind: str  # conv | deconv | residual_block
    in_channels: int
    out_channels: int
    kernel: int = 5
    stride: float = 2.0  # 2 halves, 0.5 doubles, 1 keeps size
    batchnorm: bool = True
    activation: str = "lrelu"  # lrelu | relu | sigmoid | none
    per_branch: bool = False
    skip_from: str = None  # encoder unit whose output concatenates onto this input

    def out_size(self, size):
        if self.stride == 2:
            return size // 2
        if self.stride == 0.5:
            return size * 2
        return size


def plan_unet(k, base_channels=64):
    """Layer plan for the unet variant (encoder channels double 64..512)."""
    w = base_channels
    enc = [
        LayerSpec("enc1", "conv", 6, w, batchnorm=False, per_branch=True),
        LayerSpec("enc2", "conv", w, 2 * w, per_branch=True),
        LayerSpec("enc3", "conv", 2 * w * k, 4 * w),
        LayerSpec("enc4", "conv", 4 * w, 8 * w),
        LayerSpec("enc5", "conv", 8 * w, 8 * w),
        LayerSpec("enc6", "conv", 8 * w, 8 * w),
        LayerSpec("enc7", "conv", 8 * w, 8 * w),
        LayerSpec("enc8", "conv", 8 * w, 8 * w),
    ]
    dec = [
        LayerSpec("dec1", "deconv", 8 * w, 8 * w, stride=0.5, activation="relu"),
        LayerSpec("dec2", "deconv", 16 * w, 8 * w, stride=0.5, activation="relu", skip_from="enc7"),
        LayerSpec("dec3", "deconv", 16 * w, 8 * w, stride=0.5, activation="relu", skip_from="enc6"),
        LayerSpec("dec4", "deconv", 16 * w, 8 * w, stride=0.5, activation="relu", skip_from="enc5"),
        LayerSpec("dec5", "deconv", 16 * w, 4 * w, stride=0.5, activation="relu", skip_from="enc4"),
        LayerSpec("dec6", "deconv", 8 * w, 2 * w, stride=0.5, activation="relu", skip_from="enc3"),
        LayerSpec("dec7", "deconv", 2 * w + 2 * w * k, w, stride=0.5, activation="relu", skip_from="enc2"),
        LayerSpec("dec8", "deconv", w + w * k, w, stride=0.5, activation="relu", skip_from="enc1"),
    ]
    out = [LayerSpec("out", "conv", w, 3, stride=1, batchnorm=False, activation="sigmoid")]
    return tuple(enc + dec + out)


def plan_resnet(k, base_channels=64, blocks=9):
    """Layer plan for the resnet variant (9 residual blocks at the 1/8 scale)."""
    w = base_channels
    layers = [
        LayerSpec("enc1", "conv", 6, w, batchnorm=False, per_branch=True),
        LayerSpec("enc2", "conv", w, 2 * w, per_branch=True),
        LayerSpec("enc3", "conv", 2 * w * k, 4 * w),
    ]
    layers += [LayerSpec(f"res{i + 1}", "residual_block", 4 * w, 4 * w, kernel=3, stride=1,
                         activation="relu") for i in range(blocks)]
    layers += [
        LayerSpec("dec1", "deconv", 4 * w, 2 * w, stride=0.5, activation="relu"),
        LayerSpec("dec2", "deconv", 2 * w, w, stride=0.5, activation="relu"),
        LayerSpec("dec3", "deconv", w, w, stride=0.5, activation="relu"),
        LayerSpec("out", "conv", w, 3, stride=1, batchnorm=False, activation="sigmoid"),
    ]
    return tuple(layers)


def plan_shapes(plan, k, patch):
    """Walk the plan's shape rules; returns {unit name: (size, channels)}.

    Branch encoder entries record the channel count after concatenating the k
    branches, matching what skip connections actually consume.
    """
    shapes = {}
    size = patch
    for spec in plan:
        if spec.skip_from is not None:
            skip_size, skip_ch = shapes[spec.skip_from]
            if skip_size != size:
                raise ShapeError(
                    f"{spec.name}: skip source {spec.skip_from} is {skip_size}px, input is {size}px")
        size = spec.out_size(size)
        channels = spec.out_channels * (k if spec.per_branch else 1)
        shapes[spec.name] = (size, channels)
    return shapes


class _ConvUnit(nn.Module):
    """conv/deconv + optional batchnorm + activation, as one named unit."""

    def __init__(self, spec):
        super().__init__()
        if spec.stride == 0.5:
            self.conv = nn.ConvTranspose2d(spec.in_channels, spec.out_channels, spec.kernel,
                                           stride=2, padding=spec.kernel // 2, output_padding=1)
        else:
            self.conv = nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel,
                                  stride=int(spec.stride), padding=spec.kernel // 2)
        self.bn = nn.BatchNorm2d(spec.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM) \
            if spec.batchnorm else None
        self.activation = spec.activation

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.activation == "lrelu":
            return F.leaky_relu(x, LEAKY_SLOPE)
        if self.activation == "relu":
            return F.relu(x)
        if self.activation == "sigmoid":
            return torch.sigmoid(x)
        return x


class _ResidualBlock(nn.Module):
    """Two 3x3 convs (batchnorm + ReLU inside) plus the additive identity."""

    def __init__(self, channels, kernel=3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel, 1, pad)
        self.bn1 = nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(channels, channels, kernel, 1, pad)
        self.bn2 = nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        z = F.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(z))


class MergeNetwork(nn.Module):
    """Encoder-merger-decoder over k exposures; input (B, k, 6, H, W) torch."""

    def __init__(self, variant, k=3, patch=256, base_channels=64, blocks=9, seed=0):
        super().__init__()
        if variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}, got {variant!r}")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.variant = variant
        self.k = k
        self.patch = patch
        self.base_channels = base_channels
        self.blocks = blocks if variant == "resnet" else 0
        self.init_seed = seed
        self.plan = plan_unet(k, base_channels) if variant == "unet" \
            else plan_resnet(k, base_channels, blocks)
        self.divisor = 2 ** sum(1 for s in self.plan if s.stride == 2)
        if patch % self.divisor:
            raise ShapeError(f"{variant} needs sizes divisible by {self.divisor}, got {patch}")
        units = {}
        for spec in self.plan:
            if spec.kind == "residual_block":
                units[spec.name] = _ResidualBlock(spec.out_channels, spec.kernel)
            elif spec.per_branch:
                for b in range(k):
                    units[f"{spec.name}_b{b}"] = _ConvUnit(spec)
            else:
                units[spec.name] = _ConvUnit(spec)
        self.units = nn.ModuleDict(units)
        self._init_weights(seed)

    def _init_weights(self, seed):
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, 0.0, INIT_STD, generator=gen)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _run(self, name, x):
        out = self.units[name](x)
        if not torch.isfinite(out.detach()).all():
            raise NumericError(f"non-finite activation after layer '{name}'")
        return out

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.k or x.shape[2] != 6:
            raise ShapeError(f"expected (B, {self.k}, 6, H, W), got {tuple(x.shape)}")
        if x.shape[3] % self.divisor or x.shape[4] % self.divisor:
            raise ShapeError(
                f"{self.variant} needs H, W divisible by {self.divisor}, got {tuple(x.shape[3:])}")
        e1 = [self._run(f"enc1_b{b}", x[:, b]) for b in range(self.k)]
        e2 = [self._run(f"enc2_b{b}", e1[b]) for b in range(self.k)]
        saved = {"enc1": torch.cat(e1, 1), "enc2": torch.cat(e2, 1)}
        z = saved["enc2"]
        for spec in self.plan:
            if spec.per_branch:
                continue
            if spec.skip_from is not None:
                z = torch.cat([z, saved[spec.skip_from]], 1)
            z = self._run(spec.name, z)
            if spec.name.startswith("enc"):
                saved[spec.name] = z
        return z


def build_unet(k=3, patch=256, base_channels=64, seed=0):
    """Unet variant; patch (and any inference size) must be divisible by 256."""
    return MergeNetwork("unet", k=k, patch=patch, base_channels=base_channels, seed=seed)


def build_resnet(k=3, patch=256, base_channels=64, blocks=9, seed=0):
    """Resnet variant; sizes must be divisible by 8."""
    return MergeNetwork("resnet", k=k, patch=patch, base_channels=base_channels,
                        blocks=blocks, seed=seed)


def to_torch_input(planes):
    """(k, H, W, 6) or (B, k, H, W, 6) numpy -> (B, k, 6, H, W) float32 torch."""
    arr = np.asarray(planes, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 6:
        raise ShapeError(f"expected (..., k, H, W, 6), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 1, 4, 2, 3)))


def forward(net, planes, mode="eval"):
    """Run the merge network on numpy input planes; returns numpy radiance.

    mode 'train' uses batch statistics in the batchnorm layers (and updates
    running stats); 'eval' uses the stored running statistics. Gradients are
    never tracked here; the training loop drives the module directly.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    squeeze = np.asarray(planes).ndim == 4
    x = to_torch_input(planes)
    was_training = net.training
    net.train(mode == "train")
    try:
        with torch.no_grad():
            y = net(x)
    finally:
        net.train(was_training)
    out = y.permute(0, 2, 3, 1).numpy()
    return out[0] if squeeze else out


_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("int64"): 1}


def _write_blob(f, name, arr):
    data = np.ascontiguousarray(arr)
    tag = _DTYPE_TAGS[data.dtype.newbyteorder("=")]
    raw = data.astype(_DTYPES[tag]).tobytes()
    enc = name.encode("utf-8")
    f.write(struct.pack("<H", len(enc)))
    f.write(enc)
    f.write(struct.pack("<BB", tag, data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b"")
    f.write(struct.pack("<Q", len(raw)))
    f.write(raw)


def _read_blob(f):
    (name_len,) = struct.unpack("<H", f.read(2))
    name = f.read(name_len).decode("utf-8")
    tag, ndim = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
    (nbytes,) = struct.unpack("<Q", f.read(8))
    arr = np.frombuffer(f.read(nbytes), dtype=_DTYPES[tag]).reshape(shape).copy()
    return name, arr


def save_checkpoint(path, net, iteration=0, optimizer=None):
    """Write parameters, batchnorm statistics and (optionally) Adam state."""
    state = net.state_dict()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_CKPT_HEADER.pack(CHECKPOINT_VERSION, _VARIANTS.index(net.variant),
                                  net.k, net.patch, net.base_channels, net.blocks,
                                  net.init_seed, iteration, int(optimizer is not None)))
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            _write_blob(f, name, tensor.detach().cpu().numpy())
        if optimizer is not None:
            params = [p for _, p in sorted(net.named_parameters())]
            f.write(b"OPT0")
            f.write(struct.pack("<I", len(params)))
            for p in params:
                st = optimizer.state.get(p, {})
                step = int(st["step"].item()) if "step" in st else 0
                f.write(struct.pack("<Q", step))
                for key in ("exp_avg", "exp_avg_sq"):
                    mom = st[key].detach().cpu().numpy() if key in st \
                        else np.zeros(tuple(p.shape), dtype=np.float32)
                    _write_blob(f, key, mom)


def load_checkpoint(path):
    """Rebuild the network from a checkpoint; returns (net, meta).

    meta carries iteration and, when present, the serialized optimizer moments
    under 'optimizer' (restore with restore_optimizer)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, variant_i, k, patch, base_channels, blocks, seed, iteration, has_opt = \
            _CKPT_HEADER.unpack(f.read(_CKPT_HEADER.size))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        net = MergeNetwork(_VARIANTS[variant_i], k=k, patch=patch,
                           base_channels=base_channels, blocks=max(blocks, 1), seed=seed)
        (n_entries,) = struct.unpack("<I", f.read(4))
        state = {}
        for _ in range(n_entries):
            name, arr = _read_blob(f)
            state[name] = torch.from_numpy(arr)
        net.load_state_dict(state)
        meta = {"iteration": iteration, "variant": net.variant, "k": k,
                "patch": patch, "base_channels": base_channels}
        if has_opt:
            if f.read(4) != b"OPT0":
                raise CheckpointError(f"{path}: missing optimizer section")
            (n_params,) = struct.unpack("<I", f.read(4))
            moments = []
            for _ in range(n_params):
                (step,) = struct.unpack("<Q", f.read(8))
                _, m = _read_blob(f)
                _, v = _read_blob(f)
                moments.append((step, m, v))
            meta["optimizer"] = moments
    return net, meta


def restore_optimizer(optimizer, net, moments):
    """Load serialized Adam moments back into a freshly built optimizer."""
    params = [p for _, p in sorted(net.named_parameters())]
    if len(params) != len(moments):
        raise CheckpointError(f"optimizer state has {len(moments)} entries, net has {len(params)}")
    for p, (step, m, v) in zip(params, moments):
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(m.copy()),
            "exp_avg_sq": torch.from_numpy(v.copy()),
        }
