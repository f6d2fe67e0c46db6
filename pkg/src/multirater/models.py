"""Segmentation backbone and the annotation-uncertainty estimator.

Both networks are small U-shaped encoder/decoder CNNs over (C,H,W) arrays:

* ``SegmentationNet`` — shared backbone with two independent 1x1 projection
  heads (primary and auxiliary), each ending in a sigmoid, so probabilities
  stay strictly inside (0,1) for finite parameters.
* ``UncertaintyNet`` — one shared encoder over the image concatenated with
  all M annotation channels, and M independent decoders (with encoder skip
  connections); decoder m emits the per-pixel reliability map for
  annotation m through its own sigmoid output layer.

Parameters are flat name->ndarray dicts so the optimizer and the checkpoint
format can stay trivially ordered.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad


class ConfigError(ValueError):
    """Model configuration or input geometry violates a documented invariant."""


@dataclass(frozen=True)
class SegBackboneConfig:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")


@dataclass(frozen=True)
class UncertaintyNetConfig:
    num_sources: int
    base_width: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.num_sources < 2:
            raise ConfigError(
                f"num_sources must be >= 2 for cross-referencing, got {self.num_sources}"
            )
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")


@dataclass
class SegOutput:
    primary_prob: object   # DiffArray (1,H,W), values in (0,1)
    auxiliary_prob: object  # DiffArray (1,H,W), values in (0,1)
    shared_features: object  # DiffArray, final decoder feature block


@dataclass
class UncertaintySet:
    """Per-source reliability maps, shape (M,H,W), values in (0,1)."""
    sigma: object


def _check_spatial(shape, depth):
    h, w = shape[-2], shape[-1]
    div = 2 ** depth
    if h % div:
        raise ConfigError(f"height {h} not divisible by 2^depth = {div}")
    if w % div:
        raise ConfigError(f"width {w} not divisible by 2^depth = {div}")


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class _ConvNet:
    """Shared plumbing: ordered parameter dict + conv-block helpers.

    Interior convs are bias-free and followed by instance norm + ReLU; the
    normalization keeps activations centered so small nets train stably on
    single-sample batches. Output heads are plain biased 1x1 convs.
    """

    def __init__(self):
        self.params = {}

    def _add_conv(self, rng, name, c_in, c_out, k=3):
        self.params[name + ".w"] = _he_uniform(rng, (c_out, c_in, k, k))
        self.params[name + ".b"] = np.zeros((c_out, 1, 1))

    def _add_norm_conv(self, rng, name, c_in, c_out):
        self.params[name + ".w"] = _he_uniform(rng, (c_out, c_in, 3, 3))
        self.params[name + ".gamma"] = np.ones((c_out, 1, 1))
        self.params[name + ".beta"] = np.zeros((c_out, 1, 1))

    def _add_block(self, rng, name, c_in, c_out):
        self._add_norm_conv(rng, name + ".c1", c_in, c_out)
        self._add_norm_conv(rng, name + ".c2", c_out, c_out)

    def bind(self, tape):
        """Create gradient-tracked leaves for every parameter on this tape."""
        return {name: tape.leaf(value) for name, value in self.params.items()}

    @staticmethod
    def _conv(x, leaves, name, pad=1):
        return ad.conv2d(x, leaves[name + ".w"], stride=1, pad=pad,
                         bias=leaves[name + ".b"])

    @staticmethod
    def _norm_conv(x, leaves, name):
        out = ad.conv2d(x, leaves[name + ".w"], stride=1, pad=1)
        out = ad.instance_norm(out, leaves[name + ".gamma"],
                               leaves[name + ".beta"])
        return ad.relu(out)

    @classmethod
    def _block(cls, x, leaves, name):
        x = cls._norm_conv(x, leaves, name + ".c1")
        return cls._norm_conv(x, leaves, name + ".c2")

    # value-mode twins used by the tape-free inference path
    @staticmethod
    def _conv_value(xv, params, name, pad=1):
        return ad.conv2d_value(xv, params[name + ".w"], 1, pad,
                               params[name + ".b"])

    @staticmethod
    def _norm_conv_value(xv, params, name):
        out = ad.conv2d_value(xv, params[name + ".w"], 1, 1)
        out = ad.instance_norm_value(out, params[name + ".gamma"],
                                     params[name + ".beta"])
        return np.maximum(out, 0.0)

    @classmethod
    def _block_value(cls, xv, params, name):
        xv = cls._norm_conv_value(xv, params, name + ".c1")
        return cls._norm_conv_value(xv, params, name + ".c2")

    def load_state(self, state):
        for name, value in state.items():
            if name not in self.params:
                raise ConfigError(f"unknown parameter {name!r} in state")
            if self.params[name].shape != value.shape:
                raise ConfigError(
                    f"parameter {name!r} shape {value.shape} != "
                    f"expected {self.params[name].shape}"
                )
            self.params[name] = value.astype(np.float64).copy()

    def state(self):
        return {name: value.copy() for name, value in self.params.items()}


class SegmentationNet(_ConvNet):
    """U-shaped backbone with independent primary and auxiliary heads."""

    def __init__(self, cfg: SegBackboneConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = [cfg.base_width * 2 ** l for l in range(cfg.depth)]
        bottom = cfg.base_width * 2 ** cfg.depth
        c = cfg.in_channels
        for l, w in enumerate(widths):
            self._add_block(rng, f"enc{l}", c, w)
            c = w
        self._add_block(rng, "bottom", c, bottom)
        c = bottom
        for l in reversed(range(cfg.depth)):
            self._add_block(rng, f"dec{l}", c + widths[l], widths[l])
            c = widths[l]
        self._add_conv(rng, "head_primary", c, 1, k=1)
        self._add_conv(rng, "head_aux", c, 1, k=1)

    def forward(self, tape, image, leaves):
        """Run the backbone and both heads; image is (in_channels,H,W)."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise ConfigError(
                f"expected image ({self.cfg.in_channels},H,W), got {image.shape}"
            )
        _check_spatial(image.shape, self.cfg.depth)
        x = tape.constant(image)
        skips = []
        for l in range(self.cfg.depth):
            x = self._block(x, leaves, f"enc{l}")
            skips.append(x)
            x = ad.maxpool2x(x)
        x = self._block(x, leaves, "bottom")
        for l in reversed(range(self.cfg.depth)):
            x = ad.concat(ad.upsample2x(x), skips[l], axis=0)
            x = self._block(x, leaves, f"dec{l}")
        primary = ad.sigmoid(self._conv(x, leaves, "head_primary", pad=0))
        aux = ad.sigmoid(self._conv(x, leaves, "head_aux", pad=0))
        return SegOutput(primary_prob=primary, auxiliary_prob=aux,
                         shared_features=x)

    def predict(self, image):
        """Tape-free inference: backbone + primary head only, plain numpy.

        Touches no auxiliary-head parameter; bitwise-identical to
        forward(...).primary_prob.value.
        """
        image = np.asarray(image, dtype=np.float64)
        _check_spatial(image.shape, self.cfg.depth)
        p = self.params
        x = image
        skips = []
        for l in range(self.cfg.depth):
            x = self._block_value(x, p, f"enc{l}")
            skips.append(x)
            x = ad.maxpool2x_value(x)
        x = self._block_value(x, p, "bottom")
        for l in reversed(range(self.cfg.depth)):
            x = np.concatenate([ad.upsample2x_value(x), skips[l]], axis=0)
            x = self._block_value(x, p, f"dec{l}")
        return expit(self._conv_value(x, p, "head_primary", pad=0))

    def head_param_names(self, head):
        prefix = {"primary": "head_primary", "aux": "head_aux"}[head]
        return [n for n in self.params if n.startswith(prefix)]

    def trunk_param_names(self):
        return [n for n in self.params if not n.startswith("head_")]


class UncertaintyNet(_ConvNet):
    """Shared encoder + one decoder per annotation source, sigmoid outputs."""

    def __init__(self, cfg: UncertaintyNetConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = [cfg.base_width * 2 ** l for l in range(cfg.depth)]
        # bottleneck stays at the deepest encoder width: M decoders traverse
        # it every step, and doubling there buys nothing at desk scale
        bottom = widths[-1]
        c = cfg.num_sources + 1  # image + M annotation channels
        for l, w in enumerate(widths):
            self._add_block(rng, f"enc{l}", c, w)
            c = w
        self._add_block(rng, "bottom", c, bottom)
        # decoders use one conv per level: M of them run every step, and a
        # single 3x3 conv after each skip concat is plenty at desk scale
        for m in range(cfg.num_sources):
            c = bottom
            for l in reversed(range(cfg.depth)):
                self._add_norm_conv(rng, f"dec{m}.{l}", c + widths[l], widths[l])
                c = widths[l]
            self._add_conv(rng, f"head{m}", c, 1, k=1)

    def forward(self, tape, image, annotations, leaves):
        """Estimate one reliability map per annotation source.

        image: (1,H,W) intensities; annotations: (M,H,W) binary {0,1}.
        """
        image = np.asarray(image, dtype=np.float64)
        annotations = np.asarray(annotations, dtype=np.float64)
        m = self.cfg.num_sources
        if annotations.ndim != 3 or annotations.shape[0] != m:
            raise ConfigError(
                f"expected {m} annotation channels, got shape {annotations.shape}"
            )
        if image.shape[-2:] != annotations.shape[-2:]:
            raise ConfigError(
                f"image {image.shape} and annotations {annotations.shape} disagree"
            )
        if not np.isin(annotations, (0.0, 1.0)).all():
            raise ConfigError("annotations must be binary {0,1}")
        _check_spatial(image.shape, self.cfg.depth)
        stacked = np.concatenate([image.reshape(1, *image.shape[-2:]), annotations])
        x = tape.constant(stacked)
        skips = []
        for l in range(self.cfg.depth):
            x = self._block(x, leaves, f"enc{l}")
            skips.append(x)
            x = ad.maxpool2x(x)
        encoded = self._block(x, leaves, "bottom")
        maps = None
        for src in range(m):
            x = encoded
            for l in reversed(range(self.cfg.depth)):
                x = ad.concat(ad.upsample2x(x), skips[l], axis=0)
                x = self._norm_conv(x, leaves, f"dec{src}.{l}")
            smap = ad.sigmoid(self._conv(x, leaves, f"head{src}", pad=0))
            maps = smap if maps is None else ad.concat(maps, smap, axis=0)
        return UncertaintySet(sigma=maps)

    def decoder_param_names(self, src):
        prefix = (f"dec{src}.", f"head{src}.")
        return [n for n in self.params if n.startswith(prefix)]


# -- checkpoint format --------------------------------------------------------
#
# Binary layout: magic, little-endian uint32 header length, UTF-8 JSON header,
# then the raw float64 buffers (little endian, row major) of every parameter
# in header order: all segmentation-net tensors, then all uncertainty-net
# tensors. The header records both configs and the RNG seed.

_MAGIC = b"MRSEG1\n"


@dataclass
class Checkpoint:
    seg_net: SegmentationNet
    unc_net: object  # UncertaintyNet or None (majority-vote baseline)
    seed: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, seg_net, unc_net, seed, extra=None):
    header = {
        "seed": int(seed),
        "backbone": {
            "in_channels": seg_net.cfg.in_channels,
            "base_width": seg_net.cfg.base_width,
            "depth": seg_net.cfg.depth,
        },
        "uncertainty": None if unc_net is None else {
            "num_sources": unc_net.cfg.num_sources,
            "base_width": unc_net.cfg.base_width,
            "depth": unc_net.cfg.depth,
        },
        "extra": extra or {},
        "params": {
            "seg": [[n, list(v.shape)] for n, v in seg_net.params.items()],
            "unc": [] if unc_net is None else
                   [[n, list(v.shape)] for n, v in unc_net.params.items()],
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for net in (seg_net, unc_net):
            if net is None:
                continue
            for value in net.params.values():
                fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        seg_net = SegmentationNet(SegBackboneConfig(**header["backbone"]))
        unc_net = None
        if header["uncertainty"] is not None:
            unc_net = UncertaintyNet(UncertaintyNetConfig(**header["uncertainty"]))
        for net, key in ((seg_net, "seg"), (unc_net, "unc")):
            if net is None:
                continue
            listed = header["params"][key]
            if [n for n, _ in listed] != list(net.params):
                raise ConfigError(f"{path}: parameter list mismatch for {key!r}")
            for name, shape in listed:
                shape = tuple(shape)
                if shape != net.params[name].shape:
                    raise ConfigError(
                        f"{path}: {name!r} has shape {shape}, expected "
                        f"{net.params[name].shape}"
                    )
                n_bytes = int(np.prod(shape)) * 8
                buf = fh.read(n_bytes)
                if len(buf) != n_bytes:
                    raise ConfigError(f"{path}: truncated buffer for {name!r}")
                net.params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return Checkpoint(seg_net=seg_net, unc_net=unc_net, seed=header["seed"],
                      extra=header.get("extra", {}))
