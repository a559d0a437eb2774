"""The tiny multi-path super-resolution network.

Graph (channels for the default config, d=8, s=6, scale=2):

    input (n,1,h,w)
      -> head:    3x3 conv 1->d, act          = features tap
      -> shrink:  1x1 conv d->s, act
      -> blocks:  num_blocks x [ three parallel convs s->s with kernels
                  (3,3),(1,3),(3,1), summed; act; identity skip ]
      -> expand:  1x1 conv s->d, act          = residual tap
      -> merged = features + residual         = merged tap
      -> upsample: 3x3 conv d->scale^2, pixel_shuffle
    output (n,1,h*scale,w*scale)

The network runs in a normalized [0,1] domain; `upscale_plane` wraps the
[0,255] conversion for callers working with image planes.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvParams,
    PReLUParams,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    pixel_shuffle,
    pixel_unshuffle,
    prelu_backward,
    prelu_forward,
    relu_backward,
    relu_forward,
)

MAGIC = "TMSR1"

SUPPORTED_KERNELS = {(3, 3), (1, 3), (3, 1), (1, 1)}
ACTIVATIONS = ("prelu", "relu")
INITS = ("he", "zero")


class WeightsFileError(Exception):
    """Base class for weights-file load failures."""


class BadMagicError(WeightsFileError):
    pass


class PayloadLengthError(WeightsFileError):
    pass


class ManifestMismatchError(WeightsFileError):
    pass


@dataclass
class ModelConfig:
    scale: int = 2
    feat_channels: int = 8
    shrink_channels: int = 6
    num_blocks: int = 2
    branch_kernels: tuple = ((3, 3), (1, 3), (3, 1))
    activation: str = "prelu"
    prelu_shared: bool = False
    init: str = "he"

    def __post_init__(self):
        self.branch_kernels = tuple(tuple(k) for k in self.branch_kernels)
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        for k in self.branch_kernels:
            if k not in SUPPORTED_KERNELS:
                raise ValueError(f"kernel shape {k} outside supported set "
                                 f"{sorted(SUPPORTED_KERNELS)}")

    def to_dict(self) -> dict:
        return {"scale": self.scale,
                "feat_channels": self.feat_channels,
                "shrink_channels": self.shrink_channels,
                "num_blocks": self.num_blocks,
                "branch_kernels": [list(k) for k in self.branch_kernels],
                "activation": self.activation,
                "prelu_shared": self.prelu_shared,
                "init": self.init}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(tuple(x) for x in v) if k == "branch_kernels" else v
                      for k, v in d.items()})


@dataclass
class Taps:
    """Intermediate activations: merged == features + residual by construction."""

    features: np.ndarray
    residual: np.ndarray
    merged: np.ndarray


def _layer_channel_plan(cfg: ModelConfig):
    """Yield (name, kind, spec) for every parameterized layer, in order.

    kind 'conv': spec = (in_ch, out_ch, kh, kw); kind 'act': spec = channels.
    """
    d, s = cfg.feat_channels, cfg.shrink_channels
    yield "head.conv", "conv", (1, d, 3, 3)
    yield "head.act", "act", d
    yield "shrink.conv", "conv", (d, s, 1, 1)
    yield "shrink.act", "act", s
    for b in range(cfg.num_blocks):
        for j, (kh, kw) in enumerate(cfg.branch_kernels):
            yield f"block{b}.branch{j}", "conv", (s, s, kh, kw)
        yield f"block{b}.act", "act", s
    yield "expand.conv", "conv", (s, d, 1, 1)
    yield "expand.act", "act", d
    yield "upsample.conv", "conv", (d, cfg.scale * cfg.scale, 3, 3)


def count_params(cfg: ModelConfig):
    """Exact parameter count (weights + biases + alphas) and per-layer rows."""
    rows = []
    total = 0
    for name, kind, spec in _layer_channel_plan(cfg):
        if kind == "conv":
            cin, cout, kh, kw = spec
            n = cout * cin * kh * kw + cout
        else:
            if cfg.activation != "prelu":
                continue
            n = 1 if cfg.prelu_shared else spec
        rows.append((name, n))
        total += n
    return total, rows


class _Conv:
    def __init__(self, name, params: ConvParams):
        self.name = name
        self.params = params
        self._x = None
        self.grad_w = None
        self.grad_b = None

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        return conv2d_forward(x, self.params)

    def backward(self, grad_out):
        gx, gw, gb = conv2d_backward(self._x, self.params, grad_out)
        self.grad_w = gw if self.grad_w is None else self.grad_w + gw
        self.grad_b = gb if self.grad_b is None else self.grad_b + gb
        return gx

    def zero_grad(self):
        self.grad_w = None
        self.grad_b = None


class _Act:
    def __init__(self, name, kind, alpha=None):
        self.name = name
        self.kind = kind
        self.params = PReLUParams(alpha) if kind == "prelu" else None
        self._x = None
        self.grad_a = None

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        if self.kind == "relu":
            return relu_forward(x)
        return prelu_forward(x, self.params)

    def backward(self, grad_out):
        if self.kind == "relu":
            return relu_backward(self._x, grad_out)
        gx, ga = prelu_backward(self._x, self.params, grad_out)
        self.grad_a = ga if self.grad_a is None else self.grad_a + ga
        return gx

    def zero_grad(self):
        self.grad_a = None


class TmsrModel:
    """Built graph: owns the parameter arrays and runs forward/backward."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.head_conv = None
        self.head_act = None
        self.shrink_conv = None
        self.shrink_act = None
        self.blocks = []         # list of ([branch convs], act)
        self.expand_conv = None
        self.expand_act = None
        self.upsample_conv = None
        self._layers = {}        # name -> _Conv/_Act

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0,
              dtype=np.float32) -> "TmsrModel":
        """Materialize parameter arrays and wire the graph.

        He-uniform weights (bound sqrt(6/fan_in)), zero biases, alpha 0.25;
        init='zero' zeroes the weights too (kept for the degenerate-init
        demonstration -- it does not train).
        """
        m = cls(config, dtype=dtype)
        rng = np.random.default_rng(seed)
        for name, kind, spec in _layer_channel_plan(config):
            if kind == "conv":
                cin, cout, kh, kw = spec
                if config.init == "zero":
                    w = np.zeros((cout, cin, kh, kw), dtype=dtype)
                else:
                    bound = np.sqrt(6.0 / (cin * kh * kw))
                    w = rng.uniform(-bound, bound,
                                    size=(cout, cin, kh, kw)).astype(dtype)
                layer = _Conv(name, ConvParams(w, np.zeros(cout, dtype=dtype)))
            else:
                if config.activation == "prelu":
                    n = 1 if config.prelu_shared else spec
                    layer = _Act(name, "prelu", np.full(n, 0.25, dtype=dtype))
                else:
                    layer = _Act(name, "relu")
            m._layers[name] = layer
        m._wire()
        total, _ = count_params(config)
        assert m.total_params() == total
        return m

    def _wire(self):
        self.head_conv = self._layers["head.conv"]
        self.head_act = self._layers["head.act"]
        self.shrink_conv = self._layers["shrink.conv"]
        self.shrink_act = self._layers["shrink.act"]
        self.blocks = []
        for b in range(self.config.num_blocks):
            branches = [self._layers[f"block{b}.branch{j}"]
                        for j in range(len(self.config.branch_kernels))]
            self.blocks.append((branches, self._layers[f"block{b}.act"]))
        self.expand_conv = self._layers["expand.conv"]
        self.expand_act = self._layers["expand.act"]
        self.upsample_conv = self._layers["upsample.conv"]

    # -- parameter access --------------------------------------------------

    def arrays(self):
        """(name, array) pairs in canonical manifest order."""
        for name, kind, _ in _layer_channel_plan(self.config):
            layer = self._layers.get(name)
            if layer is None:
                continue
            if kind == "conv":
                yield f"{name}.weight", layer.params.weights
                yield f"{name}.bias", layer.params.bias
            elif layer.kind == "prelu":
                yield f"{name}.alpha", layer.params.alpha

    def manifest(self):
        return [(name, arr.shape) for name, arr in self.arrays()]

    def total_params(self) -> int:
        return sum(arr.size for _, arr in self.arrays())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.arrays()])

    def set_flat(self, flat: np.ndarray) -> None:
        if flat.size != self.total_params():
            raise ShapeError(f"flat vector length {flat.size} != "
                             f"parameter count {self.total_params()}")
        pos = 0
        for _, arr in self.arrays():
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size

    def grads_flat(self) -> np.ndarray:
        """Accumulated gradients, concatenated in manifest order."""
        parts = []
        for name, kind, _ in _layer_channel_plan(self.config):
            layer = self._layers.get(name)
            if layer is None:
                continue
            if kind == "conv":
                parts.append(layer.grad_w.ravel())
                parts.append(layer.grad_b)
            elif layer.kind == "prelu":
                parts.append(layer.grad_a)
        return np.concatenate(parts)

    def zero_grad(self):
        for layer in self._layers.values():
            layer.zero_grad()

    def to_dtype(self, dtype) -> "TmsrModel":
        """Deep copy carrying the same weights in another dtype."""
        other = TmsrModel(self.config, dtype=dtype)
        for name, kind, _ in _layer_channel_plan(self.config):
            layer = self._layers[name]
            if kind == "conv":
                other._layers[name] = _Conv(name, ConvParams(
                    layer.params.weights.astype(dtype),
                    layer.params.bias.astype(dtype),
                    depthwise=layer.params.depthwise))
            elif layer.kind == "prelu":
                other._layers[name] = _Act(name, "prelu",
                                           layer.params.alpha.astype(dtype))
            else:
                other._layers[name] = _Act(name, "relu")
        other._wire()
        return other

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray, cache: bool = False):
        """Run the graph on a normalized (n,1,h,w) input.

        Returns (output, Taps). With cache=True layer inputs are retained
        so backward() can run afterwards.
        """
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (n,1,h,w) input, got {x.shape}")
        f = self.head_act.forward(self.head_conv.forward(x, cache), cache)
        t = self.shrink_act.forward(self.shrink_conv.forward(f, cache), cache)
        for branches, act in self.blocks:
            s = branches[0].forward(t, cache)
            for br in branches[1:]:
                s = s + br.forward(t, cache)
            t = t + act.forward(s, cache)
        r = self.expand_act.forward(self.expand_conv.forward(t, cache), cache)
        merged = f + r
        up = self.upsample_conv.forward(merged, cache)
        y = pixel_shuffle(up, self.config.scale)
        return y, Taps(features=f, residual=r, merged=merged)

    def backward(self, grad_y: np.ndarray) -> None:
        """Accumulate parameter gradients; requires a cached forward."""
        g = pixel_unshuffle(grad_y, self.config.scale)
        g_merged = self.upsample_conv.backward(g)
        g_f = g_merged            # features tap branch of the residual add
        g_r = g_merged
        g_t = self.expand_conv.backward(self.expand_act.backward(g_r))
        for branches, act in reversed(self.blocks):
            g_s = act.backward(g_t)
            g_in = g_t            # identity skip
            for br in branches:
                g_in = g_in + br.backward(g_s)
            g_t = g_in
        g_f = g_f + self.shrink_conv.backward(self.shrink_act.backward(g_t))
        self.head_conv.backward(self.head_act.backward(g_f))

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        header = io.StringIO()
        header.write(MAGIC + "\n")
        header.write("config " + json.dumps(self.config.to_dict(),
                                            separators=(",", ":")) + "\n")
        total = 0
        for name, arr in self.arrays():
            dims = "x".join(str(d) for d in arr.shape)
            header.write(f"layer {name} {dims}\n")
            total += arr.size
        header.write(f"payload {total}\n")
        with open(path, "wb") as fh:
            fh.write(header.getvalue().encode("ascii"))
            for _, arr in self.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TmsrModel":
        with open(path, "rb") as fh:
            magic = fh.readline().decode("ascii", "replace").rstrip("\n")
            if magic != MAGIC:
                raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
            line = fh.readline().decode("ascii").rstrip("\n")
            if not line.startswith("config "):
                raise ManifestMismatchError("missing config header line")
            config = ModelConfig.from_dict(json.loads(line[len("config "):]))
            manifest = []
            while True:
                line = fh.readline().decode("ascii").rstrip("\n")
                if line.startswith("payload "):
                    declared = int(line.split()[1])
                    break
                if not line.startswith("layer "):
                    raise ManifestMismatchError(f"unexpected header line {line!r}")
                _, name, dims = line.split(" ")
                manifest.append((name, tuple(int(d) for d in dims.split("x"))))
            model = cls.build(config, seed=0)
            expected = model.manifest()
            if manifest != expected:
                raise ManifestMismatchError(
                    f"layer manifest does not match config: file has "
                    f"{manifest[:3]}... expected {expected[:3]}...")
            if declared != model.total_params():
                raise ManifestMismatchError(
                    f"declared payload {declared} != config parameter count "
                    f"{model.total_params()}")
            payload = fh.read()
            if len(payload) != declared * 4:
                raise PayloadLengthError(
                    f"payload length mismatch: {len(payload)} bytes for "
                    f"{declared} declared floats")
            flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            model.set_flat(flat)
            return model


def build(config: ModelConfig, seed: int = 0) -> TmsrModel:
    return TmsrModel.build(config, seed=seed)


def upscale_plane(model: TmsrModel, plane: np.ndarray) -> np.ndarray:
    """Run one [0,255] image plane through the network; returns a clipped plane."""
    x = (plane.astype(np.float32) / 255.0)[None, None]
    y, _ = model.forward(x)
    return np.clip(y[0, 0] * 255.0, 0.0, 255.0).astype(np.float32)
