"""Small sequential CNN: architecture description, parameters, forward pass
with activation capture, conv/BN weight fusion, and a self-describing binary
model format.

Every convolution is immediately followed by batch norm and ReLU; a block may
end with 2x2 max pooling. The tail is a global average pool feeding a dense
classifier. Convolutions carry no bias (batch norm's shift plays that role).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    DTYPES,
    Tape,
    Tensor,
    batchnorm,
    conv2d,
    dense,
    global_avg_pool,
    maxpool2,
    relu,
)

MODEL_MAGIC = b"BDNP"
MODEL_VERSION = 1


class ModelLoadError(Exception):
    """A model file could not be read."""


class BadMagicError(ModelLoadError):
    pass


class VersionMismatchError(ModelLoadError):
    pass


class TruncatedModelError(ModelLoadError):
    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the classifier; channel counts chain block to block."""

    in_channels: int
    image_size: int
    blocks: tuple
    num_classes: int
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("network needs at least one conv block")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.bn_eps < 0:
            raise ValueError(f"bn_eps must be non-negative, got {self.bn_eps}")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        size = self.image_size
        for i, b in enumerate(self.blocks):
            if b.out_channels < 1 or b.kernel_size < 1 or b.stride < 1 or b.padding < 0:
                raise ValueError(f"invalid conv block {i}: {b}")
            size = (size + 2 * b.padding - b.kernel_size) // b.stride + 1
            if size < 1:
                raise ValueError(f"conv block {i} shrinks the feature map to nothing")
            if b.pool:
                if size % 2:
                    raise ValueError(f"conv block {i} feeds an odd {size}x{size} map into maxpool")
                size //= 2

    def channels(self) -> list:
        """Input channel count of each conv block, then the classifier width."""
        chain = [self.in_channels]
        for b in self.blocks:
            chain.append(b.out_channels)
        return chain

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "bn_eps": self.bn_eps,
            "blocks": [
                {
                    "out_channels": b.out_channels,
                    "kernel_size": b.kernel_size,
                    "stride": b.stride,
                    "padding": b.padding,
                    "pool": b.pool,
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        blocks = tuple(
            ConvBlock(
                out_channels=int(b["out_channels"]),
                kernel_size=int(b.get("kernel_size", 3)),
                stride=int(b.get("stride", 1)),
                padding=int(b.get("padding", 1)),
                pool=bool(b.get("pool", False)),
            )
            for b in d["blocks"]
        )
        return cls(
            in_channels=int(d["in_channels"]),
            image_size=int(d["image_size"]),
            blocks=blocks,
            num_classes=int(d["num_classes"]),
            bn_eps=float(d.get("bn_eps", 1e-5)),
        )


def default_spec(in_channels: int = 3, image_size: int = 16, num_classes: int = 4) -> NetworkSpec:
    """Three scored conv layers (16/32/64 channels), pools after the first two."""
    return NetworkSpec(
        in_channels=in_channels,
        image_size=image_size,
        blocks=(
            ConvBlock(16, 3, 1, 1, pool=True),
            ConvBlock(32, 3, 1, 1, pool=True),
            ConvBlock(64, 3, 1, 1, pool=False),
        ),
        num_classes=num_classes,
    )


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ConvLayerParams:
    weight: Tensor
    bn: BNParams


@dataclass
class NetworkParams:
    conv_layers: list
    fc_weight: Tensor
    fc_bias: Tensor
    precision: str = "float32"

    def trainables(self) -> list:
        out = []
        for layer in self.conv_layers:
            out.extend([layer.weight, layer.bn.gamma, layer.bn.beta])
        out.extend([self.fc_weight, self.fc_bias])
        return out

    def all_arrays(self) -> list:
        out = []
        for layer in self.conv_layers:
            out.extend([layer.weight.data, layer.bn.gamma.data, layer.bn.beta.data,
                        layer.bn.running_mean, layer.bn.running_var])
        out.extend([self.fc_weight.data, self.fc_bias.data])
        return out

    def copy(self) -> "NetworkParams":
        def t(x):
            c = Tensor(x.data.copy())
            c.requires_grad = x.requires_grad
            return c

        layers = [
            ConvLayerParams(
                weight=t(l.weight),
                bn=BNParams(t(l.bn.gamma), t(l.bn.beta),
                            l.bn.running_mean.copy(), l.bn.running_var.copy()),
            )
            for l in self.conv_layers
        ]
        return NetworkParams(layers, t(self.fc_weight), t(self.fc_bias), self.precision)

    def equal(self, other: "NetworkParams") -> bool:
        mine, theirs = self.all_arrays(), other.all_arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


@dataclass
class ActivationTrace:
    """Post-ReLU channel maps of every scored layer, one [N,C,H,W] array each."""

    layer_maps: list

    def per_sample_channel_norms(self, layer: int) -> np.ndarray:
        """l2 norm of each flattened channel map, as a [channels, samples] matrix."""
        maps = self.layer_maps[layer]
        return np.sqrt((maps.astype(np.float64) ** 2).sum(axis=(2, 3))).T


def init_params(spec: NetworkSpec, seed: int, precision: str = "float32") -> NetworkParams:
    """Fan-in-scaled uniform conv/dense weights; identity batch norm state."""
    if precision not in DTYPES:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}")
    dt = DTYPES[precision]
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dt)

    layers = []
    cin = spec.in_channels
    for b in spec.blocks:
        w = Tensor(uniform((b.out_channels, cin, b.kernel_size, b.kernel_size),
                           cin * b.kernel_size * b.kernel_size), requires_grad=True)
        bn = BNParams(
            gamma=Tensor(np.ones(b.out_channels, dtype=dt), requires_grad=True),
            beta=Tensor(np.zeros(b.out_channels, dtype=dt), requires_grad=True),
            running_mean=np.zeros(b.out_channels, dtype=dt),
            running_var=np.ones(b.out_channels, dtype=dt),
        )
        layers.append(ConvLayerParams(weight=w, bn=bn))
        cin = b.out_channels
    fc_w = Tensor(uniform((spec.num_classes, cin), cin), requires_grad=True)
    fc_b = Tensor(np.zeros(spec.num_classes, dtype=dt), requires_grad=True)
    return NetworkParams(layers, fc_w, fc_b, precision)


def forward(spec: NetworkSpec, params: NetworkParams, batch, *,
            capture: bool = False, mode: str = "infer", tape: Optional[Tape] = None):
    """Run the network on a [N,C,H,W] batch.

    Returns (logits, trace, tape); the trace holds each scored layer's
    post-ReLU maps when capture is on, else None.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=DTYPES[params.precision])
    if x.data.ndim != 4:
        raise ValueError(f"batch must be 4-d [N,C,H,W], got {x.data.ndim}-d")
    if x.data.shape[1] != spec.in_channels or x.data.shape[2] != spec.image_size \
            or x.data.shape[3] != spec.image_size:
        raise ValueError(
            f"batch shape {x.data.shape[1:]} does not match spec "
            f"({spec.in_channels},{spec.image_size},{spec.image_size})")

    maps = [] if capture else None
    h = x
    for block, layer in zip(spec.blocks, params.conv_layers):
        h = conv2d(h, layer.weight, stride=block.stride, padding=block.padding, tape=tape)
        h = batchnorm(h, layer.bn.gamma, layer.bn.beta,
                      layer.bn.running_mean, layer.bn.running_var,
                      eps=spec.bn_eps, mode=mode, tape=tape)
        h = relu(h, tape=tape)
        if capture:
            maps.append(h.data.copy())
        if block.pool:
            h = maxpool2(h, tape=tape)
    h = global_avg_pool(h, tape=tape)
    logits = dense(h, params.fc_weight, params.fc_bias, tape=tape)
    trace = ActivationTrace(maps) if capture else None
    return logits, trace, tape


def fuse_conv_bn(weight, gamma, running_var, eps: float) -> np.ndarray:
    """Fold batch-norm scaling into conv weights: fused_c = W_c * gamma_c / sigma_c.

    sigma_c = sqrt(running_var_c + eps) and must be positive.
    """
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    g = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    rv = np.asarray(running_var)
    sigma = np.sqrt(rv + eps)
    if np.any(sigma <= 0):
        raise ValueError("sigma = sqrt(running_var + eps) must be positive for every channel")
    return w * (g / sigma)[:, None, None, None]


def fused_bias(gamma, beta, running_mean, running_var, eps: float) -> np.ndarray:
    """Per-channel affine offset left over after fusion: beta - gamma * mean / sigma."""
    g = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    b = beta.data if isinstance(beta, Tensor) else np.asarray(beta)
    sigma = np.sqrt(np.asarray(running_var) + eps)
    return b - g * np.asarray(running_mean) / sigma


def _write_tensor(f, arr: np.ndarray) -> None:
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _layer_chunks(params: NetworkParams) -> list:
    chunks = []
    for i, layer in enumerate(params.conv_layers):
        chunks.append((i, [layer.weight.data, layer.bn.gamma.data, layer.bn.beta.data,
                           layer.bn.running_mean, layer.bn.running_var]))
    chunks.append((len(params.conv_layers), [params.fc_weight.data, params.fc_bias.data]))
    return chunks


def save_model(spec: NetworkSpec, params: NetworkParams, path) -> None:
    """Write magic, version, precision tag, inline spec JSON, then per-layer tensors."""
    width = 4 if params.precision == "float32" else 8
    spec_blob = json.dumps(spec.to_dict()).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<B", width))
        f.write(struct.pack("<I", len(spec_blob)))
        f.write(spec_blob)
        for layer_index, tensors in _layer_chunks(params):
            f.write(struct.pack("<I", layer_index))
            f.write(struct.pack("<I", len(tensors)))
            for arr in tensors:
                _write_tensor(f, arr)


def _read_exact(f, n: int, what: str, layer_index: Optional[int] = None) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        where = "header" if layer_index is None else f"layer {layer_index}"
        raise TruncatedModelError(f"model file truncated in {where} while reading {what}",
                                  layer_index=layer_index)
    return buf


def load_model(path):
    """Read a model file back into (spec, params); inverse of save_model."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise BadMagicError(f"not a model file: bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != MODEL_VERSION:
            raise VersionMismatchError(f"unsupported model version {version}, expected {MODEL_VERSION}")
        width = struct.unpack("<B", _read_exact(f, 1, "precision tag"))[0]
        if width not in (4, 8):
            raise ModelLoadError(f"unknown precision tag {width}")
        dt = np.dtype("<f4") if width == 4 else np.dtype("<f8")
        precision = "float32" if width == 4 else "float64"
        spec_len = struct.unpack("<I", _read_exact(f, 4, "spec length"))[0]
        spec_raw = _read_exact(f, spec_len, "spec json")
        try:
            spec = NetworkSpec.from_dict(json.loads(spec_raw.decode("utf-8")))
        except (ValueError, KeyError) as e:
            raise ModelLoadError(f"invalid inline spec: {e}") from e

        def read_tensor(layer_index):
            rank = struct.unpack("<I", _read_exact(f, 4, "tensor rank", layer_index))[0]
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor dims", layer_index))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, count * width, "tensor data", layer_index)
            return np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))

        n_blocks = len(spec.blocks)
        layers = []
        for i in range(n_blocks + 1):
            layer_index = struct.unpack("<I", _read_exact(f, 4, "layer index", i))[0]
            if layer_index != i:
                raise ModelLoadError(f"layer chunks out of order: expected {i}, found {layer_index}")
            count = struct.unpack("<I", _read_exact(f, 4, "tensor count", i))[0]
            expected = 5 if i < n_blocks else 2
            if count != expected:
                raise ModelLoadError(f"layer {i} carries {count} tensors, expected {expected}")
            tensors = [read_tensor(i) for _ in range(count)]
            layers.append(tensors)
        if f.read(1):
            raise ModelLoadError("trailing data after the last layer chunk")

    conv_layers = []
    for tensors in layers[:-1]:
        w, gamma, beta, rm, rv = tensors
        conv_layers.append(ConvLayerParams(
            weight=Tensor(w, requires_grad=True),
            bn=BNParams(Tensor(gamma, requires_grad=True), Tensor(beta, requires_grad=True),
                        rm.copy(), rv.copy()),
        ))
    fc_w, fc_b = layers[-1]
    params = NetworkParams(conv_layers, Tensor(fc_w, requires_grad=True),
                           Tensor(fc_b, requires_grad=True), precision)
    return spec, params
