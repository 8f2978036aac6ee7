"""Layer-chain assembly, batched forward/backward, and checkpoint files.

A network is a linear chain of layer specs whose shape algebra is
validated up front: valid convs shrink each spatial dim by ``size - 1``,
full deconvs grow it back, pooling divides, unpooling multiplies.  The
chain must close (final output shape equals the input shape) and contain
at least one conv, pool, dense and unpool layer plus exactly one deconv
as the terminal layer.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ParseError, ShapeError
from .kernels import ConvKernel

LAYER_KINDS = ("conv", "pool", "dense", "unpool", "deconv", "flatten", "reshape")

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    """One layer in the chain; only the fields for its kind are set."""

    kind: str
    out_maps: int | None = None
    size: int | None = None
    units: int | None = None
    factor: int | None = None
    activation: str | None = None
    shape: tuple[int, int, int] | None = None


def conv(out_maps, size=3, activation="relu"):
    return LayerSpec("conv", out_maps=out_maps, size=size, activation=activation)


def pool(size=2):
    return LayerSpec("pool", size=size)


def dense(units, activation="relu"):
    return LayerSpec("dense", units=units, activation=activation)


def unpool(factor=2):
    return LayerSpec("unpool", factor=factor)


def deconv(out_maps, size=3, activation="identity"):
    return LayerSpec("deconv", out_maps=out_maps, size=size, activation=activation)


def flatten():
    return LayerSpec("flatten")


def reshape(maps, height, width):
    return LayerSpec("reshape", shape=(maps, height, width))


@dataclass
class NetworkConfig:
    """Ordered layer chain plus the input shape and initialization seed."""

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    seed: int = 0


def _layer_output_shape(in_shape, layer, index):
    def fail(msg):
        raise ConfigError(f"layer {index} ({layer.kind}): {msg}")

    kind = layer.kind
    if kind in ("conv", "deconv"):
        if len(in_shape) != 3:
            fail(f"needs a spatial (maps, h, w) input, got {in_shape}")
        maps, h, w = in_shape
        c = layer.size
        if c is None or c < 1:
            fail(f"invalid filter size {c}")
        if layer.out_maps is None or layer.out_maps < 1:
            fail(f"invalid output map count {layer.out_maps}")
        if kind == "conv":
            if h < c or w < c:
                fail(f"input {h}x{w} smaller than {c}x{c} filter")
            return (layer.out_maps, h - c + 1, w - c + 1)
        return (layer.out_maps, h + c - 1, w + c - 1)
    if kind == "pool":
        if len(in_shape) != 3:
            fail(f"needs a spatial input, got {in_shape}")
        maps, h, w = in_shape
        p = layer.size
        if p is None or p < 1:
            fail(f"invalid pool size {p}")
        if h % p or w % p:
            fail(f"spatial dims {h}x{w} not divisible by pool size {p}")
        return (maps, h // p, w // p)
    if kind == "unpool":
        if len(in_shape) != 3:
            fail(f"needs a spatial input, got {in_shape}")
        maps, h, w = in_shape
        f = layer.factor
        if f is None or f < 1:
            fail(f"invalid unpool factor {f}")
        return (maps, h * f, w * f)
    if kind == "flatten":
        if len(in_shape) != 3:
            fail(f"needs a spatial input, got {in_shape}")
        maps, h, w = in_shape
        return (maps * h * w,)
    if kind == "dense":
        if len(in_shape) != 1:
            fail(f"needs a flat input (insert flatten), got {in_shape}")
        if layer.units is None or layer.units < 1:
            fail(f"invalid unit count {layer.units}")
        return (layer.units,)
    if kind == "reshape":
        if len(in_shape) != 1:
            fail(f"needs a flat input, got {in_shape}")
        if layer.shape is None or len(layer.shape) != 3:
            fail(f"invalid target shape {layer.shape}")
        if math.prod(layer.shape) != in_shape[0]:
            fail(f"cannot reshape {in_shape[0]} values into {layer.shape}")
        return tuple(layer.shape)
    fail(f"unknown layer kind {kind!r}")


def shape_chain(config):
    """Output shape after each layer; entry 0 is the input shape."""
    shapes = [tuple(config.input_shape)]
    for i, layer in enumerate(config.layers):
        shapes.append(_layer_output_shape(shapes[-1], layer, i))
    return shapes


def validate(config):
    """Check the shape chain, autoencoder closure, and required topology."""
    if len(config.input_shape) != 3:
        raise ConfigError(f"input shape must be (maps, h, w), got {config.input_shape}")
    shapes = shape_chain(config)
    if shapes[-1] != tuple(config.input_shape):
        raise ConfigError(
            f"network is not an autoencoder: output shape {shapes[-1]} "
            f"!= input shape {tuple(config.input_shape)}"
        )
    kinds = [layer.kind for layer in config.layers]
    for required in ("conv", "pool", "dense", "unpool"):
        if required not in kinds:
            raise ConfigError(f"topology requires at least one {required} layer")
    if kinds.count("deconv") != 1 or kinds[-1] != "deconv":
        raise ConfigError("topology requires exactly one deconv as the terminal layer")
    return shapes


@dataclass
class DenseParams:
    """Weight matrix (units x inputs) and bias vector for a dense layer."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    """A validated config plus one parameter block per layer (None if none)."""

    config: NetworkConfig
    params: list

    def parameter_arrays(self):
        """All learnable arrays in layer order, weights before bias."""
        out = []
        for p in self.params:
            if p is not None:
                out.append(p.weights)
                out.append(p.bias)
        return out

    def weight_arrays(self):
        """Weight matrices/filters only (biases excluded)."""
        return [p.weights for p in self.params if p is not None]

    def parameter_count(self):
        return sum(a.size for a in self.parameter_arrays())


def build(config):
    """Allocate and initialize parameters for a validated config.

    Conv and dense weights draw from a fan-in-scaled normal
    (std sqrt(2 / fan_in)), which keeps activation variance alive through
    the ReLU stack; the terminal deconv starts at zero so an untrained
    network already outputs the all-black mask.  Biases start at zero.
    Draws come from one generator seeded with ``config.seed``, consumed
    in layer order, so builds are reproducible.
    """
    shapes = validate(config)
    rng = np.random.default_rng(config.seed)
    params = []
    for i, layer in enumerate(config.layers):
        in_shape = shapes[i]
        last = i == len(config.layers) - 1
        if layer.kind in ("conv", "deconv"):
            zi = in_shape[0]
            c = layer.size
            zo = layer.out_maps
            if layer.kind == "deconv" and last:
                w = np.zeros((zo, zi, c, c))
            else:
                std = math.sqrt(2.0 / (zi * c * c))
                w = rng.normal(0.0, std, size=(zo, zi, c, c))
            params.append(ConvKernel(zo, zi, c, w, np.zeros(zo)))
        elif layer.kind == "dense":
            std = math.sqrt(2.0 / in_shape[0])
            w = rng.normal(0.0, std, size=(layer.units, in_shape[0]))
            params.append(DenseParams(w, np.zeros(layer.units)))
        else:
            params.append(None)
    return Model(config, params)


def _check_batch(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(model.config.input_shape):
        raise ShapeError(
            f"batch shape {np.asarray(batch).shape} does not match network input "
            f"{tuple(model.config.input_shape)}"
        )
    return x, single


def forward(model, batch):
    """Run the chain over a batch; returns (outputs, per-layer cache).

    The cache holds each layer's input, pre-activation, and pooling
    argmax map as needed by :func:`backward`.
    """
    x, single = _check_batch(model, batch)
    cache = []
    for layer, p in zip(model.config.layers, model.params):
        kind = layer.kind
        if kind == "conv":
            z = kernels.conv_forward(x, p, activation="identity")
            cache.append({"input": x, "preact": z})
            x = kernels.relu(z) if layer.activation == "relu" else z
        elif kind == "deconv":
            z = kernels.deconv_forward(x, p, activation="identity")
            cache.append({"input": x, "preact": z})
            x = kernels.relu(z) if layer.activation == "relu" else z
        elif kind == "pool":
            x, argmax = kernels.maxpool_forward(x, layer.size)
            cache.append({"argmax": argmax})
        elif kind == "unpool":
            cache.append({})
            x = kernels.unpool(x, layer.factor)
        elif kind == "flatten":
            cache.append({"shape": x.shape})
            x = x.reshape(x.shape[0], -1)
        elif kind == "reshape":
            cache.append({"shape": x.shape})
            x = x.reshape((x.shape[0],) + tuple(layer.shape))
        elif kind == "dense":
            z = kernels.dense_forward(x, p.weights, p.bias, activation="identity")
            cache.append({"input": x, "preact": z})
            x = kernels.relu(z) if layer.activation == "relu" else z
        else:  # pragma: no cover - validate() rejects unknown kinds
            raise ConfigError(f"unknown layer kind {kind!r}")
    if single:
        return x[0], cache
    return x, cache


@dataclass
class ParamGrads:
    """Gradient block mirroring one layer's parameters."""

    weights: np.ndarray
    bias: np.ndarray


def backward(model, cache, grad_output):
    """Backpropagate an output gradient; returns per-layer ParamGrads.

    ``cache`` must come from a :func:`forward` call on the same model
    and batch.
    """
    if cache is None or len(cache) != len(model.config.layers):
        raise ValueError("backward requires the layer cache from a matching forward pass")
    # private copy: the relu mask below is applied in place
    g = np.array(grad_output, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    grads = [None] * len(model.config.layers)
    for i in range(len(model.config.layers) - 1, -1, -1):
        layer = model.params[i]
        spec = model.config.layers[i]
        entry = cache[i]
        kind = spec.kind
        if kind in ("conv", "deconv"):
            if spec.activation == "relu":
                np.multiply(g, entry["preact"] > 0, out=g)
            back = kernels.conv_backward if kind == "conv" else kernels.deconv_backward
            g, gw, gb = back(entry["input"], layer, g)
            grads[i] = ParamGrads(gw, gb)
        elif kind == "dense":
            if spec.activation == "relu":
                np.multiply(g, entry["preact"] > 0, out=g)
            g, gw, gb = kernels.dense_backward(entry["input"], layer.weights, g)
            grads[i] = ParamGrads(gw, gb)
        elif kind == "pool":
            g = kernels.maxpool_backward(g, entry["argmax"])
        elif kind == "unpool":
            g = kernels.unpool_backward(g, spec.factor)
        elif kind in ("flatten", "reshape"):
            g = g.reshape(entry["shape"])
    return grads


def desk_config(height=64, width=64, seed=0):
    """Canonical desk-scale architecture for frames with dims divisible by 4.

    Encoder: two 3x3 convs (8 maps), pool 2, 3x3 conv (16), pool 2,
    3x3 conv (16), flatten, dense bottleneck of 128.  Decoder: dense back
    to an 8-map grid, unpool 2, terminal 3x3 deconv to one map with
    identity activation so negative normalized pixels are reachable.
    """
    return _preset_config(height, width, seed, enc_maps=(8, 8, 16, 16), bottleneck=128)


def paperlike_config(height=64, width=64, seed=0):
    """Higher-capacity variant of the desk preset (wider maps, 512 bottleneck)."""
    return _preset_config(height, width, seed, enc_maps=(16, 16, 32, 32), bottleneck=512)


def _preset_config(height, width, seed, enc_maps, bottleneck):
    for name, dim in (("height", height), ("width", width)):
        if dim % 4 != 0 or dim < 20:
            raise ConfigError(
                f"preset architectures need {name} divisible by 4 and >= 20, got {dim}"
            )
    m1, m2, m3, m4 = enc_maps
    dec_h, dec_w = (height - 2) // 2, (width - 2) // 2
    return NetworkConfig(
        input_shape=(1, height, width),
        layers=[
            conv(m1, 3, "relu"),
            conv(m2, 3, "relu"),
            pool(2),
            conv(m3, 3, "relu"),
            pool(2),
            conv(m4, 3, "relu"),
            flatten(),
            dense(bottleneck, "relu"),
            dense(8 * dec_h * dec_w, "relu"),
            reshape(8, dec_h, dec_w),
            unpool(2),
            deconv(1, 3, "identity"),
        ],
        seed=seed,
    )


PRESETS = {"desk": desk_config, "paperlike": paperlike_config}


# --- checkpoint file format -------------------------------------------------
#
# magic "FSCK", u32 version, u32 descriptor length, UTF-8 descriptor text,
# little-endian float32 parameter block in layer order (weights then bias),
# trailing CRC32 over all preceding bytes.


def config_descriptor(config, epoch=0, best_valid=float("nan")):
    """Canonical text form of a config plus training metadata."""
    lines = [
        "input {} {} {}".format(*config.input_shape),
        f"seed {config.seed}",
    ]
    for layer in config.layers:
        if layer.kind in ("conv", "deconv"):
            lines.append(
                f"layer {layer.kind} out_maps={layer.out_maps} size={layer.size} "
                f"activation={layer.activation}"
            )
        elif layer.kind == "pool":
            lines.append(f"layer pool size={layer.size}")
        elif layer.kind == "unpool":
            lines.append(f"layer unpool factor={layer.factor}")
        elif layer.kind == "dense":
            lines.append(f"layer dense units={layer.units} activation={layer.activation}")
        elif layer.kind == "flatten":
            lines.append("layer flatten")
        elif layer.kind == "reshape":
            lines.append(
                "layer reshape maps={} height={} width={}".format(*layer.shape)
            )
    lines.append(f"epoch {epoch}")
    lines.append(f"best_valid {float(best_valid).hex()}")
    return "\n".join(lines) + "\n"


def parse_descriptor(text):
    """Inverse of :func:`config_descriptor`; returns (config, epoch, best_valid)."""
    input_shape = None
    seed = 0
    layers = []
    epoch = 0
    best_valid = float("nan")
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        head = tokens[0]
        try:
            if head == "input":
                input_shape = tuple(int(t) for t in tokens[1:4])
            elif head == "seed":
                seed = int(tokens[1])
            elif head == "epoch":
                epoch = int(tokens[1])
            elif head == "best_valid":
                best_valid = float.fromhex(tokens[1])
            elif head == "layer":
                kind = tokens[1]
                kv = dict(t.split("=", 1) for t in tokens[2:])
                if kind in ("conv", "deconv"):
                    layers.append(
                        LayerSpec(
                            kind,
                            out_maps=int(kv["out_maps"]),
                            size=int(kv["size"]),
                            activation=kv["activation"],
                        )
                    )
                elif kind == "pool":
                    layers.append(pool(int(kv["size"])))
                elif kind == "unpool":
                    layers.append(unpool(int(kv["factor"])))
                elif kind == "dense":
                    layers.append(dense(int(kv["units"]), kv["activation"]))
                elif kind == "flatten":
                    layers.append(flatten())
                elif kind == "reshape":
                    layers.append(
                        reshape(int(kv["maps"]), int(kv["height"]), int(kv["width"]))
                    )
                else:
                    raise ParseError(f"unknown layer kind {kind!r} in descriptor")
            else:
                raise ParseError(f"unknown descriptor directive {head!r}")
        except (KeyError, IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed descriptor line {line!r}") from exc
    if input_shape is None:
        raise ParseError("descriptor is missing the input declaration")
    return NetworkConfig(input_shape, layers, seed), epoch, best_valid


@dataclass
class Checkpoint:
    """A loaded model plus the training metadata stored with it."""

    model: Model
    epoch: int = 0
    best_valid: float = float("nan")
    version: int = CHECKPOINT_VERSION


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(model, path, epoch=0, best_valid=float("nan")):
    """Serialize a model; parameters are stored as little-endian float32."""
    desc = config_descriptor(model.config, epoch=epoch, best_valid=best_valid).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(desc))
    blob += desc
    for arr in model.parameter_arrays():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    _atomic_write(path, bytes(blob))


def load_checkpoint(path):
    """Parse a checkpoint file back into a model.

    Raises ParseError with a distinct message for bad magic, unsupported
    version, truncation, or checksum mismatch.  Never returns a partially
    populated model.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic, not a checkpoint file")
    if len(data) < 12:
        raise ParseError(f"{path}: truncated checkpoint header")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise ParseError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ParseError(f"{path}: checksum mismatch, checkpoint is corrupt")
    desc_len = struct.unpack_from("<I", data, 8)[0]
    desc_end = 12 + desc_len
    if desc_end + 4 > len(data):
        raise ParseError(f"{path}: truncated checkpoint descriptor")
    config, epoch, best_valid = parse_descriptor(data[12:desc_end].decode())
    model = build(config)
    block = data[desc_end:-4]
    expected = 4 * model.parameter_count()
    if len(block) != expected:
        raise ParseError(
            f"{path}: parameter block is {len(block)} bytes, expected {expected}"
        )
    values = np.frombuffer(block, dtype="<f4").astype(np.float64)
    offset = 0
    for arr in model.parameter_arrays():
        arr[...] = values[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    return Checkpoint(model, epoch=epoch, best_valid=best_valid, version=version)
