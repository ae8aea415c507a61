"""Small fully convolutional affordance network with exact analytic gradients,
the masked weighted softmax loss, and a deterministic SGD training loop.

Tensors are NHWC float arrays. The default architecture keeps the structural
pattern of the affordance interpreter at desk scale: 3x3 convs with a strided
stage, a bilinear upsample back to input resolution, and a 5x5 refinement
conv producing 3 channels (positive, negative, background) per pixel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GFNET1"


class ConfigurationError(ValueError):
    """Architecture/input shape mismatch."""


class NumericError(FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}")
        self.step = step


class IncompatibleFileError(ValueError):
    """Parameter file failed magic/shape/checksum validation."""


# ---------------------------------------------------------------------------
# layer specs and parameters


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    cin: int
    cout: int
    stride: int = 1
    pad: int = 0

    def descriptor(self) -> str:
        return f"conv {self.kh} {self.kw} {self.cin} {self.cout} {self.stride} {self.pad}"


@dataclass(frozen=True)
class Relu:
    def descriptor(self) -> str:
        return "relu"


@dataclass(frozen=True)
class Upsample2:
    """Fixed (non-learned) bilinear x2 upsampling, half-pixel centers."""

    def descriptor(self) -> str:
        return "upsample2"


def parse_layer(text: str):
    parts = text.split()
    if parts[0] == "conv" and len(parts) == 7:
        return Conv(*(int(p) for p in parts[1:]))
    if parts[0] == "relu" and len(parts) == 1:
        return Relu()
    if parts[0] == "upsample2" and len(parts) == 1:
        return Upsample2()
    raise IncompatibleFileError(f"unknown layer descriptor {text!r}")


def default_architecture(c1: int = 16, c2: int = 32, c3: int = 16) -> tuple:
    """3x3 conv + ReLU, strided 3x3 conv + ReLU, bilinear upsample + 3x3
    conv + ReLU, then a 5x5 refinement conv to 3 channels."""
    return (
        Conv(3, 3, 3, c1, stride=1, pad=1),
        Relu(),
        Conv(3, 3, c1, c2, stride=2, pad=1),
        Relu(),
        Upsample2(),
        Conv(3, 3, c2, c3, stride=1, pad=1),
        Relu(),
        Conv(5, 5, c3, 3, stride=1, pad=2),
    )


@dataclass
class NetworkParams:
    """Architecture descriptor plus per-conv (kernel, bias) weight arrays."""

    arch: tuple
    weights: list  # [(W, b)] aligned with conv layers in order

    def conv_layers(self):
        return [l for l in self.arch if isinstance(l, Conv)]

    @property
    def dtype(self):
        return self.weights[0][0].dtype

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            self.arch, [(w.astype(dtype), b.astype(dtype)) for w, b in self.weights]
        )

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, [(w.copy(), b.copy()) for w, b in self.weights])

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.weights)


def init_params(arch, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Seeded Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer in arch:
        if isinstance(layer, Conv):
            fan_in = layer.kh * layer.kw * layer.cin
            fan_out = layer.kh * layer.kw * layer.cout
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, (layer.kh, layer.kw, layer.cin, layer.cout))
            weights.append((w.astype(dtype), np.zeros(layer.cout, dtype=dtype)))
    verify_architecture(arch)
    return NetworkParams(tuple(arch), weights)


def verify_architecture(arch) -> None:
    convs = [l for l in arch if isinstance(l, Conv)]
    if not convs or convs[0].cin != 3 or convs[-1].cout != 3:
        raise ConfigurationError("network must map 3 input channels to 3 outputs")
    for prev, nxt in zip(convs, convs[1:]):
        if prev.cout != nxt.cin:
            raise ConfigurationError(
                f"channel mismatch: {prev.descriptor()} -> {nxt.descriptor()}"
            )


# ---------------------------------------------------------------------------
# layer forward/backward


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _tap_view(xp: np.ndarray, ki: int, kj: int, oh: int, ow: int, stride: int):
    return xp[:, ki : ki + (oh - 1) * stride + 1 : stride,
              kj : kj + (ow - 1) * stride + 1 : stride, :]


def conv_forward(x: np.ndarray, layer: Conv, w: np.ndarray, b: np.ndarray):
    """Convolution as kh*kw shifted matmuls (keeps memory traffic low)."""
    if x.shape[3] != layer.cin:
        raise ConfigurationError(
            f"expected {layer.cin} input channels, got {x.shape[3]}"
        )
    n, h, wd, _ = x.shape
    oh = _out_size(h, layer.kh, layer.stride, layer.pad)
    ow = _out_size(wd, layer.kw, layer.stride, layer.pad)
    if oh <= 0 or ow <= 0:
        raise ConfigurationError("input too small for kernel")
    pad = layer.pad
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    y = np.empty((n, oh, ow, layer.cout), dtype=x.dtype)
    y[:] = b
    for ki in range(layer.kh):
        for kj in range(layer.kw):
            y += _tap_view(xp, ki, kj, oh, ow, layer.stride) @ w[ki, kj]
    return y, (xp, (n, h, wd))


def conv_backward(dy: np.ndarray, layer: Conv, w: np.ndarray, cache):
    xp, (n, h, wd) = cache
    oh, ow = dy.shape[1:3]
    dw = np.empty_like(w)
    db = dy.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    dy_mat = dy.reshape(-1, layer.cout)
    for ki in range(layer.kh):
        for kj in range(layer.kw):
            view = _tap_view(xp, ki, kj, oh, ow, layer.stride)
            dw[ki, kj] = view.reshape(-1, layer.cin).T @ dy_mat
            _tap_view(dxp, ki, kj, oh, ow, layer.stride)[...] += dy @ w[ki, kj].T
    pad = layer.pad
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dy: np.ndarray, cache):
    return np.where(cache > 0, dy, 0)


def _upaxis(x: np.ndarray, axis: int) -> np.ndarray:
    """x2 bilinear upsampling along one axis, half-pixel centers: out[2i] =
    0.25 x[i-1] + 0.75 x[i] and out[2i+1] = 0.75 x[i] + 0.25 x[i+1], edges
    replicated."""
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    out = np.empty((2 * n,) + x.shape[1:], dtype=x.dtype)
    even, odd = out[0::2], out[1::2]
    even[:] = 0.75 * x
    even[1:] += 0.25 * x[:-1]
    even[0] += 0.25 * x[0]
    odd[:] = 0.75 * x
    odd[:-1] += 0.25 * x[1:]
    odd[-1] += 0.25 * x[-1]
    return np.moveaxis(out, 0, axis)


def upsample2_forward(x: np.ndarray):
    return _upaxis(_upaxis(x, 1), 2), x.shape


def _downscatter(dy: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of the x2 bilinear upsampling along one axis.

    Forward taps: out[2i] = 0.25 x[i-1] + 0.75 x[i] (out[0] = x[0]) and
    out[2i+1] = 0.75 x[i] + 0.25 x[i+1] (out[2n-1] = x[n-1]).
    """
    dy = np.moveaxis(dy, axis, 0)
    n = dy.shape[0] // 2
    even, odd = dy[0::2], dy[1::2]
    dx = 0.75 * (even + odd)
    dx[:-1] += 0.25 * even[1:]
    dx[1:] += 0.25 * odd[:-1]
    dx[0] += 0.25 * even[0]
    dx[-1] += 0.25 * odd[-1]
    return np.moveaxis(dx, 0, axis)


def upsample2_backward(dy: np.ndarray, cache):
    return _downscatter(_downscatter(dy, 1), 2).astype(dy.dtype)


# ---------------------------------------------------------------------------
# network forward / backward


def forward_batch(params: NetworkParams, x: np.ndarray, caches: list | None = None):
    """Run the stack on an (N, H, W, C) batch; optionally record caches for
    the backward pass."""
    wi = 0
    for layer in params.arch:
        if isinstance(layer, Conv):
            w, b = params.weights[wi]
            x, cache = conv_forward(x, layer, w, b)
            wi += 1
        elif isinstance(layer, Relu):
            x, cache = relu_forward(x)
        else:
            x, cache = upsample2_forward(x)
        if caches is not None:
            caches.append(cache)
    return x


def forward(params: NetworkParams, image: np.ndarray) -> np.ndarray:
    """Logits (H, W, 3) for one (H, W, 3) image at full input resolution."""
    x = np.asarray(image, dtype=params.dtype)[None, ...]
    y = forward_batch(params, x)
    if y.shape[1:3] != image.shape[:2]:
        raise ConfigurationError(
            f"architecture produces {y.shape[1:3]} for input {image.shape[:2]}"
        )
    return y[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, y: np.ndarray, mw: np.ndarray) -> float:
    """Masked weighted mean negative log-softmax over all pixels and the 3
    affordance channels, normalized by 1/(3 H W)."""
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    h, w = logits.shape[:2]
    ls = log_softmax(np.asarray(logits, dtype=np.float64))
    total = -np.sum(y.astype(np.float64) * mw.astype(np.float64) * ls)
    return float(total / (3.0 * h * w))


def _loss_grad_logits(logits, y, mw):
    h, w = logits.shape[:2]
    p = softmax(np.asarray(logits, dtype=np.float64))
    ym = y.astype(np.float64) * mw.astype(np.float64)
    wsum = ym.sum(axis=-1, keepdims=True)
    return (p * wsum - ym) / (3.0 * h * w)


def backward(params: NetworkParams, image: np.ndarray, y: np.ndarray, mw: np.ndarray):
    """Loss and analytic gradients w.r.t. every parameter for one sample."""
    losses, grads = backward_batch(
        params,
        np.asarray(image, dtype=params.dtype)[None],
        np.asarray(y)[None],
        np.asarray(mw)[None],
    )
    return losses, grads


def backward_batch(params: NetworkParams, x: np.ndarray, y: np.ndarray, mw: np.ndarray):
    """Mean loss and mean parameter gradients over an (N, ...) batch."""
    caches: list = []
    logits = forward_batch(params, x, caches)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    n, h, w = logits.shape[:3]
    ls = log_softmax(logits.astype(np.float64))
    ym = y.astype(np.float64) * mw.astype(np.float64)
    mean_loss = float(-np.sum(ym * ls) / (3.0 * h * w * n))
    p = np.exp(ls)
    wsum = ym.sum(axis=-1, keepdims=True)
    dx = ((p * wsum - ym) / (3.0 * h * w * n)).astype(params.dtype)

    grads = [None] * len(params.weights)
    wi = len(params.weights)
    for layer, cache in zip(reversed(params.arch), reversed(caches)):
        if isinstance(layer, Conv):
            wi -= 1
            w, _ = params.weights[wi]
            dx, dw, db = conv_backward(dx, layer, w, cache)
            grads[wi] = (dw, db)
        elif isinstance(layer, Relu):
            dx = relu_backward(dx, cache)
        else:
            dx = upsample2_backward(dx, cache)
    return mean_loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 0.95
    decay_every: int = 1000
    batch_size: int = 8
    epochs: int = 4
    seed: int = 0
    augment: str = "full"  # full | stochastic | none
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0 and self.learning_rate != 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "decay_factor": self.decay_factor,
            "decay_every": self.decay_every,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "augment": self.augment,
            "dtype": self.dtype,
        }


def learning_rate_at(config: TrainConfig, step: int) -> float:
    return config.learning_rate * config.decay_factor ** (step / config.decay_every)


def _epoch_draws(training_set, config: TrainConfig, rng: np.random.Generator):
    n = len(training_set)
    if config.augment == "none":
        order = rng.permutation(n)
        return [(int(i), False, 0) for i in order]
    if config.augment == "stochastic":
        order = rng.permutation(n)
        flips = rng.integers(0, 2, n)
        degs = rng.integers(-5, 6, n)
        return [
            (int(i), bool(flips[k]), int(degs[k])) for k, i in enumerate(order)
        ]
    if config.augment == "full":
        nv = training_set.n_variants()
        order = rng.permutation(n * nv)
        out = []
        for flat in order:
            i, vi = divmod(int(flat), nv)
            flip, deg = training_set.variant(vi)
            out.append((i, flip, deg))
        return out
    raise ValueError(f"unknown augment mode {config.augment!r}")


def train(training_set, config: TrainConfig, params: NetworkParams | None = None,
          arch=None, log: list | None = None):
    """Plain SGD with exponential learning-rate decay, deterministic given
    the seed. Returns (params, log_records); log records are dicts with
    per-step {step, lr, loss} and per-epoch {epoch, mean_loss, pixel_accuracy}.
    """
    if len(training_set) == 0:
        raise ValueError("training set is empty")
    dtype = np.dtype(config.dtype)
    if params is None:
        params = init_params(arch or default_architecture(), seed=config.seed, dtype=dtype)
    else:
        params = params.astype(dtype)
    records = log if log is not None else []
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    step = 0
    for epoch in range(config.epochs):
        draws = _epoch_draws(training_set, config, rng)
        epoch_loss = 0.0
        epoch_batches = 0
        correct = 0
        labeled = 0
        for start in range(0, len(draws), config.batch_size):
            batch = draws[start : start + config.batch_size]
            xs, ys, ms = [], [], []
            for i, flip, deg in batch:
                x, y, mw = training_set.training_pair(i, flip, deg)
                xs.append(np.asarray(x, dtype=dtype))
                ys.append(y)
                ms.append(mw)
            x = np.stack(xs)
            y = np.stack(ys)
            mw = np.stack(ms)
            try:
                batch_loss, grads = backward_batch(params, x, y, mw)
            except NumericError:
                raise DivergenceError(step) from None
            if not math.isfinite(batch_loss):
                raise DivergenceError(step)
            lr = learning_rate_at(config, step)
            if lr != 0.0:
                for (w, b), (dw, db) in zip(params.weights, grads):
                    w -= (lr * dw).astype(dtype)
                    b -= (lr * db).astype(dtype)
            records.append({"type": "step", "step": step, "lr": lr, "loss": batch_loss})
            epoch_loss += batch_loss
            epoch_batches += 1
            step += 1
        # epoch accuracy over labeled pixels of a deterministic probe batch
        probe = draws[: min(len(draws), 16)]
        for i, flip, deg in probe:
            x, y, mw = training_set.training_pair(i, flip, deg)
            pred = forward(params, np.asarray(x, dtype=dtype)).argmax(axis=-1)
            lab = y.sum(axis=-1) > 0
            lab &= mw.max(axis=-1) > 0
            correct += int((pred[lab] == y.argmax(axis=-1)[lab]).sum())
            labeled += int(lab.sum())
        records.append(
            {
                "type": "epoch",
                "epoch": epoch,
                "mean_loss": epoch_loss / max(epoch_batches, 1),
                "pixel_accuracy": correct / labeled if labeled else None,
            }
        )
    return params, records


# ---------------------------------------------------------------------------
# parameter file format GFNET1


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_params(path, params: NetworkParams) -> None:
    """Magic, textual architecture descriptor, little-endian float32 weights
    in layer order, then a 64-bit FNV-1a checksum."""
    lines = [MAGIC.decode("ascii"), f"layers {len(params.arch)}"]
    lines += [layer.descriptor() for layer in params.arch]
    lines.append("end")
    blob = ("\n".join(lines) + "\n").encode("ascii")
    for w, b in params.weights:
        blob += w.astype("<f4").tobytes() + b.astype("<f4").tobytes()
    blob += _fnv1a64(blob).to_bytes(8, "little")
    with open(path, "wb") as f:
        f.write(blob)


def load_params(path) -> NetworkParams:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC + b"\n"):
        raise IncompatibleFileError("bad magic; not a GFNET1 file")
    if len(blob) < 16:
        raise IncompatibleFileError("truncated file")
    body, checksum = blob[:-8], int.from_bytes(blob[-8:], "little")
    if _fnv1a64(body) != checksum:
        raise IncompatibleFileError("checksum mismatch")
    text_end = body.index(b"\nend\n") + len(b"\nend\n")
    lines = body[:text_end].decode("ascii").splitlines()
    try:
        n_layers = int(lines[1].split()[1])
        arch = tuple(parse_layer(t) for t in lines[2 : 2 + n_layers])
    except (IndexError, ValueError) as e:
        raise IncompatibleFileError(f"bad architecture descriptor: {e}") from e
    verify_architecture(arch)
    raw = np.frombuffer(body[text_end:], dtype="<f4")
    weights = []
    offset = 0
    for layer in arch:
        if not isinstance(layer, Conv):
            continue
        wsize = layer.kh * layer.kw * layer.cin * layer.cout
        if offset + wsize + layer.cout > raw.size:
            raise IncompatibleFileError("weight payload too short")
        w = raw[offset : offset + wsize].reshape(layer.kh, layer.kw, layer.cin, layer.cout)
        offset += wsize
        b = raw[offset : offset + layer.cout]
        offset += layer.cout
        weights.append((w.copy(), b.copy()))
    if offset != raw.size:
        raise IncompatibleFileError("trailing bytes after weights")
    return NetworkParams(arch, weights)
