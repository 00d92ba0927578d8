"""Small BN classifiers, supervised training, and the binary checkpoint format."""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .optim import SGD
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

BN_MODES = ("train", "eval", "batch", "mixed", "collect")


class Layer:
    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, padding: int = 1, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)
        self.padding = padding

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear(Layer):
    def __init__(self, in_f: int, out_f: int, gain: float = 2.0, rng=None):
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, math.sqrt(gain / in_f), size=(in_f, out_f))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f, np.float32), requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return x @ self.weight + self.bias


class ReLU(Layer):
    def __call__(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, k: int = 2):
        self.k = k

    def __call__(self, x):
        return T.max_pool2d(x, self.k)


class AvgPool2d(Layer):
    def __init__(self, k: int = 2):
        self.k = k

    def __call__(self, x):
        return T.avg_pool2d(x, self.k)


class Flatten(Layer):
    def __call__(self, x):
        return T.flatten(x)


class BatchNorm(Layer):
    """Per-channel normalization over every axis except axis 1.

    Variances (batch, running and mixed) are population variances.
    """

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.eps = eps
        self.momentum = momentum

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))

    def _normalize_const(self, x, mu, var):
        return T.batch_norm(x, self.gamma, self.beta, np.asarray(mu, x.dtype), np.asarray(var, x.dtype),
                            self.eps)[0]

    def batch_stats(self, x: Tensor):
        axes = self._axes(x)
        d = x.data.astype(np.float64)
        return d.mean(axis=axes), d.var(axis=axes)

    def __call__(self, x: Tensor, mode: str = "eval", stats=None, prior: Optional[float] = None):
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"batchnorm: expected {self.channels} channels, got input {x.shape}")
        if mode in ("train", "batch"):
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, eps=self.eps)
            if mode == "train":
                m = self.momentum
                self.running_mean[:] = (1 - m) * self.running_mean + m * mu
                self.running_var[:] = (1 - m) * self.running_var + m * var
            return out, None
        if mode == "eval":
            return self._normalize_const(x, self.running_mean, self.running_var), None
        if mode == "mixed":
            mu, var = stats
            if np.shape(mu) != (self.channels,) or np.shape(var) != (self.channels,):
                raise T.ShapeError(
                    f"mixed BN statistics have shape {np.shape(mu)}/{np.shape(var)}, "
                    f"layer has {self.channels} channels")
            return self._normalize_const(x, mu, var), None
        if mode == "collect":
            mu_t, var_t = self.batch_stats(x)
            mu, var = mix_statistics(self.running_mean, mu_t, prior), mix_statistics(self.running_var, var_t, prior)
            return self._normalize_const(x, mu, var), (mu, var)
        raise ValueError(f"unknown bn mode {mode!r}")


def mix_statistics(train, test, prior: float):
    """``N/(N+1) * train + 1/(N+1) * test``; ``N = inf`` gives ``train`` exactly."""
    train = np.asarray(train, np.float64)
    test = np.asarray(test, np.float64)
    if math.isinf(prior):
        return train.copy()
    n = float(prior)
    return n / (n + 1.0) * train + 1.0 / (n + 1.0) * test


class Model:
    """Sequential classifier producing logits of shape ``(batch, num_classes)``."""

    def __init__(self, arch: dict, layers: list[Layer]):
        self.arch = dict(arch)
        self.layers = layers
        self.num_classes = int(arch["num_classes"])
        self.input_shape = tuple(arch["input_shape"])

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in zip(("weight", "bias") if not isinstance(layer, BatchNorm) else ("gamma", "beta"),
                               layer.parameters()):
                out.append((f"{i}.{type(layer).__name__}.{name}", p))
        return out

    def norm_parameters(self) -> list[Tensor]:
        return [p for layer in self.bn_layers() for p in layer.parameters()]

    def bn_layers(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.clone()
        for p in m.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for bn in m.bn_layers():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return m

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def forward(self, x, bn_mode: str = "eval", bn_stats=None, prior_strength: Optional[float] = None,
                collect: Optional[list] = None) -> Tensor:
        """Run the network.

        ``bn_mode``: ``train`` (batch stats, updates running stats), ``eval``
        (running stats), ``batch`` (batch stats, no update), ``mixed`` (the
        per-layer ``(mean, var)`` pairs in ``bn_stats``), or ``collect``
        (mix this batch's stats into the running ones with ``prior_strength``,
        appending the mixed pairs to ``collect``).
        """
        if bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn mode {bn_mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, self.dtype))
        if x.ndim == len(self.input_shape):
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(f"input shape {x.shape} does not match model input {self.input_shape}")
        if bn_mode == "mixed":
            if bn_stats is None or len(bn_stats) != len(self.bn_layers()):
                raise T.ShapeError(
                    f"mixed mode needs {len(self.bn_layers())} BN stat pairs, got "
                    f"{None if bn_stats is None else len(bn_stats)}")
        if bn_mode == "collect" and prior_strength is None:
            raise ValueError("collect mode needs prior_strength")
        k = 0
        h = x
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                stats = bn_stats[k] if bn_mode == "mixed" else None
                h, used = layer(h, bn_mode, stats, prior_strength)
                if collect is not None and used is not None:
                    collect.append(used)
                k += 1
            else:
                h = layer(h)
        return h

    __call__ = forward

    def predict_proba(self, x, **kw) -> np.ndarray:
        with no_grad():
            return T.softmax(self.forward(x, **kw)).data


def model_forward(model: Model, batch, bn_mode: str = "eval", bn_stats=None) -> Tensor:
    return model.forward(batch, bn_mode=bn_mode, bn_stats=bn_stats)


# ---------------------------------------------------------------------------
# architectures

def build_model(arch: dict, seed: int = 0) -> Model:
    """Instantiate ``convsmall`` or ``mlp_bn`` from an architecture descriptor."""
    rng = np.random.default_rng(seed)
    kind = arch["arch"]
    c, h, w = arch["input_shape"]
    n_cls = int(arch["num_classes"])
    layers: list[Layer] = []
    if kind == "convsmall":
        widths = arch.get("widths", [8, 16, 32])
        pool = {"max": MaxPool2d, "avg": AvgPool2d}[arch.get("pool", "avg")]
        kernels = arch.get("kernels", [3] * len(widths))
        prev = c
        for width, k in zip(widths, kernels):
            layers += [Conv2d(prev, width, k, k // 2, rng), BatchNorm(width), ReLU(), pool(2)]
            prev = width
            h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ValueError(f"input {arch['input_shape']} too small for {len(widths)} pooling stages")
        layers += [Flatten(), Linear(prev * h * w, n_cls, gain=1.0, rng=rng)]
    elif kind == "mlp_bn":
        hidden = arch.get("hidden", [64, 64])
        prev = c * h * w
        layers.append(Flatten())
        for width in hidden:
            layers += [Linear(prev, width, rng=rng), BatchNorm(width), ReLU()]
            prev = width
        layers.append(Linear(prev, n_cls, gain=1.0, rng=rng))
    else:
        raise ValueError(f"unknown architecture {kind!r}")
    return Model(arch, layers)


def convsmall(input_shape=(1, 32, 32), num_classes: int = 4, widths=(8, 16, 32), pool: str = "avg",
              seed: int = 0) -> Model:
    return build_model({"arch": "convsmall", "input_shape": list(input_shape), "num_classes": num_classes,
                        "widths": list(widths), "pool": pool}, seed)


def mlp_bn(input_shape=(1, 16, 16), num_classes: int = 4, hidden=(64, 64), seed: int = 0) -> Model:
    return build_model({"arch": "mlp_bn", "input_shape": list(input_shape),
                        "num_classes": num_classes, "hidden": list(hidden)}, seed)


# ---------------------------------------------------------------------------
# training

class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(T.log_softmax(logits) * Tensor(onehot)).sum() / len(labels)


def evaluate_clean(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256):
    """Eval-mode (loss, accuracy) without building a graph."""
    total_loss, correct = 0.0, 0
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model.forward(images[i:i + batch_size].astype(model.dtype))
            yb = labels[i:i + batch_size]
            total_loss += cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    n = max(len(images), 1)
    return total_loss / n, correct / n


TRAIN_AUGMENTS = ("none", "crop_flip", "augmix")


def lr_schedule(step: int, total: int, warmup: int) -> float:
    """Linear warmup then cosine decay, as a multiplier on the base rate."""
    if step < warmup:
        return (step + 1) / warmup
    t = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1 + math.cos(math.pi * t))


def train_supervised(model: Model, dataset, epochs: int, lr: float, seed: int,
                     batch_size: int = 64, momentum: float = 0.9, weight_decay: float = 5e-4,
                     augment: str = "crop_flip", heldout=None):
    """Train ``model`` in place with momentum SGD and cross entropy.

    ``augment`` is ``"none"``, ``"crop_flip"`` or ``"augmix"`` (crop/flip, then
    an AugMix-lite mix on each image).  Returns ``(model, history)``; ``history``
    holds one dict per epoch plus an ``epoch=0`` row describing the initialization.
    """
    from .augment import AugmentationPolicy, augmix_lite, crop_flip_batch

    if augment not in TRAIN_AUGMENTS:
        raise ValueError(f"unknown training augmentation {augment!r}; expected one of {TRAIN_AUGMENTS}")
    policy = AugmentationPolicy()

    rng = np.random.default_rng(seed)
    images = np.asarray(dataset.images, np.float32)
    labels = np.asarray(dataset.labels, np.int64)
    opt = SGD(model.parameters(), lr, momentum=momentum, weight_decay=weight_decay)
    history = []

    def record(epoch, train_loss, train_acc):
        row = {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc}
        if heldout is not None:
            row["heldout_loss"], row["heldout_acc"] = evaluate_clean(model, heldout.images, heldout.labels)
        history.append(row)

    init_loss, init_acc = evaluate_clean(model, images, labels)
    record(0, init_loss, init_acc)
    steps_per_epoch = max(1, math.ceil(len(images) / batch_size))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(images))
        tot, correct = 0.0, 0
        for b in range(steps_per_epoch):
            opt.lr = lr * lr_schedule((epoch - 1) * steps_per_epoch + b, epochs * steps_per_epoch,
                                      min(steps_per_epoch, epochs * steps_per_epoch // 4))
            idx = order[b * batch_size:(b + 1) * batch_size]
            if len(idx) < 2:
                continue
            xb = images[idx]
            if augment != "none":
                xb = crop_flip_batch(xb, rng)
            if augment == "augmix":
                xb = np.stack([augmix_lite(img, rng, policy) for img in xb])
            yb = labels[idx]
            opt.zero_grad()
            logits = model.forward(Tensor(xb), bn_mode="train")
            loss = cross_entropy(logits, yb)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(epoch, b, loss.item())
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        record(epoch, tot / len(images), correct / len(images))
        logger.info("epoch %d: %s", epoch, history[-1])
    return model, history


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MEMOCKPT"
FORMAT_VERSION = 2


class CheckpointError(ValueError):
    pass


class UnrecognizedCheckpoint(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


def _payload_arrays(model: Model) -> list[np.ndarray]:
    arrays = []
    for layer in model.layers:
        arrays += [p.data for p in layer.parameters()]
        arrays += layer.buffers()
    return arrays


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> None:
    """Write ``MAGIC | u32 version | u32 len | descriptor JSON | f32 LE payload``."""
    header = json.dumps({"arch": model.arch, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _payload_arrays(model))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_checkpoint_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise UnrecognizedCheckpoint(f"unrecognized checkpoint: {path} does not start with {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise TruncatedCheckpoint(f"truncated checkpoint {path}: header incomplete")
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}; this reader supports {FORMAT_VERSION} only")
    (hlen,) = struct.unpack_from("<I", raw, pos + 4)
    pos += 8
    if len(raw) < pos + hlen:
        raise TruncatedCheckpoint(f"truncated checkpoint {path}: descriptor cut short")
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    return header, raw[pos + hlen:]


def load_checkpoint(path, expected_arch: Optional[dict] = None):
    """Return ``(model, meta)``."""
    header, payload = _read(path)
    arch = header["arch"]
    if expected_arch is not None and dict(expected_arch) != arch:
        raise ArchitectureMismatch(f"checkpoint architecture {arch} does not match expected {dict(expected_arch)}")
    model = build_model(arch)
    arrays = _payload_arrays(model)
    need = sum(a.size for a in arrays) * 4
    if len(payload) < need:
        raise TruncatedCheckpoint(f"truncated checkpoint {path}: payload {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise ArchitectureMismatch(
            f"checkpoint {path} payload has {len(payload) - need} extra bytes for architecture {arch}")
    flat = np.frombuffer(payload, dtype="<f4")
    off = 0
    for a in arrays:
        a[...] = flat[off:off + a.size].reshape(a.shape)
        off += a.size
    return model, header.get("meta", {})
