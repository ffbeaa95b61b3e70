"""Small classifier architectures, their trainer, and the checkpoint format.

Three deliberately different architectures so every experiment has one
surrogate and at least two victims. Training is plain SGD with momentum,
fully deterministic given its arguments.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as ts
from .sampling import derive_rng

ARCHITECTURES = ("mlp-2x256", "cnn-a", "cnn-b")
_ARCH_IDS = {"mlp-2x256": 1, "cnn-a": 2, "cnn-b": 3}
_IDS_ARCH = {v: k for k, v in _ARCH_IDS.items()}

_MAGIC = b"LIBC"
_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not match the LIBC format."""


class TrainingError(RuntimeError):
    """Training aborted on a numeric failure."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple = (1, 28, 28)
    classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if len(self.input_shape) != 3 or any(int(d) < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, H, W) positive, got {self.input_shape}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))


def _param_shapes(spec):
    """Parameter names and shapes; a pure function of the spec."""
    C, H, W = spec.input_shape
    n = spec.classes
    if spec.arch == "mlp-2x256":
        d = C * H * W
        return [
            ("fc1.w", (d, 256)), ("fc1.b", (256,)),
            ("fc2.w", (256, 256)), ("fc2.b", (256,)),
            ("fc3.w", (256, n)), ("fc3.b", (n,)),
        ]
    if spec.arch == "cnn-a":
        h2, w2 = H // 2, W // 2
        h4, w4 = h2 // 2, w2 // 2
        return [
            ("conv1.w", (16, C, 3, 3)), ("conv1.b", (16,)),
            ("conv2.w", (32, 16, 3, 3)), ("conv2.b", (32,)),
            ("fc.w", (32 * h4 * w4, n)), ("fc.b", (n,)),
        ]
    h2, w2 = H // 2, W // 2
    h4, w4 = h2 // 2, w2 // 2
    h8, w8 = h4 // 2, w4 // 2
    return [
        ("conv1.w", (8, C, 3, 3)), ("conv1.b", (8,)),
        ("conv2.w", (16, 8, 3, 3)), ("conv2.b", (16,)),
        ("conv3.w", (32, 16, 3, 3)), ("conv3.b", (32,)),
        ("fc.w", (32 * h8 * w8, n)), ("fc.b", (n,)),
    ]


class Classifier:
    """A parameterized classifier: spec plus named parameter tensors."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params  # ordered dict name -> Tensor

    @property
    def classes(self):
        return self.spec.classes

    @property
    def input_shape(self):
        return self.spec.input_shape

    def parameter_count(self):
        return sum(t.data.size for t in self.params.values())

    def set_trainable(self, flag):
        for t in self.params.values():
            t.requires_grad = bool(flag)

    def forward(self, x):
        """Logits for a (B,C,H,W) batch; records a tape when grads are needed."""
        x = x if isinstance(x, ts.Tensor) else ts.Tensor(x)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ts.ShapeMismatchError(
                f"forward: batch shape {tuple(x.shape)} does not match "
                f"(B, {', '.join(map(str, self.spec.input_shape))})"
            )
        p = self.params
        if self.spec.arch == "mlp-2x256":
            h = ts.relu(ts.add_bias(ts.matmul(ts.flatten(x), p["fc1.w"]), p["fc1.b"]))
            h = ts.relu(ts.add_bias(ts.matmul(h, p["fc2.w"]), p["fc2.b"]))
            return ts.add_bias(ts.matmul(h, p["fc3.w"]), p["fc3.b"])
        if self.spec.arch == "cnn-a":
            h = ts.maxpool2x2(ts.relu(ts.add_bias(ts.conv2d(x, p["conv1.w"], 1, 1), p["conv1.b"])))
            h = ts.maxpool2x2(ts.relu(ts.add_bias(ts.conv2d(h, p["conv2.w"], 1, 1), p["conv2.b"])))
            return ts.add_bias(ts.matmul(ts.flatten(h), p["fc.w"]), p["fc.b"])
        h = ts.maxpool2x2(ts.relu(ts.add_bias(ts.conv2d(x, p["conv1.w"], 1, 1), p["conv1.b"])))
        h = ts.maxpool2x2(ts.relu(ts.add_bias(ts.conv2d(h, p["conv2.w"], 1, 1), p["conv2.b"])))
        h = ts.maxpool2x2(ts.relu(ts.add_bias(ts.conv2d(h, p["conv3.w"], 1, 1), p["conv3.b"])))
        return ts.add_bias(ts.matmul(ts.flatten(h), p["fc.w"]), p["fc.b"])


def build(spec, seed, dtype=np.float32):
    """Fresh classifier with seeded uniform fan-in initialization."""
    rng = derive_rng(_ARCH_IDS[spec.arch], *spec.input_shape, spec.classes, seed)
    params = {}
    for name, shape in _param_shapes(spec):
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)  # keeps relu stacks from dying at init
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = ts.Tensor(arr)
    return Classifier(spec, params)


def logits(model, batch):
    return model.forward(batch)


def predict(model, image):
    """Class index for one (C,H,W) image; ties break toward the lowest index."""
    image = np.asarray(image)
    if image.shape != model.spec.input_shape:
        raise ts.ShapeMismatchError(
            f"predict: image shape {tuple(image.shape)} != {model.spec.input_shape}"
        )
    out = model.forward(image[None]).data
    return int(np.argmax(out[0]))


def predict_batch(model, images):
    """Class indices for a (B,C,H,W) batch, chunked to bound memory."""
    images = np.asarray(images)
    preds = np.empty(images.shape[0], dtype=np.int64)
    for lo in range(0, images.shape[0], 256):
        out = model.forward(images[lo : lo + 256]).data
        preds[lo : lo + 256] = np.argmax(out, axis=1)
    return preds


def accuracy(model, dataset):
    preds = predict_batch(model, dataset.images)
    return float(np.mean(preds == dataset.labels))


def train(model, dataset, epochs, lr, momentum, batch, seed, test_set=None):
    """SGD-with-momentum training; returns (model, per-epoch accuracy trace)."""
    if len(dataset) == 0:
        raise ValueError("train: dataset is empty")
    if lr < 0:
        raise ValueError(f"train: lr must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"train: momentum must be in [0, 1), got {momentum}")
    model.set_trainable(True)
    velocity = {name: np.zeros_like(t.data) for name, t in model.params.items()}
    trace = []
    try:
        for epoch in range(epochs):
            order = derive_rng(seed, "shuffle", epoch).permutation(len(dataset))
            for start in range(0, len(order), batch):
                idx = order[start : start + batch]
                xb = ts.Tensor(dataset.images[idx])
                loss = ts.cross_entropy_loss(model.forward(xb), dataset.labels[idx])
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss {float(loss.data)} at epoch {epoch}, step {start // batch}"
                    )
                ts.backward(loss)
                for name, t in model.params.items():
                    v = velocity[name]
                    v *= momentum
                    v += t.grad
                    t.data -= lr * v
                    t.grad = None
            trace.append(
                {
                    "epoch": epoch,
                    "train_acc": accuracy(model, dataset),
                    "test_acc": accuracy(model, test_set) if test_set is not None else None,
                }
            )
    except ts.NonFiniteError as exc:
        raise TrainingError(f"numeric failure during training: {exc}") from exc
    finally:
        model.set_trainable(False)
    return model, trace


# ---------------------------------------------------------------------------
# checkpoint format (LIBC)


@dataclass
class Checkpoint:
    version: int
    spec: ModelSpec
    arrays: dict
    metadata: dict = field(default_factory=dict)


def save(model, path):
    """Writes the LIBC checkpoint; bit-exact round trip with load()."""
    C, H, W = model.spec.input_shape
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HB", _VERSION, _ARCH_IDS[model.spec.arch])
    out += struct.pack("<4I", C, H, W, model.spec.classes)
    out += struct.pack("<H", len(model.params))
    for name, t in model.params.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 2 + 1 + 16 + 2 + 4:
        raise CheckpointFormatError(f"truncated checkpoint: {len(blob)} bytes")
    if blob[:4] != _MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointFormatError("CRC mismatch: checkpoint corrupted")
    r = _Reader(blob[:-4])
    r.take(4, "magic")
    version, arch_id = r.unpack("<HB", "header")
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported version {version}, expected {_VERSION}")
    if arch_id not in _IDS_ARCH:
        raise CheckpointFormatError(f"unknown architecture id {arch_id}")
    C, H, W, classes = r.unpack("<4I", "shape header")
    (count,) = r.unpack("<H", "array count")
    spec = ModelSpec(_IDS_ARCH[arch_id], (C, H, W), classes)
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "array name length")
        name = r.take(name_len, "array name").decode("utf-8")
        (rank,) = r.unpack("<B", "array rank")
        dims = r.unpack(f"<{rank}I", "array dims")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"array {name!r} payload")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.blob):
        raise CheckpointFormatError("shape table inconsistent with payload length")
    expected = _param_shapes(spec)
    got = [(k, tuple(v.shape)) for k, v in arrays.items()]
    if got != [(k, tuple(s)) for k, s in expected]:
        raise CheckpointFormatError(f"parameter table {got} does not match spec {expected}")
    return Checkpoint(version, spec, arrays)


def load(path):
    ckpt = load_checkpoint(path)
    params = {name: ts.Tensor(arr) for name, arr in ckpt.arrays.items()}
    return Classifier(ckpt.spec, params)
