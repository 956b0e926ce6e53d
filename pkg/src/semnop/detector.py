"""CNN malware detector over gray-scale binary images, in plain numpy.

Architecture: adaptive average pooling to a fixed 64x64 grid (so images of
any height share one parameter set), two 3x3 conv + ReLU + 2x2 max-pool
stages, then three fully connected layers down to 2 logits
(index 0 = benign, 1 = malware). Backpropagation reaches all parameters
and the input pixels; the input gradient drives the CW attack and is
validated against finite differences in the test suite.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedShapeError
from .images import NormalizedImage

BENIGN, MALWARE = 0, 1
LABEL_NAMES = ("benign", "malware")

POOL_OUT = 64
MIN_SIDE = 8

_MAGIC = b"MVAE"
_VERSION = 1

# (name, shape) in serialization order
_PARAM_SPECS = (
    ("conv1_w", (8, 1, 3, 3)), ("conv1_b", (8,)),
    ("conv2_w", (16, 8, 3, 3)), ("conv2_b", (16,)),
    ("fc1_w", (256, 4096)), ("fc1_b", (256,)),
    ("fc2_w", (64, 256)), ("fc2_b", (64,)),
    ("fc3_w", (2, 64)), ("fc3_b", (2,)),
)


@dataclass
class CnnModel:
    params: dict  # name -> np.ndarray per _PARAM_SPECS
    pool_out: int = POOL_OUT
    dtype: type = np.float32

    def astype(self, dtype):
        return CnnModel({k: v.astype(dtype) for k, v in self.params.items()},
                        self.pool_out, dtype)


def init_model(seed: int = 0, dtype=np.float32) -> CnnModel:
    """Uniform fan-in initialization, deterministic under the seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _PARAM_SPECS:
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return CnnModel(params, POOL_OUT, dtype)


# --------------------------------------------------------------------------
# Layers

_pool_matrix_cache = {}


def _pool_matrix(in_size, out_size, dtype):
    """Averaging matrix for one axis of the adaptive average pool.

    Cell i spans floor(i*in/out) .. floor((i+1)*in/out); when the input is
    smaller than the grid that range can be empty, so the end is bumped to
    keep every cell at least one pixel wide.
    """
    key = (in_size, out_size, np.dtype(dtype).str)
    if key not in _pool_matrix_cache:
        mat = np.zeros((out_size, in_size), dtype=dtype)
        for i in range(out_size):
            start = i * in_size // out_size
            end = max((i + 1) * in_size // out_size, start + 1)
            mat[i, start:end] = 1.0 / (end - start)
        _pool_matrix_cache[key] = mat
    return _pool_matrix_cache[key]


def _adaptive_pool(x, out_size):
    ah = _pool_matrix(x.shape[0], out_size, x.dtype)
    aw = _pool_matrix(x.shape[1], out_size, x.dtype)
    return ah @ x @ aw.T


def _adaptive_pool_back(gy, in_shape):
    ah = _pool_matrix(in_shape[0], gy.shape[0], gy.dtype)
    aw = _pool_matrix(in_shape[1], gy.shape[1], gy.dtype)
    return ah.T @ gy @ aw


def _conv3x3(x, w, b):
    """Same-padding stride-1 3x3 convolution. x: (N,C,H,W), w: (O,C,3,3)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N,H,W,O)
    y = np.moveaxis(y, 3, 1)
    return y + b[None, :, None, None], win


def _conv3x3_back(gy, win, w, x_shape):
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O,C,3,3)
    gb = gy.sum(axis=(0, 2, 3))
    gyp = np.pad(gy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gwin = np.lib.stride_tricks.sliding_window_view(gyp, (3, 3), axis=(2, 3))
    w_rot = w[:, :, ::-1, ::-1]
    gx = np.tensordot(gwin, w_rot, axes=([1, 4, 5], [0, 2, 3]))
    return np.moveaxis(gx, 3, 1), gw, gb


def _maxpool2(x):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool2_back(gy, idx, x_shape):
    n, c, h, w = x_shape
    gxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
    np.put_along_axis(gxr, idx[..., None], gy[..., None], axis=-1)
    gxr = gxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return gxr.reshape(n, c, h, w)


def _core_forward(model, x4):
    """x4: pooled input (N,1,P,P). Returns (logits, cache)."""
    p = model.params
    cache = {"x4": x4}
    c1, cache["win1"] = _conv3x3(x4, p["conv1_w"], p["conv1_b"])
    r1 = np.maximum(c1, 0)
    m1, cache["idx1"] = _maxpool2(r1)
    c2, cache["win2"] = _conv3x3(m1, p["conv2_w"], p["conv2_b"])
    r2 = np.maximum(c2, 0)
    m2, cache["idx2"] = _maxpool2(r2)
    flat = m2.reshape(m2.shape[0], -1)
    h1 = np.maximum(flat @ p["fc1_w"].T + p["fc1_b"], 0)
    h2 = np.maximum(h1 @ p["fc2_w"].T + p["fc2_b"], 0)
    logits = h2 @ p["fc3_w"].T + p["fc3_b"]
    cache.update(c1=c1, r1=r1, m1=m1, c2=c2, r2=r2, m2=m2,
                 flat=flat, h1=h1, h2=h2)
    return logits, cache


def _core_backward(model, cache, glogits, want_params=True, want_input=True):
    """Backprop from dL/dlogits; returns (param grads or None, dL/dx4 or None)."""
    p = model.params
    grads = {} if want_params else None
    gh2 = glogits @ p["fc3_w"]
    gh2 *= cache["h2"] > 0
    gh1 = gh2 @ p["fc2_w"]
    gh1 *= cache["h1"] > 0
    gflat = gh1 @ p["fc1_w"]
    if want_params:
        grads["fc3_w"] = glogits.T @ cache["h2"]
        grads["fc3_b"] = glogits.sum(axis=0)
        grads["fc2_w"] = gh2.T @ cache["h1"]
        grads["fc2_b"] = gh2.sum(axis=0)
        grads["fc1_w"] = gh1.T @ cache["flat"]
        grads["fc1_b"] = gh1.sum(axis=0)
    gm2 = gflat.reshape(cache["m2"].shape)
    gr2 = _maxpool2_back(gm2, cache["idx2"], cache["r2"].shape)
    gc2 = gr2 * (cache["c2"] > 0)
    gm1, gw2, gb2 = _conv3x3_back(gc2, cache["win2"], p["conv2_w"],
                                  cache["m1"].shape)
    if want_params:
        grads["conv2_w"], grads["conv2_b"] = gw2, gb2
    gr1 = _maxpool2_back(gm1, cache["idx1"], cache["r1"].shape)
    gc1 = gr1 * (cache["c1"] > 0)
    gx4, gw1, gb1 = _conv3x3_back(gc1, cache["win1"], p["conv1_w"],
                                  cache["x4"].shape)
    if want_params:
        grads["conv1_w"], grads["conv1_b"] = gw1, gb1
    return grads, gx4 if want_input else None


def _check_shape(img):
    if img.height < MIN_SIDE or img.width < MIN_SIDE:
        raise UnsupportedShapeError(
            f"image {img.height}x{img.width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )


def _pool_image(model, img):
    x = img.values.astype(model.dtype, copy=False)
    return _adaptive_pool(x, model.pool_out)


def forward(model: CnnModel, img: NormalizedImage) -> np.ndarray:
    """Logits (2,) for one image of any size >= 8x8."""
    _check_shape(img)
    x4 = _pool_image(model, img)[None, None]
    logits, _ = _core_forward(model, x4)
    return logits[0]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: CnnModel, img: NormalizedImage) -> int:
    return int(np.argmax(forward(model, img)))


def value_and_grad(model: CnnModel, img: NormalizedImage, loss_grad):
    """One forward/backward pass; returns (logits, dL/dpixel).

    `loss_grad` maps logits (2,) to dL/dlogits (2,); the CW margin loss and
    cross-entropy variants live in the attack module.
    """
    _check_shape(img)
    x4 = _pool_image(model, img)[None, None]
    logits, cache = _core_forward(model, x4)
    glogits = np.asarray(loss_grad(logits[0]), dtype=model.dtype)[None]
    _, gx4 = _core_backward(model, cache, glogits, want_params=False)
    return logits[0], _adaptive_pool_back(gx4[0, 0], img.values.shape)


def grad_input(model: CnnModel, img: NormalizedImage, loss_grad) -> np.ndarray:
    """dL/dpixel for every input pixel, same shape as img.values."""
    return value_and_grad(model, img, loss_grad)[1]


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0


def _cross_entropy(logits, labels):
    probs = softmax(logits)
    n = logits.shape[0]
    loss = -np.log(probs[np.arange(n), labels] + 1e-12).mean()
    glogits = probs
    glogits[np.arange(n), labels] -= 1.0
    return loss, glogits / n


def train(model: CnnModel, train_data, cfg: TrainConfig, val_data=None):
    """SGD with momentum on cross-entropy over (NormalizedImage, label) pairs.

    Mutates the model in place; returns a list of per-epoch metric dicts.
    """
    train_data = list(train_data)
    if not train_data:
        raise ConfigError("training set is empty")
    labels_present = {label for _, label in train_data}
    if labels_present != {BENIGN, MALWARE}:
        raise ConfigError(f"need both classes in training data, got {labels_present}")
    for img, _ in train_data:
        _check_shape(img)

    pooled = np.stack([_pool_image(model, img) for img, _ in train_data])
    labels = np.array([label for _, label in train_data])
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    metrics = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_data))
        losses, correct = [], 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            x4 = pooled[sel][:, None]
            logits, cache = _core_forward(model, x4)
            loss, glogits = _cross_entropy(logits, labels[sel])
            if not np.isfinite(loss):
                raise ConfigError(f"non-finite training loss at epoch {epoch}")
            grads, _ = _core_backward(model, cache, glogits, want_input=False)
            for name, g in grads.items():
                velocity[name] = cfg.momentum * velocity[name] - cfg.learning_rate * g
                model.params[name] += velocity[name]
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == labels[sel]).sum())
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_acc": correct / len(train_data),
        }
        if val_data is not None:
            entry.update(evaluate(model, val_data))
        metrics.append(entry)
    return metrics


def evaluate(model: CnnModel, data) -> dict:
    """Accuracy plus per-class recall over (NormalizedImage, label) pairs."""
    hits = {BENIGN: [0, 0], MALWARE: [0, 0]}
    for img, label in data:
        hits[label][1] += 1
        if predict(model, img) == label:
            hits[label][0] += 1
    total = sum(n for _, n in hits.values())
    good = sum(k for k, _ in hits.values())
    out = {"val_acc": good / total if total else 0.0}
    for label, (k, n) in hits.items():
        out[f"recall_{LABEL_NAMES[label]}"] = k / n if n else 0.0
    return out


# --------------------------------------------------------------------------
# Model container I/O


def save_model(model: CnnModel, path) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<B", _VERSION))
    buf.write(struct.pack("<I", model.pool_out))
    for name, shape in _PARAM_SPECS:
        arr = model.params[name]
        if arr.shape != shape:
            raise FormatError(f"parameter {name} has shape {arr.shape}, want {shape}")
        buf.write(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> CnnModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = io.BytesIO(blob)
    if view.read(4) != _MAGIC:
        raise FormatError(f"{path}: bad magic, not a model container")
    version = view.read(1)
    if len(version) != 1 or version[0] != _VERSION:
        got = version[0] if version else "none"
        raise FormatError(f"{path}: container version {got}, expected {_VERSION}")
    pool_raw = view.read(4)
    if len(pool_raw) != 4:
        raise FormatError(f"{path}: truncated header")
    pool_out = struct.unpack("<I", pool_raw)[0]
    params = {}
    for name, shape in _PARAM_SPECS:
        count = int(np.prod(shape))
        raw = view.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError(f"{path}: truncated at parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if view.read(1):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return CnnModel(params, pool_out, np.float32)
