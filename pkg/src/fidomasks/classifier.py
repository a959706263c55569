"""A small differentiable CNN classifier with training and persistence.

Two conv/relu/avg-pool stages followed by a dense head and softmax.  The
forward pass runs through the tape engine, so the class probabilities are
differentiable with respect to the *input image* -- which is what the mask
optimizer needs.  Sized so that a full mask optimization stays in the
seconds range on one CPU core.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from fidomasks import tensor as T
from fidomasks.optim import Adam
from fidomasks.tensor import Tape, Tensor, load_tensor_blob, save_tensor

_WEIGHT_MAGIC = b"FMWT"
_WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct("<4sHH")


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_epsilon: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        # zero lr is allowed so a no-op update is testable
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class ClassifierModel:
    """Conv(3x3)+ReLU+AvgPool(2) twice, then a dense softmax head."""

    def __init__(self, input_shape, classes: int, conv_channels=(8, 16), precision: str = "single"):
        c, h, w = input_shape
        if classes < 2:
            raise ValueError(f"need at least 2 classes, got {classes}")
        if h % 4 or w % 4 or h < 8 or w < 8:
            raise ValueError(f"spatial dims must be multiples of 4 and >= 8, got {h}x{w}")
        self.input_shape = (int(c), int(h), int(w))
        self.classes = int(classes)
        self.conv_channels = tuple(int(x) for x in conv_channels)
        self.precision = precision
        self.params: list[Tensor] = []
        c1, c2 = self.conv_channels
        feat = c2 * (h // 4) * (w // 4)
        self._shapes = [
            (c1, c, 3, 3),
            (c1,),
            (c2, c1, 3, 3),
            (c2,),
            (feat, classes),
            (classes,),
        ]

    @classmethod
    def build(cls, input_shape, classes: int, seed: int = 0, conv_channels=(8, 16), precision: str = "single"):
        """Deterministically initialized model (He-scaled normal weights, zero biases)."""
        model = cls(input_shape, classes, conv_channels, precision)
        rng = np.random.Generator(np.random.Philox(seed))
        for shape in model._shapes:
            if len(shape) == 1:
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            model.params.append(Tensor(data, precision=precision, requires_grad=True))
        return model

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def cast(self, precision: str) -> "ClassifierModel":
        """Copy of the model with parameters converted to another precision."""
        if precision == self.precision:
            return self
        out = ClassifierModel(self.input_shape, self.classes, self.conv_channels, precision)
        out.params = [p.astype(precision) for p in self.params]
        for p in out.params:
            p.requires_grad = True
        return out

    def forward_logits(self, x: Tensor) -> Tensor:
        """Raw class scores for a (N, C, H, W) input batch."""
        w1, b1, w2, b2, wd, bd = self.params
        h = T.avg_pool2d(T.relu(T.conv2d(x, w1, b1, padding=1)), 2)
        h = T.avg_pool2d(T.relu(T.conv2d(h, w2, b2, padding=1)), 2)
        n = h.shape[0]
        flat = T.reshape(h, (n, h.shape[1] * h.shape[2] * h.shape[3]))
        return T.linear(flat, wd, bd)

    def forward_log_probs(self, x: Tensor) -> Tensor:
        return T.log_softmax(self.forward_logits(x))

    def _as_batch(self, x) -> tuple[Tensor, bool]:
        if isinstance(x, Tensor):
            data = x.data
        else:
            data = np.asarray(x)
        single = data.ndim == 3
        if single:
            data = data[None]
        if data.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {data.shape[1:]} does not match model input {self.input_shape}")
        return Tensor(data, precision=self.precision), single

    def predict_proba(self, x) -> np.ndarray:
        """Class probabilities; accepts one (C, H, W) image or an (N, C, H, W) batch."""
        t, single = self._as_batch(x)
        log_p = self.forward_log_probs(t).data
        probs = np.exp(log_p.astype(np.float64))
        probs /= probs.sum(axis=1, keepdims=True)
        return probs[0] if single else probs

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
        hits = 0
        for start in range(0, len(images), batch_size):
            probs = self.predict_proba(images[start : start + batch_size])
            hits += int(np.sum(np.argmax(probs, axis=1) == labels[start : start + batch_size]))
        return hits / len(images)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = json.dumps(
            {
                "input_shape": list(self.input_shape),
                "classes": self.classes,
                "conv_channels": list(self.conv_channels),
                "precision": self.precision,
            }
        ).encode()
        buf = io.BytesIO()
        buf.write(_WEIGHT_HEADER.pack(_WEIGHT_MAGIC, _WEIGHT_VERSION, len(self.params)))
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        for p in self.params:
            save_tensor(buf, p)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        with open(path, "rb") as fh:
            header = fh.read(_WEIGHT_HEADER.size)
            if len(header) != _WEIGHT_HEADER.size:
                raise ValueError("truncated weight file: missing header")
            magic, version, count = _WEIGHT_HEADER.unpack(header)
            if magic != _WEIGHT_MAGIC:
                raise ValueError(f"not a weight file: bad magic {magic!r}")
            if version != _WEIGHT_VERSION:
                raise ValueError(f"unsupported weight file version {version}")
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise ValueError("truncated weight file: missing metadata length")
            (meta_len,) = struct.unpack("<I", raw_len)
            meta_raw = fh.read(meta_len)
            if len(meta_raw) != meta_len:
                raise ValueError("truncated weight file: missing metadata")
            meta = json.loads(meta_raw.decode())
            model = cls(
                tuple(meta["input_shape"]),
                meta["classes"],
                tuple(meta["conv_channels"]),
                meta["precision"],
            )
            params = []
            for i in range(count):
                try:
                    t = load_tensor_blob(fh)
                except ValueError as exc:
                    raise ValueError(f"truncated weight file at tensor {i}: {exc}") from exc
                t.requires_grad = True
                params.append(t)
            if [p.shape for p in params] != model._shapes:
                raise ValueError("weight file tensors do not match the declared architecture")
            if fh.read(1):
                raise ValueError("trailing bytes after weight payload")
            model.params = params
            return model


def train(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Cross-entropy training with Adam; deterministic given cfg.seed.

    Returns the per-epoch mean training loss.  The loss over the epochs is
    required to decrease from first to last on the training data.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= model.classes:
        raise ValueError(f"label out of range for {model.classes} classes")
    onehot_all = np.eye(model.classes)[labels]
    opt = Adam(model.params, lr=cfg.learning_rate, eps=cfg.adam_epsilon)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = Tensor(images[idx], precision=model.precision)
            y = Tensor(onehot_all[idx], precision=model.precision)
            with Tape() as tape:
                log_p = model.forward_log_probs(x)
                loss = T.neg(T.div(T.sum_(T.mul(log_p, y)), float(len(idx))))
            grads = tape.backward(loss)
            opt.step(grads)
            epoch_loss += loss.item() * len(idx)
        losses.append(epoch_loss / len(images))
    if cfg.epochs > 1 and cfg.learning_rate > 0 and not losses[-1] < losses[0]:
        raise RuntimeError(f"training loss did not decrease: {losses[0]:.4f} -> {losses[-1]:.4f}")
    return losses
