"""Built-in differentiable classifier and the pluggable backend contract.

The reference model is deliberately small: K 3x3 convolution kernels,
ReLU, global average pooling and a linear layer.  It is enough to give
real convolutional feature maps (required by the activation-heatmap
path) while training in seconds on a CPU with nothing but numpy.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .errors import BackendFailure, EmptyTrainingSet, ShapeMismatch
from .model import ModelRecord, TrainingSet

ARTIFACT_MAGIC = b"HYDM"
ARTIFACT_VERSION = 1
DEFAULT_KERNELS = 8


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class InferenceResult:
    """Raw outputs of one forward pass."""

    logits: np.ndarray        # (n_labels,)
    feature_maps: np.ndarray  # (K, h', w'), post-ReLU activations


class ClassifierBackend(ABC):
    """Contract a model runtime must satisfy to serve a plot type."""

    @classmethod
    @abstractmethod
    def load(cls, artifact_path: str | Path) -> "ClassifierBackend": ...

    @abstractmethod
    def infer(self, payload: np.ndarray) -> InferenceResult: ...

    @abstractmethod
    def class_gradients(self, result: InferenceResult, class_index: int) -> np.ndarray:
        """d(class score)/d(feature maps); same shape as result.feature_maps."""


def _windows(x: np.ndarray) -> np.ndarray:
    """All 3x3 patches of (h, w, c) as (h-2, w-2, c, 3, 3)."""
    return np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(0, 1))


class ReferenceClassifier(ClassifierBackend):
    """Conv(K,3x3) -> ReLU -> global average pool -> linear -> softmax."""

    def __init__(self, kernels: np.ndarray, conv_bias: np.ndarray,
                 linear_w: np.ndarray, linear_b: np.ndarray,
                 plot_type_id: int, label_order: tuple[int, ...]):
        self.kernels = np.asarray(kernels, dtype=np.float64)       # (K, 3, 3, C)
        self.conv_bias = np.asarray(conv_bias, dtype=np.float64)   # (K,)
        self.linear_w = np.asarray(linear_w, dtype=np.float64)     # (L, K)
        self.linear_b = np.asarray(linear_b, dtype=np.float64)     # (L,)
        self.plot_type_id = plot_type_id
        self.label_order = tuple(label_order)
        if self.kernels.shape[1:3] != (3, 3):
            raise BackendFailure("kernels must be 3x3")
        if self.linear_w.shape != (len(self.label_order), self.kernels.shape[0]):
            raise BackendFailure("linear layer shape mismatch")

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def channels(self) -> int:
        return self.kernels.shape[3]

    @classmethod
    def seeded(cls, plot_type_id: int, label_order, channels: int,
               n_kernels: int = DEFAULT_KERNELS, seed: int = 0) -> "ReferenceClassifier":
        """Deterministic small-Gaussian initialization."""
        rng = np.random.default_rng(seed)
        n_labels = len(label_order)
        return cls(rng.normal(0.0, 0.1, (n_kernels, 3, 3, channels)),
                   np.zeros(n_kernels),
                   rng.normal(0.0, 0.1, (n_labels, n_kernels)),
                   np.zeros(n_labels),
                   plot_type_id, tuple(label_order))

    # -- inference ---------------------------------------------------

    def infer(self, payload: np.ndarray) -> InferenceResult:
        x = np.asarray(payload, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[0] < 3 or x.shape[1] < 3:
            raise ShapeMismatch(f"payload shape {x.shape} too small for 3x3 kernels")
        if x.shape[2] != self.channels:
            raise ShapeMismatch(
                f"payload has {x.shape[2]} channels, model expects {self.channels}")
        z = np.einsum("ijcuv,kuvc->kij", _windows(x), self.kernels,
                      optimize=True) + self.conv_bias[:, None, None]
        maps = np.maximum(z, 0.0)
        pooled = maps.mean(axis=(1, 2))
        logits = self.linear_w @ pooled + self.linear_b
        return InferenceResult(logits=logits, feature_maps=maps)

    def class_gradients(self, result: InferenceResult, class_index: int) -> np.ndarray:
        # score_c = sum_k w[c,k] * mean(A_k) + b_c, so the gradient w.r.t.
        # each post-ReLU map is spatially uniform: w[c,k] / (h'*w')
        k, h, w = result.feature_maps.shape
        grads = np.empty((k, h, w), dtype=np.float64)
        grads[:] = (self.linear_w[class_index] / (h * w))[:, None, None]
        return grads

    # -- training ----------------------------------------------------

    def _batch_forward(self, x_col: np.ndarray):
        """x_col: (N, P, 9C) flattened patches; P = h'*w'."""
        kern_flat = self.kernels.reshape(self.n_kernels, -1)
        z = x_col @ kern_flat.T + self.conv_bias  # (N, P, K)
        a = np.maximum(z, 0.0)
        pooled = a.mean(axis=1)  # (N, K)
        logits = pooled @ self.linear_w.T + self.linear_b  # (N, L)
        return z, pooled, logits

    def loss_and_gradients(self, x_col: np.ndarray, targets: np.ndarray):
        """Mean cross-entropy and its analytic parameter gradients."""
        n, p, _ = x_col.shape
        z, pooled, logits = self._batch_forward(x_col)
        probs = softmax(logits)
        eps = 1e-12
        loss = float(-np.mean(np.log(probs[np.arange(n), targets] + eps)))

        dlogits = probs.copy()
        dlogits[np.arange(n), targets] -= 1.0
        dlogits /= n
        d_linear_w = dlogits.T @ pooled
        d_linear_b = dlogits.sum(axis=0)
        dpooled = dlogits @ self.linear_w        # (N, K)
        dz = (z > 0.0) * (dpooled[:, None, :] / p)
        d_kernels = np.einsum("npk,npq->kq", dz, x_col,
                              optimize=True).reshape(self.kernels.shape)
        d_conv_bias = dz.sum(axis=(0, 1))
        return loss, {"kernels": d_kernels, "conv_bias": d_conv_bias,
                      "linear_w": d_linear_w, "linear_b": d_linear_b}

    def apply_gradients(self, grads: dict, learning_rate: float) -> None:
        self.kernels -= learning_rate * grads["kernels"]
        self.conv_bias -= learning_rate * grads["conv_bias"]
        self.linear_w -= learning_rate * grads["linear_w"]
        self.linear_b -= learning_rate * grads["linear_b"]

    @staticmethod
    def to_columns(images: np.ndarray) -> np.ndarray:
        """Stack (N, h, w, c) into flattened 3x3 patch rows (N, P, 9c)."""
        n, h, w, c = images.shape
        win = np.lib.stride_tricks.sliding_window_view(images, (3, 3), axis=(1, 2))
        # (N, h', w', c, 3, 3) -> (N, P, 3*3*c) matching kernel layout (3, 3, c)
        win = win.transpose(0, 1, 2, 4, 5, 3)
        return win.reshape(n, (h - 2) * (w - 2), 9 * c).astype(np.float64)

    # -- serialization -------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Versioned little-endian binary artifact (docs/model-artifact.md)."""
        k, _, _, c = self.kernels.shape
        n_labels = len(self.label_order)
        parts = [ARTIFACT_MAGIC,
                 struct.pack("<IQ", ARTIFACT_VERSION, self.plot_type_id),
                 struct.pack("<I", n_labels),
                 struct.pack(f"<{n_labels}Q", *self.label_order),
                 struct.pack("<II", k, c),
                 self.kernels.astype("<f8").tobytes(),
                 self.conv_bias.astype("<f8").tobytes(),
                 self.linear_w.astype("<f8").tobytes(),
                 self.linear_b.astype("<f8").tobytes()]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, artifact_path: str | Path) -> "ReferenceClassifier":
        data = Path(artifact_path).read_bytes()
        if data[:4] != ARTIFACT_MAGIC:
            raise BackendFailure(f"bad artifact magic in {artifact_path}")
        version, plot_type_id = struct.unpack_from("<IQ", data, 4)
        if version != ARTIFACT_VERSION:
            raise BackendFailure(f"unsupported artifact version {version}")
        off = 16
        (n_labels,) = struct.unpack_from("<I", data, off)
        off += 4
        label_order = struct.unpack_from(f"<{n_labels}Q", data, off)
        off += 8 * n_labels
        k, c = struct.unpack_from("<II", data, off)
        off += 8

        def take(count: int) -> np.ndarray:
            nonlocal off
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
            off += 8 * count
            return arr.astype(np.float64)

        kernels = take(k * 9 * c).reshape(k, 3, 3, c)
        conv_bias = take(k)
        linear_w = take(n_labels * k).reshape(n_labels, k)
        linear_b = take(n_labels)
        return cls(kernels, conv_bias, linear_w, linear_b, plot_type_id, label_order)


def load_training_images(store, image_root: str | Path,
                         training_set: TrainingSet) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Resolve a training set to (images, target indices, label_order)."""
    if not training_set.members:
        raise EmptyTrainingSet("training set has no members")
    pt = store.get_plot_type(training_set.plot_type_id)
    label_order = tuple(sorted(l.label_id for l in pt.labels))
    images, targets = [], []
    for image_id, label_id in training_set.members:
        rec = store.get_image(image_id)
        payload = imaging.load_payload(Path(image_root) / rec.storage_path,
                                       pt.channels, pt.input_width, pt.input_height)
        images.append(payload)
        targets.append(label_order.index(label_id))
    return (np.stack(images).astype(np.float64), np.array(targets, dtype=np.int64),
            label_order)


def train_reference(store, image_root: str | Path, training_set: TrainingSet,
                    epochs: int, learning_rate: float, seed: int,
                    artifact_path: str | Path, n_kernels: int = DEFAULT_KERNELS,
                    sampling_method: str = "manual",
                    collect_percentage: float = 0.0) -> ModelRecord:
    """Full-batch gradient descent on cross-entropy; persists the artifact
    and registers the resulting model record (inactive)."""
    images, targets, label_order = load_training_images(store, image_root, training_set)
    pt = store.get_plot_type(training_set.plot_type_id)
    clf = ReferenceClassifier.seeded(pt.plot_type_id, label_order, pt.channels,
                                     n_kernels=n_kernels, seed=seed)
    x_col = ReferenceClassifier.to_columns(images)
    for _ in range(epochs):
        _, grads = clf.loss_and_gradients(x_col, targets)
        clf.apply_gradients(grads, learning_rate)
    clf.save(artifact_path)
    return store.register_model(pt.plot_type_id, str(artifact_path), label_order,
                                sampling_method=sampling_method,
                                training_set_id=training_set.training_set_id,
                                collect_percentage=collect_percentage)


def evaluate_accuracy(clf: ReferenceClassifier, images: np.ndarray,
                      targets: np.ndarray) -> float:
    """Fraction of images whose argmax matches the target index."""
    x_col = ReferenceClassifier.to_columns(images)
    _, _, logits = clf._batch_forward(x_col)
    return float(np.mean(np.argmax(logits, axis=1) == targets))
