"""Small differentiable classifier with exact input gradients.

The backbone is a tanh MLP: flatten -> hidden widths -> embedding -> K
logits. The pre-logit activation (after the final tanh) is the embedding
used by the Gaussian detectors; the softmax head provides probabilities
for the MSP baseline. tanh keeps the network smooth so finite-difference
gradient checks are tight and tiny-step attacks are not kink-dominated.

Input gradients are computed by a hand-rolled reverse pass, so any scalar
downstream of (embedding, probabilities) can be differentiated with
respect to the pixels and composed with the resize adjoint for
low-resolution attacks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import (
    BadMagic,
    Diverged,
    IoError,
    NonFiniteGradient,
    ShapeMismatch,
    TruncatedFile,
    ZeroNormEmbedding,
)

MODEL_MAGIC = b"OODM"
MODEL_VERSION = 1

# downstream scalar: (embedding, probabilities) -> (value, d/d embedding, d/d probs)
Downstream = Callable[
    [np.ndarray, np.ndarray], tuple[float, Optional[np.ndarray], Optional[np.ndarray]]
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.015
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("batch_size, learning_rate must be positive; weight_decay >= 0")


@dataclass(frozen=True)
class EmbeddingModel:
    """Weights of the MLP; tanh after every layer except the classifier head.

    weights[i] has shape (out_i, in_i); the final entry is the classifier
    matrix mapping the embedding (dimension D) to K logits. Models are
    immutable after construction.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ShapeMismatch("bias length must match weight rows")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ShapeMismatch("layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]


def init_model(
    input_dim: int,
    num_classes: int,
    hidden_widths: Sequence[int] = (256, 128),
    embedding_dim: int = 64,
    seed: int = 0,
) -> EmbeddingModel:
    """Fresh model with 1/sqrt(fan_in) Gaussian weights and zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden_widths, embedding_dim, num_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return EmbeddingModel(tuple(weights), tuple(biases))


def _flatten(model: EmbeddingModel, img) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if x.size != model.input_dim:
        raise ShapeMismatch(f"image has {x.size} pixels, model expects {model.input_dim}")
    return x.reshape(-1)


def _forward(model: EmbeddingModel, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Return hidden activations (input first, embedding last) and logits."""
    acts = [x]
    a = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.tanh(w @ a + b)
        acts.append(a)
    logits = model.weights[-1] @ a + model.biases[-1]
    return acts, logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def embed(model: EmbeddingModel, img) -> np.ndarray:
    """Pre-logit embedding z = f(x), dimension D."""
    acts, _ = _forward(model, _flatten(model, img))
    return acts[-1]


def predict_probs(model: EmbeddingModel, img) -> np.ndarray:
    """Softmax class probabilities (positive, sum to 1)."""
    _, logits = _forward(model, _flatten(model, img))
    return _softmax(logits)


def score_and_input_gradient(
    model: EmbeddingModel, img, downstream: Downstream
) -> tuple[float, np.ndarray]:
    """Evaluate a downstream scalar and its gradient with respect to pixels.

    downstream(z, p) returns (value, grad wrt embedding or None, grad wrt
    probabilities or None); the reverse pass chains both paths through the
    network back to the input image.
    """
    img = np.asarray(img, dtype=np.float64)
    x = _flatten(model, img)
    acts, logits = _forward(model, x)
    probs = _softmax(logits)
    value, grad_z, grad_p = downstream(acts[-1], probs)

    g = np.zeros(model.embedding_dim) if grad_z is None else np.asarray(grad_z, dtype=np.float64)
    if grad_p is not None:
        grad_p = np.asarray(grad_p, dtype=np.float64)
        # softmax vjp: J^T u = p * (u - u.p)
        g_logits = probs * (grad_p - float(grad_p @ probs))
        g = g + model.weights[-1].T @ g_logits
    # back through the tanh layers; acts[i+1] is the output of layer i
    for i in range(len(model.weights) - 2, -1, -1):
        g_pre = g * (1.0 - acts[i + 1] ** 2)
        g = model.weights[i].T @ g_pre
    grad_img = g.reshape(img.shape)
    if not np.all(np.isfinite(grad_img)):
        raise NonFiniteGradient("input gradient is non-finite")
    return float(value), grad_img


def input_gradient(model: EmbeddingModel, img, downstream: Downstream) -> np.ndarray:
    """Gradient of the downstream scalar with respect to the image pixels."""
    _, grad = score_and_input_gradient(model, img, downstream)
    return grad


def batch_scores_and_input_gradients(
    model: EmbeddingModel, images, downstream_batch
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized score_and_input_gradient over a stack of images.

    downstream_batch maps (Z (N,D), P (N,K)) to (values (N,), grads wrt Z
    or None, grads wrt P or None). Same math as the single-image path, one
    image per row.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    x = images.reshape(n, -1)
    if x.shape[1] != model.input_dim:
        raise ShapeMismatch(f"images have {x.shape[1]} pixels, model expects {model.input_dim}")
    acts = [x]
    a = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        acts.append(a)
    logits = a @ model.weights[-1].T + model.biases[-1]
    probs = _softmax(logits)
    values, grad_z, grad_p = downstream_batch(acts[-1], probs)

    g = np.zeros((n, model.embedding_dim)) if grad_z is None else np.asarray(grad_z)
    if grad_p is not None:
        grad_p = np.asarray(grad_p, dtype=np.float64)
        g_logits = probs * (grad_p - np.sum(grad_p * probs, axis=1, keepdims=True))
        g = g + g_logits @ model.weights[-1]
    for i in range(len(model.weights) - 2, -1, -1):
        g_pre = g * (1.0 - acts[i + 1] ** 2)
        g = g_pre @ model.weights[i]
    return np.asarray(values, dtype=np.float64), g.reshape(images.shape)


def train(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    hidden_widths: Sequence[int] = (256, 128),
    embedding_dim: int = 64,
    epoch_callback: Callable[[int, float, float], None] | None = None,
) -> EmbeddingModel:
    """Mini-batch gradient descent on softmax cross-entropy.

    Deterministic given cfg.seed (initialization and shuffling). The
    optional callback receives (epoch, mean loss, training accuracy) once
    per epoch; raises Diverged if the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n = len(dataset)
    x_all = dataset.images.reshape(n, -1).astype(np.float64)
    y_all = np.asarray(dataset.labels, dtype=np.int64)
    model = init_model(
        x_all.shape[1], dataset.num_classes, hidden_widths, embedding_dim, cfg.seed
    )
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    rng = np.random.default_rng(cfg.seed)
    n_layers = len(weights)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        hits = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            b = len(idx)

            acts = [xb]
            a = xb
            for w, bias in zip(weights[:-1], biases[:-1]):
                a = np.tanh(a @ w.T + bias)
                acts.append(a)
            logits = a @ weights[-1].T + biases[-1]
            probs = _softmax(logits)
            batch_loss = -np.mean(np.log(probs[np.arange(b), yb] + 1e-300))
            if not np.isfinite(batch_loss):
                raise Diverged(f"loss became non-finite at epoch {epoch}")
            losses.append(batch_loss)
            hits += int(np.sum(np.argmax(logits, axis=1) == yb))

            d_logits = probs
            d_logits[np.arange(b), yb] -= 1.0
            d_logits /= b
            grad = d_logits
            for i in range(n_layers - 1, -1, -1):
                gw = grad.T @ acts[i] + cfg.weight_decay * weights[i]
                gb = grad.sum(axis=0)
                if i > 0:
                    grad = (grad @ weights[i]) * (1.0 - acts[i] ** 2)
                weights[i] -= cfg.learning_rate * gw
                biases[i] -= cfg.learning_rate * gb
        if epoch_callback is not None:
            epoch_callback(epoch, float(np.mean(losses)), hits / n)
    return EmbeddingModel(tuple(weights), tuple(biases))


def embed_many(model: EmbeddingModel, images: np.ndarray) -> np.ndarray:
    """Embeddings for a stack of images, shape (N, D)."""
    a = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if a.shape[1] != model.input_dim:
        raise ShapeMismatch(f"images have {a.shape[1]} pixels, model expects {model.input_dim}")
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.tanh(a @ w.T + b)
    return a


def training_accuracy(model: EmbeddingModel, dataset: LabeledDataset) -> float:
    a = embed_many(model, dataset.images)
    logits = a @ model.weights[-1].T + model.biases[-1]
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


@dataclass(frozen=True)
class WordBank:
    """Fixed semantic anchor vectors for the CLIP-style two-tower score."""

    in_words: np.ndarray  # (W_in, D)
    out_words: np.ndarray  # (W_out, D)

    def __post_init__(self):
        if self.in_words.ndim != 2 or self.out_words.ndim != 2:
            raise ShapeMismatch("word banks must be 2-D")
        if len(self.in_words) < 1 or len(self.out_words) < 1:
            raise ValueError("need at least one in-word and one out-word")
        if self.in_words.shape[1] != self.out_words.shape[1]:
            raise ShapeMismatch("in/out word dimensions differ")
        norms = np.concatenate(
            [np.linalg.norm(self.in_words, axis=1), np.linalg.norm(self.out_words, axis=1)]
        )
        if np.any(norms < 1e-12):
            raise ValueError("word vectors must have nonzero norm")

    @property
    def dim(self) -> int:
        return self.in_words.shape[1]


def class_mean_embeddings(model: EmbeddingModel, dataset: LabeledDataset) -> np.ndarray:
    """(K, D) matrix of per-class mean embeddings."""
    a = embed_many(model, dataset.images)
    means = np.zeros((dataset.num_classes, model.embedding_dim))
    for k in range(dataset.num_classes):
        mask = dataset.labels == k
        if not np.any(mask):
            raise ValueError(f"class {k} has no examples")
        means[k] = a[mask].mean(axis=0)
    return means


def build_word_bank(
    model: EmbeddingModel, in_dataset: LabeledDataset, ood_dataset: LabeledDataset
) -> WordBank:
    """Class-mean word bank: in-words from the in-distribution classes,
    out-words from a disjoint OOD split."""
    return WordBank(
        in_words=class_mean_embeddings(model, in_dataset),
        out_words=class_mean_embeddings(model, ood_dataset),
    )


def clip_style_logits(
    model: EmbeddingModel, bank: WordBank, img
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities between the image embedding and each word vector."""
    if bank.dim != model.embedding_dim:
        raise ShapeMismatch("word bank dimension does not match model embedding")
    z = embed(model, img)
    z_norm = float(np.linalg.norm(z))
    if z_norm < 1e-12:
        raise ZeroNormEmbedding("image embedding norm below 1e-12")
    def cosines(words):
        return (words @ z) / (np.linalg.norm(words, axis=1) * z_norm)
    return cosines(bank.in_words), cosines(bank.out_words)


def save_model(model: EmbeddingModel, path) -> None:
    """OODM checkpoint: layer count, then (rows, cols, f32 weights, f32 biases)."""
    try:
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<II", MODEL_VERSION, len(model.weights)))
            for w, b in zip(model.weights, model.biases):
                fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
                fh.write(w.astype("<f4").tobytes())
                fh.write(b.astype("<f4").tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_model(path) -> EmbeddingModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) < 4 or raw[:4] != MODEL_MAGIC:
        raise BadMagic("not an OODM checkpoint")
    offset = 4
    try:
        _version, n_layers = struct.unpack_from("<II", raw, offset)
        offset += 8
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", raw, offset)
            offset += 8
            if len(raw) < offset + (rows * cols + rows) * 4:
                raise TruncatedFile("layer block incomplete")
            w = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset)
            offset += rows * cols * 4
            b = np.frombuffer(raw, dtype="<f4", count=rows, offset=offset)
            offset += rows * 4
            weights.append(w.astype(np.float64).reshape(rows, cols))
            biases.append(b.astype(np.float64))
    except struct.error as exc:
        raise TruncatedFile(str(exc)) from exc
    return EmbeddingModel(tuple(weights), tuple(biases))
