"""Datasets and image plumbing.

Covers four jobs: synthetic near/far OOD dataset generation (the desk-scale
stand-in for CIFAR-100 vs CIFAR-10 / SVHN), loading raw CIFAR binary files,
reading/writing precomputed embedding files, and bilinear image resizing
together with its exact adjoint (needed to push score gradients through the
resize when attacking at low resolution).

Images are H x W x C float64 arrays with pixels in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionZero,
    IoError,
    MalformedFile,
    ShapeMismatch,
    TruncatedFile,
)

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32 bytes per RGB plane
EMBEDDING_MAGIC = b"OODE"
EMBEDDING_VERSION = 1

# gain of the fixed linear decoder before the sigmoid squash; low contrast
# forces trained classifiers to amplify, which keeps tiny-epsilon pixel
# attacks meaningful (full-contrast renders need implausibly large budgets)
RENDER_CONTRAST = 0.4


@dataclass(frozen=True)
class LabeledDataset:
    """Images plus integer class labels in [0, K)."""

    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,)
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeMismatch(f"images must be N x H x W x C, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class EmbeddingDataset:
    """Fixed-dimension embedding vectors with optional class labels."""

    embeddings: np.ndarray  # (N, D)
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ShapeMismatch(f"embeddings must be N x D, got {self.embeddings.shape}")
        if self.labels is not None and len(self.labels) != len(self.embeddings):
            raise ValueError("labels length must match embeddings")

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the synthetic in-distribution / OOD dataset pair.

    Class latents live in a `latent_dim`-dimensional space; class means are
    drawn at `separation` scale and unit-variance samples around them are
    rendered to pixels through a fixed random linear decoder followed by a
    sigmoid squash into [0, 1].

    ood_mode "near": OOD classes are fresh means from the same
    meta-distribution rendered through the same decoder (semantic shift
    only). ood_mode "far": OOD latents additionally pass through a second,
    independent decoder (style shift on top).
    """

    num_classes: int = 10
    height: int = 32
    width: int = 32
    channels: int = 3
    latent_dim: int = 16
    separation: float = 1.3
    ood_mode: str = "near"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.separation <= 0:
            raise ValueError("separation scale must be positive")
        if self.ood_mode not in ("near", "far"):
            raise ValueError(f"unknown ood_mode {self.ood_mode!r}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _decoder(rng: np.random.Generator, latent_dim: int, n_pixels: int) -> np.ndarray:
    # 1/sqrt(latent_dim) scaling keeps decoded pre-squash values O(separation)
    return RENDER_CONTRAST * rng.standard_normal((latent_dim, n_pixels)) / np.sqrt(latent_dim)


def _render(latents: np.ndarray, decoder: np.ndarray, shape) -> np.ndarray:
    return _sigmoid(latents @ decoder).reshape((len(latents),) + tuple(shape))


def generate_synthetic(
    spec: SyntheticSpec, n_per_class: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate (in-distribution, OOD) datasets, deterministic given spec.seed.

    Both sets have spec.num_classes classes with n_per_class examples each.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(spec.seed)
    k, latent = spec.num_classes, spec.latent_dim
    n_pixels = spec.height * spec.width * spec.channels

    in_means = spec.separation * rng.standard_normal((k, latent))
    in_decoder = _decoder(rng, latent, n_pixels)
    ood_means = spec.separation * rng.standard_normal((k, latent))
    # always drawn so near and far runs of one seed consume the same stream
    # and differ only in the rendering of the OOD latents
    alt_decoder = _decoder(rng, latent, n_pixels)
    ood_decoder = in_decoder if spec.ood_mode == "near" else alt_decoder

    def sample(means, decoder):
        latents = np.repeat(means, n_per_class, axis=0)
        latents = latents + rng.standard_normal(latents.shape)
        labels = np.repeat(np.arange(k), n_per_class)
        return LabeledDataset(_render(latents, decoder, spec.image_shape), labels, k)

    return sample(in_means, in_decoder), sample(ood_means, ood_decoder)


def load_cifar_binary(path, limit: int | None = None) -> LabeledDataset:
    """Load a CIFAR binary file (3073-byte records: label byte then R/G/B planes).

    Pixels are mapped byte/255 into [0, 1]; record order is preserved.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        raise MalformedFile(
            f"file length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    n = len(raw) // CIFAR_RECORD_BYTES
    if limit is not None:
        n = min(n, limit)
    records = np.frombuffer(raw, dtype=np.uint8, count=n * CIFAR_RECORD_BYTES)
    records = records.reshape(n, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if n else 0
    return LabeledDataset(images, labels, num_classes)


def save_embeddings(dataset: EmbeddingDataset, path) -> None:
    """Write the OODE embedding file: header, float32 rows, optional u32 labels."""
    n, d = dataset.embeddings.shape
    flag = 1 if dataset.labels is not None else 0
    try:
        with open(path, "wb") as fh:
            fh.write(EMBEDDING_MAGIC)
            fh.write(struct.pack("<IQIB", EMBEDDING_VERSION, n, d, flag))
            fh.write(dataset.embeddings.astype("<f4").tobytes())
            if flag:
                fh.write(np.asarray(dataset.labels, dtype="<u4").tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_embeddings(path) -> EmbeddingDataset:
    """Read an OODE embedding file written by save_embeddings."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    header = struct.calcsize("<IQIB")
    if len(raw) < 4 or raw[:4] != EMBEDDING_MAGIC:
        raise BadMagic("not an OODE embedding file")
    if len(raw) < 4 + header:
        raise TruncatedFile("header incomplete")
    _version, n, d, flag = struct.unpack("<IQIB", raw[4 : 4 + header])
    if d == 0:
        raise DimensionZero("embedding dimension is zero")
    offset = 4 + header
    payload = n * d * 4
    if len(raw) < offset + payload:
        raise TruncatedFile(f"expected {payload} payload bytes, file has {len(raw) - offset}")
    vectors = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset)
    embeddings = vectors.astype(np.float64).reshape(n, d)
    labels = None
    if flag:
        offset += payload
        if len(raw) < offset + n * 4:
            raise TruncatedFile("label block incomplete")
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).astype(np.int64)
    return EmbeddingDataset(embeddings, labels)


@lru_cache(maxsize=64)
def _resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) bilinear interpolation matrix, half-pixel centers.

    Each row is a convex combination (non-negative, sums to 1), so valid
    [0,1] images stay in range before any clamping.
    """
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    for i in range(out_size):
        m[i, lo[i]] += 1.0 - frac[i]
        m[i, hi[i]] += frac[i]
    m.setflags(write=False)
    return m


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; channels independent.

    The interpolation itself is linear in the pixels; the [0,1] clamp is
    applied only at the output so the pre-clamp map has an exact adjoint.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeMismatch(f"image must be H x W x C, got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    ry = _resize_weights(img.shape[0], out_h)
    rx = _resize_weights(img.shape[1], out_w)
    out = np.einsum("oi,ijc,pj->opc", ry, img, rx, optimize=True)
    return np.clip(out, 0.0, 1.0)


def resize_adjoint(grad_out, in_h: int, in_w: int) -> np.ndarray:
    """Exact transpose of the resize_bilinear linear map (pre-clamp)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim != 3:
        raise ShapeMismatch(f"gradient must be H x W x C, got {grad_out.shape}")
    ry = _resize_weights(in_h, grad_out.shape[0])
    rx = _resize_weights(in_w, grad_out.shape[1])
    return np.einsum("oi,opc,pj->ijc", ry, grad_out, rx, optimize=True)


def resize_bilinear_batch(images, out_h: int, out_w: int) -> np.ndarray:
    """resize_bilinear applied to a stack of images, shape (N, H, W, C)."""
    images = np.asarray(images, dtype=np.float64)
    ry = _resize_weights(images.shape[1], out_h)
    rx = _resize_weights(images.shape[2], out_w)
    out = np.einsum("oi,nijc,pj->nopc", ry, images, rx, optimize=True)
    return np.clip(out, 0.0, 1.0)


def resize_adjoint_batch(grads_out, in_h: int, in_w: int) -> np.ndarray:
    """resize_adjoint applied to a stack of gradients."""
    grads_out = np.asarray(grads_out, dtype=np.float64)
    ry = _resize_weights(in_h, grads_out.shape[1])
    rx = _resize_weights(in_w, grads_out.shape[2])
    return np.einsum("oi,nopc,pj->nijc", ry, grads_out, rx, optimize=True)
