"""OOD scoring functions: MD, RMD, MSP, CLIP-style, and ensembles.

Sign convention: every score in this package is "larger = more OOD".
Relative to the common in-distribution-confidence formulations this means
the min-Mahalanobis distance is stored unnegated, MSP is negated, and the
CLIP-style score is max(out-logits) - max(in-logits). AUROC is invariant
to a consistent global sign flip, so one convention removes a whole class
of evaluation bugs.

Each method is exposed two ways: a plain scoring function returning an
OodScore, and a scorer object with `score(img)` / `score_and_gradient(img)`
for the attack loop. Gradients at the argmin/argmax kinks use the selected
branch (ties broken toward the lowest index) - exactly what reverse-mode
differentiation of the pipeline computes.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from .data import EmbeddingDataset
from .errors import (
    BadMagic,
    ClassUnderpopulated,
    DimensionMismatch,
    EmptyEnsemble,
    IoError,
    TruncatedFile,
    ZeroNormEmbedding,
)
from .model import EmbeddingModel, WordBank
from .numerics import (
    SpdFactor,
    as_vector,
    cholesky,
    half_solve,
    quadratic_form,
    regularize_spd,
    spd_solve,
    spd_solve_columns,
)

DETECTOR_MAGIC = b"OODD"
DETECTOR_VERSION = 1

METHODS = ("MD", "RMD", "MSP", "CLIP", "ENSEMBLE")


@dataclass(frozen=True)
class OodScore:
    """A detector output; larger value = more out-of-distribution."""

    value: float
    method: str

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("score must be finite")
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")


@dataclass(frozen=True)
class GaussianDetector:
    """Per-class Gaussians with shared covariance, plus a background fit.

    means[k] is the class-k centroid; cov factors the shared (regularized)
    covariance. mean0/cov0 describe the label-agnostic background Gaussian
    used by the relative score.
    """

    means: np.ndarray  # (K, D)
    cov: SpdFactor
    mean0: np.ndarray  # (D,)
    cov0: SpdFactor

    def __post_init__(self):
        k, d = self.means.shape
        if k < 1:
            raise ValueError("need at least one class")
        if self.cov.dim != d or self.cov0.dim != d or self.mean0.shape != (d,):
            raise DimensionMismatch("detector component dimensions disagree")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def fit_gaussians(embeddings: EmbeddingDataset) -> GaussianDetector:
    """Fit class centroids, pooled within-class covariance, and background.

    The shared covariance is the sum of per-class scatters divided by the
    total point count N; the background Gaussian ignores labels. Both
    covariances get the standard ridge before factorization.
    """
    if embeddings.labels is None:
        raise ValueError("fit_gaussians needs labeled embeddings")
    z = embeddings.embeddings
    y = np.asarray(embeddings.labels, dtype=np.int64)
    n, d = z.shape
    k = int(y.max()) + 1 if n else 0
    if n == 0 or d < 1:
        raise ValueError("empty embedding dataset")

    means = np.zeros((k, d))
    centered = np.empty_like(z)
    for c in range(k):
        mask = y == c
        if int(mask.sum()) < 2:
            raise ClassUnderpopulated(f"class {c} has {int(mask.sum())} examples, needs >= 2")
        means[c] = z[mask].mean(axis=0)
        centered[mask] = z[mask] - means[c]
    cov = centered.T @ centered / n

    mean0 = z.mean(axis=0)
    centered0 = z - mean0
    cov0 = centered0.T @ centered0 / n

    return GaussianDetector(
        means=means,
        cov=cholesky(regularize_spd(cov)),
        mean0=mean0,
        cov0=cholesky(regularize_spd(cov0)),
    )


def _class_distances(det: GaussianDetector, z: np.ndarray) -> np.ndarray:
    """Mahalanobis distance from z to every class mean, shape (K,)."""
    diffs = z[None, :] - det.means  # (K, D)
    half = half_solve(det.cov, diffs.T)  # (D, K)
    return np.einsum("dk,dk->k", half, half)


def _check_dim(det: GaussianDetector, z) -> np.ndarray:
    z = as_vector(z)
    if z.shape[0] != det.dim:
        raise DimensionMismatch(f"query dim {z.shape[0]} vs detector dim {det.dim}")
    return z


def md_score(det: GaussianDetector, z) -> OodScore:
    """min_k (z - mu_k)^T Sigma^-1 (z - mu_k); zero at each class mean."""
    z = _check_dim(det, z)
    return OodScore(value=float(_class_distances(det, z).min()), method="MD")


def background_distance(det: GaussianDetector, z) -> float:
    """Mahalanobis distance to the background Gaussian (MD_0)."""
    z = _check_dim(det, z)
    return quadratic_form(det.cov0, z - det.mean0)


def rmd_score(det: GaussianDetector, z) -> OodScore:
    """min_k [MD_k(z) - MD_0(z)] = md_score(z) - MD_0(z)."""
    z = _check_dim(det, z)
    value = float(_class_distances(det, z).min()) - quadratic_form(det.cov0, z - det.mean0)
    return OodScore(value=value, method="RMD")


def msp_score(model: EmbeddingModel, img) -> OodScore:
    """Negated maximum softmax probability (so larger = more OOD)."""
    probs = model_mod.predict_probs(model, img)
    return OodScore(value=-float(probs.max()), method="MSP")


def clip_score(model: EmbeddingModel, bank: WordBank, img) -> OodScore:
    """max over out-word cosines minus max over in-word cosines."""
    in_logits, out_logits = model_mod.clip_style_logits(model, bank, img)
    return OodScore(value=float(out_logits.max() - in_logits.max()), method="CLIP")


def _md_value_and_grad(det: GaussianDetector, z: np.ndarray) -> tuple[float, np.ndarray]:
    dists = _class_distances(det, z)
    k_star = int(np.argmin(dists))
    grad = 2.0 * spd_solve(det.cov, z - det.means[k_star])
    return float(dists[k_star]), grad


def _rmd_value_and_grad(det: GaussianDetector, z: np.ndarray) -> tuple[float, np.ndarray]:
    md_value, md_grad = _md_value_and_grad(det, z)
    diff0 = z - det.mean0
    value = md_value - quadratic_form(det.cov0, diff0)
    grad = md_grad - 2.0 * spd_solve(det.cov0, diff0)
    return value, grad


def score_embedding_gradient(det: GaussianDetector, method: str, z) -> np.ndarray:
    """Gradient of the MD or RMD score with respect to the embedding."""
    z = _check_dim(det, z)
    if method == "MD":
        return _md_value_and_grad(det, z)[1]
    if method == "RMD":
        return _rmd_value_and_grad(det, z)[1]
    raise ValueError(f"method must be MD or RMD, got {method!r}")


def _class_distances_batch(det: GaussianDetector, zs: np.ndarray) -> np.ndarray:
    """(N, K) Mahalanobis distances for a stack of embeddings."""
    n, d = zs.shape
    diffs = zs[:, None, :] - det.means[None, :, :]  # (N, K, D)
    half = half_solve(det.cov, diffs.reshape(n * det.num_classes, d).T)
    return np.einsum("dm,dm->m", half, half).reshape(n, det.num_classes)


def _md_batch(det: GaussianDetector, zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dists = _class_distances_batch(det, zs)
    k_star = np.argmin(dists, axis=1)
    sel = zs - det.means[k_star]
    grads = 2.0 * spd_solve_columns(det.cov, sel.T).T
    return dists[np.arange(len(zs)), k_star], grads


def _rmd_batch(det: GaussianDetector, zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values, grads = _md_batch(det, zs)
    diff0 = zs - det.mean0
    half0 = half_solve(det.cov0, diff0.T)
    md0 = np.einsum("dn,dn->n", half0, half0)
    grads0 = 2.0 * spd_solve_columns(det.cov0, diff0.T).T
    return values - md0, grads - grads0


class MahalanobisScorer:
    """score(x) = min-class Mahalanobis distance of the embedding of x."""

    method = "MD"

    def __init__(self, model: EmbeddingModel, detector: GaussianDetector):
        if detector.dim != model.embedding_dim:
            raise DimensionMismatch("detector dimension does not match model embedding")
        self.model = model
        self.detector = detector

    def _downstream(self, z, probs):
        value, grad = _md_value_and_grad(self.detector, z)
        return value, grad, None

    def _downstream_batch(self, zs, probs):
        values, grads = _md_batch(self.detector, zs)
        return values, grads, None

    def score(self, img) -> float:
        return float(_class_distances(self.detector, model_mod.embed(self.model, img)).min())

    def score_and_gradient(self, img) -> tuple[float, np.ndarray]:
        return model_mod.score_and_input_gradient(self.model, img, self._downstream)

    def score_batch(self, images) -> np.ndarray:
        zs = model_mod.embed_many(self.model, images)
        return _class_distances_batch(self.detector, zs).min(axis=1)

    def score_and_gradient_batch(self, images):
        return model_mod.batch_scores_and_input_gradients(
            self.model, images, self._downstream_batch
        )


class RelativeMahalanobisScorer:
    """score(x) = min_k MD_k - MD_0 on the embedding of x."""

    method = "RMD"

    def __init__(self, model: EmbeddingModel, detector: GaussianDetector):
        if detector.dim != model.embedding_dim:
            raise DimensionMismatch("detector dimension does not match model embedding")
        self.model = model
        self.detector = detector

    def _downstream(self, z, probs):
        value, grad = _rmd_value_and_grad(self.detector, z)
        return value, grad, None

    def _downstream_batch(self, zs, probs):
        values, grads = _rmd_batch(self.detector, zs)
        return values, grads, None

    def score(self, img) -> float:
        z = model_mod.embed(self.model, img)
        return _rmd_value_and_grad(self.detector, z)[0]

    def score_and_gradient(self, img) -> tuple[float, np.ndarray]:
        return model_mod.score_and_input_gradient(self.model, img, self._downstream)

    def score_batch(self, images) -> np.ndarray:
        zs = model_mod.embed_many(self.model, images)
        return _rmd_batch(self.detector, zs)[0]

    def score_and_gradient_batch(self, images):
        return model_mod.batch_scores_and_input_gradients(
            self.model, images, self._downstream_batch
        )


class MspScorer:
    """score(x) = -max softmax probability."""

    method = "MSP"

    def __init__(self, model: EmbeddingModel):
        self.model = model

    @staticmethod
    def _downstream(z, probs):
        j = int(np.argmax(probs))
        grad_p = np.zeros_like(probs)
        grad_p[j] = -1.0
        return -float(probs[j]), None, grad_p

    @staticmethod
    def _downstream_batch(zs, probs):
        rows = np.arange(len(probs))
        j = np.argmax(probs, axis=1)
        grad_p = np.zeros_like(probs)
        grad_p[rows, j] = -1.0
        return -probs[rows, j], None, grad_p

    def score(self, img) -> float:
        return -float(model_mod.predict_probs(self.model, img).max())

    def score_and_gradient(self, img) -> tuple[float, np.ndarray]:
        return model_mod.score_and_input_gradient(self.model, img, self._downstream)

    def score_batch(self, images) -> np.ndarray:
        a = model_mod.embed_many(self.model, images)
        logits = a @ self.model.weights[-1].T + self.model.biases[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return -(e / e.sum(axis=1, keepdims=True)).max(axis=1)

    def score_and_gradient_batch(self, images):
        return model_mod.batch_scores_and_input_gradients(
            self.model, images, self._downstream_batch
        )


class ClipScorer:
    """Two-tower score: max out-word cosine minus max in-word cosine.

    Only the image pathway is differentiated; word vectors are constants.
    """

    method = "CLIP"

    def __init__(self, model: EmbeddingModel, bank: WordBank):
        if bank.dim != model.embedding_dim:
            raise DimensionMismatch("word bank dimension does not match model embedding")
        self.model = model
        self.bank = bank

    def _downstream(self, z, probs):
        z_norm = float(np.linalg.norm(z))
        if z_norm < 1e-12:
            raise ZeroNormEmbedding("image embedding norm below 1e-12")
        z_hat = z / z_norm

        def best(words):
            cos = (words @ z) / (np.linalg.norm(words, axis=1) * z_norm)
            j = int(np.argmax(cos))
            w = words[j]
            w_hat = w / np.linalg.norm(w)
            grad = (w_hat - cos[j] * z_hat) / z_norm
            return float(cos[j]), grad

        in_best, in_grad = best(self.bank.in_words)
        out_best, out_grad = best(self.bank.out_words)
        return out_best - in_best, out_grad - in_grad, None

    def _downstream_batch(self, zs, probs):
        norms = np.linalg.norm(zs, axis=1)
        if np.any(norms < 1e-12):
            raise ZeroNormEmbedding("image embedding norm below 1e-12")
        z_hat = zs / norms[:, None]

        def best(words):
            w_norms = np.linalg.norm(words, axis=1)
            cos = (zs @ words.T) / (norms[:, None] * w_norms[None, :])
            j = np.argmax(cos, axis=1)
            c = cos[np.arange(len(zs)), j]
            w_hat = words[j] / w_norms[j][:, None]
            grads = (w_hat - c[:, None] * z_hat) / norms[:, None]
            return c, grads

        in_best, in_grads = best(self.bank.in_words)
        out_best, out_grads = best(self.bank.out_words)
        return out_best - in_best, out_grads - in_grads, None

    def score(self, img) -> float:
        in_logits, out_logits = model_mod.clip_style_logits(self.model, self.bank, img)
        return float(out_logits.max() - in_logits.max())

    def score_and_gradient(self, img) -> tuple[float, np.ndarray]:
        return model_mod.score_and_input_gradient(self.model, img, self._downstream)

    def score_batch(self, images) -> np.ndarray:
        zs = model_mod.embed_many(self.model, images)
        values, _, _ = self._downstream_batch(zs, None)
        return values

    def score_and_gradient_batch(self, images):
        return model_mod.batch_scores_and_input_gradients(
            self.model, images, self._downstream_batch
        )


class DetectorEnsemble:
    """Average of member scores; the gradient averages member gradients."""

    method = "ENSEMBLE"

    def __init__(self, members: Sequence):
        if len(members) == 0:
            raise EmptyEnsemble("ensemble needs at least one member")
        tags = {getattr(m, "method", "?") for m in members}
        if "MD" in tags and "RMD" in tags:
            warnings.warn("mixing MD and RMD members: scores are in different units")
        self.members = list(members)

    def __len__(self) -> int:
        return len(self.members)

    def score(self, img) -> float:
        return float(np.mean([m.score(img) for m in self.members]))

    def score_and_gradient(self, img) -> tuple[float, np.ndarray]:
        total = 0.0
        grad = None
        for m in self.members:
            value, g = m.score_and_gradient(img)
            total += value
            grad = g if grad is None else grad + g
        n = len(self.members)
        return total / n, grad / n

    def score_batch(self, images) -> np.ndarray:
        return np.mean([m.score_batch(images) for m in self.members], axis=0)

    def score_and_gradient_batch(self, images):
        values = None
        grads = None
        for m in self.members:
            v, g = m.score_and_gradient_batch(images)
            values = v if values is None else values + v
            grads = g if grads is None else grads + g
        n = len(self.members)
        return values / n, grads / n


def ensemble_score(ens: DetectorEnsemble, img) -> OodScore:
    """(1/N) sum of member scores."""
    return OodScore(value=ens.score(img), method="ENSEMBLE")


def save_detector(det: GaussianDetector, path) -> None:
    """OODD checkpoint: K, D, means, background mean, both factor blocks."""
    k, d = det.means.shape
    try:
        with open(path, "wb") as fh:
            fh.write(DETECTOR_MAGIC)
            fh.write(struct.pack("<III", DETECTOR_VERSION, k, d))
            fh.write(det.means.astype("<f4").tobytes())
            fh.write(det.mean0.astype("<f4").tobytes())
            fh.write(det.cov.lower.astype("<f4").tobytes())
            fh.write(det.cov0.lower.astype("<f4").tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_detector(path) -> GaussianDetector:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) < 4 or raw[:4] != DETECTOR_MAGIC:
        raise BadMagic("not an OODD checkpoint")
    offset = 4
    try:
        _version, k, d = struct.unpack_from("<III", raw, offset)
    except struct.error as exc:
        raise TruncatedFile(str(exc)) from exc
    offset += 12
    blocks = []
    for count in (k * d, d, d * d, d * d):
        if len(raw) < offset + count * 4:
            raise TruncatedFile("detector checkpoint payload incomplete")
        blocks.append(
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64)
        )
        offset += count * 4
    means, mean0, lower, lower0 = blocks
    return GaussianDetector(
        means=means.reshape(k, d),
        cov=SpdFactor(lower=lower.reshape(d, d), dim=d),
        mean0=mean0,
        cov0=SpdFactor(lower=lower0.reshape(d, d), dim=d),
    )
