"""Gradient and gradient-sign attacks on OOD scores.

An attack repeatedly evaluates a scorer's input gradient at the current
iterate and steps along it (or its sign), in whichever direction moves the
score the desired way. Every step's score and cumulative-perturbation
norms (measured against the original image, after any pixel clamping) are
recorded so the evaluation module can interpolate score-vs-norm curves.

Scorers are duck-typed: anything with `score(img) -> float` and
`score_and_gradient(img) -> (float, gradient)` works, which is what the
detector scorer classes provide.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import resize_adjoint, resize_adjoint_batch, resize_bilinear, resize_bilinear_batch
from .errors import IoError, NonFiniteGradient

FGSM = "fgsm"
RAW_GRADIENT = "grad"
INCREASE = "increase"
DECREASE = "decrease"

TRAJECTORY_COLUMNS = ("image_id", "step", "score", "l2_norm", "linf_norm")


@dataclass(frozen=True)
class AttackConfig:
    method: str = FGSM
    epsilon: float = 3e-4  # per-step size; paper-default learning rate
    steps: int = 30
    direction: str = DECREASE
    clamp_pixels: bool = True
    low_res: bool = False

    def __post_init__(self):
        if self.method not in (FGSM, RAW_GRADIENT):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.direction not in (INCREASE, DECREASE):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class AttackTrajectory:
    """Per-step record of one attacked image.

    Row t holds the score after t steps and the L2/Linf norms of the
    cumulative perturbation; row 0 is the unperturbed image. Length is
    steps+1 unless the attack hit a non-finite score and was truncated.
    """

    steps: np.ndarray
    scores: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    final_image: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.steps)


def attack_step(img, grad, cfg: AttackConfig) -> np.ndarray:
    """One perturbation step; sign(0) = 0 so zero-gradient pixels stay put."""
    img = np.asarray(img, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != img.shape:
        raise ValueError(f"gradient shape {grad.shape} vs image shape {img.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("attack gradient is non-finite")
    sign = 1.0 if cfg.direction == INCREASE else -1.0
    if cfg.method == FGSM:
        out = img + sign * cfg.epsilon * np.sign(grad)
    else:
        out = img + sign * cfg.epsilon * grad
    if cfg.clamp_pixels:
        out = np.clip(out, 0.0, 1.0)
    return out


def run_attack(scorer, img, cfg: AttackConfig) -> AttackTrajectory:
    """Iterate attack_step for cfg.steps steps, recording score and norms.

    Deterministic. A non-finite score aborts the attack; the trajectory is
    returned truncated and flagged rather than raising.
    """
    x0 = np.asarray(img, dtype=np.float64)
    rows: list[tuple[int, float, float, float]] = []

    value, grad = scorer.score_and_gradient(x0)
    truncated = not np.isfinite(value)
    x = x0
    if not truncated:
        rows.append((0, float(value), 0.0, 0.0))
        for t in range(1, cfg.steps + 1):
            x = attack_step(x, grad, cfg)
            delta = x - x0
            l2 = float(np.sqrt(np.sum(delta * delta)))
            linf = float(np.max(np.abs(delta)))
            if t < cfg.steps:
                value, grad = scorer.score_and_gradient(x)
            else:
                value = float(scorer.score(x))
            if not np.isfinite(value):
                truncated = True
                break
            rows.append((t, float(value), l2, linf))

    arr = np.array(rows, dtype=np.float64).reshape(len(rows), 4)
    return AttackTrajectory(
        steps=arr[:, 0].astype(np.int64),
        scores=arr[:, 1],
        l2=arr[:, 2],
        linf=arr[:, 3],
        final_image=x,
        truncated=truncated,
    )


def run_attack_batch(scorer, images, cfg: AttackConfig) -> list[AttackTrajectory]:
    """Vectorized run_attack over a stack of images.

    Computes the same per-image trajectories as mapping run_attack (up to
    floating-point summation order inside the batched matmuls) in one pass;
    images whose score goes non-finite are frozen and their trajectories
    truncated, as in run_attack.
    """
    x0 = np.asarray(images, dtype=np.float64)
    n = len(x0)
    flat_axes = tuple(range(1, x0.ndim))
    sign = 1.0 if cfg.direction == INCREASE else -1.0

    values, grads = scorer.score_and_gradient_batch(x0)
    active = np.isfinite(values)
    rows: list[list[tuple[int, float, float, float]]] = [[] for _ in range(n)]
    for i in np.flatnonzero(active):
        rows[i].append((0, float(values[i]), 0.0, 0.0))

    x = x0.copy()
    mask_shape = (n,) + (1,) * (x0.ndim - 1)
    for t in range(1, cfg.steps + 1):
        if not active.any():
            break
        g = np.where(np.isfinite(grads), grads, 0.0)
        if cfg.method == FGSM:
            step = sign * cfg.epsilon * np.sign(g)
        else:
            step = sign * cfg.epsilon * g
        x_new = x + step
        if cfg.clamp_pixels:
            x_new = np.clip(x_new, 0.0, 1.0)
        x = np.where(active.reshape(mask_shape), x_new, x)
        delta = x - x0
        l2 = np.sqrt(np.sum(delta * delta, axis=flat_axes))
        linf = np.max(np.abs(delta), axis=flat_axes)
        if t < cfg.steps:
            values, grads = scorer.score_and_gradient_batch(x)
        else:
            values = np.asarray(scorer.score_batch(x), dtype=np.float64)
        still = np.isfinite(values)
        for i in np.flatnonzero(active & still):
            rows[i].append((t, float(values[i]), float(l2[i]), float(linf[i])))
        active = active & still

    out = []
    for i in range(n):
        arr = np.array(rows[i], dtype=np.float64).reshape(len(rows[i]), 4)
        out.append(
            AttackTrajectory(
                steps=arr[:, 0].astype(np.int64),
                scores=arr[:, 1],
                l2=arr[:, 2],
                linf=arr[:, 3],
                final_image=x[i],
                truncated=len(rows[i]) != cfg.steps + 1,
            )
        )
    return out


class _ResizedScorer:
    """score(resize(x)) with the gradient pulled back through the resize.

    The pullback uses the exact adjoint of the pre-clamp bilinear map; with
    pixel clamping on, iterates stay in [0,1] where the output clamp of
    resize_bilinear is inactive, so the gradient is exact.
    """

    def __init__(self, scorer, target_h: int, target_w: int, in_h: int, in_w: int):
        self.scorer = scorer
        self.target_h, self.target_w = target_h, target_w
        self.in_h, self.in_w = in_h, in_w

    def score(self, img) -> float:
        return self.scorer.score(resize_bilinear(img, self.target_h, self.target_w))

    def score_and_gradient(self, img):
        value, grad = self.scorer.score_and_gradient(
            resize_bilinear(img, self.target_h, self.target_w)
        )
        return value, resize_adjoint(grad, self.in_h, self.in_w)

    def score_batch(self, images) -> np.ndarray:
        return self.scorer.score_batch(
            resize_bilinear_batch(images, self.target_h, self.target_w)
        )

    def score_and_gradient_batch(self, images):
        values, grads = self.scorer.score_and_gradient_batch(
            resize_bilinear_batch(images, self.target_h, self.target_w)
        )
        return values, resize_adjoint_batch(grads, self.in_h, self.in_w)


def run_attack_lowres(
    scorer, img, target_h: int, target_w: int, cfg: AttackConfig
) -> AttackTrajectory:
    """Attack a low-resolution image through an upsampling into the scorer.

    The iterate is the low-resolution image; norms are measured on the
    low-resolution perturbation.
    """
    img = np.asarray(img, dtype=np.float64)
    wrapped = _ResizedScorer(scorer, target_h, target_w, img.shape[0], img.shape[1])
    return run_attack(wrapped, img, cfg)


def run_attack_batch_lowres(
    scorer, images, target_h: int, target_w: int, cfg: AttackConfig
) -> list[AttackTrajectory]:
    """Vectorized run_attack_lowres over a stack of low-resolution images."""
    images = np.asarray(images, dtype=np.float64)
    wrapped = _ResizedScorer(scorer, target_h, target_w, images.shape[1], images.shape[2])
    return run_attack_batch(wrapped, images, cfg)


def write_trajectories_csv(trajectories, path) -> None:
    """One CSV per attacked batch: image_id, step, score, l2_norm, linf_norm."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAJECTORY_COLUMNS)
            for image_id, traj in enumerate(trajectories):
                for i in range(len(traj)):
                    writer.writerow(
                        [
                            image_id,
                            int(traj.steps[i]),
                            repr(float(traj.scores[i])),
                            repr(float(traj.l2[i])),
                            repr(float(traj.linf[i])),
                        ]
                    )
    except OSError as exc:
        raise IoError(str(exc)) from exc
