"""AUROC, score-vs-norm interpolation, robustness curves, and reports.

AUROC here is the exact Mann-Whitney rank statistic (ties counted 1/2),
not trapezoidal ROC integration: it is deterministic and directly
checkable against brute-force pair counting. Scores follow the package
convention (larger = more OOD), so a perfect detector scores 1.0.

A robustness curve is built the way the score-vs-norm bands are reduced
to a single number: each attacked image's trajectory becomes a piecewise
linear function score(norm); at every requested norm budget the
interpolated out-scores are compared against the fixed unperturbed
in-scores to get one AUROC per budget.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackTrajectory
from .errors import EmptyInput, IoError, NonFiniteValue

L2 = "l2"
LINF = "linf"
_NORM_LABEL = {L2: "L2", LINF: "Linf"}


def auroc(in_scores, out_scores) -> float:
    """P(random out-score > random in-score), ties counted 1/2."""
    in_scores = np.asarray(in_scores, dtype=np.float64)
    out_scores = np.asarray(out_scores, dtype=np.float64)
    if in_scores.size == 0 or out_scores.size == 0:
        raise EmptyInput("both score populations must be non-empty")
    if not (np.all(np.isfinite(in_scores)) and np.all(np.isfinite(out_scores))):
        raise NonFiniteValue("scores must be finite")
    n, m = in_scores.size, out_scores.size
    ranks = rankdata(np.concatenate([in_scores, out_scores]))
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def _norm_axis(traj: AttackTrajectory, norm_kind: str) -> np.ndarray:
    if norm_kind == L2:
        return traj.l2
    if norm_kind == LINF:
        return traj.linf
    raise ValueError(f"norm kind must be {L2!r} or {LINF!r}, got {norm_kind!r}")


def interpolate_score(traj: AttackTrajectory, norm_kind: str, budget: float) -> float:
    """Piecewise-linear score at a given perturbation-norm budget.

    Exact at recorded knots; budgets beyond the trajectory clamp to the
    final score. Clamping can make recorded norms dip, so the abscissa is
    the running maximum of the norm; where several steps share an abscissa
    the most-perturbed step wins.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if len(traj) == 0:
        raise ValueError("trajectory is empty")
    xs = np.maximum.accumulate(_norm_axis(traj, norm_kind))
    ys = traj.scores
    # keep the last knot at each distinct abscissa
    keep = np.append(xs[1:] != xs[:-1], True)
    return float(np.interp(budget, xs[keep], ys[keep]))


def has_nonmonotone_norms(traj: AttackTrajectory, norm_kind: str) -> bool:
    xs = _norm_axis(traj, norm_kind)
    return bool(np.any(np.diff(xs) < 0))


@dataclass(frozen=True)
class RobustnessCurve:
    """AUROC as a function of perturbation-norm budget."""

    norm_kind: str
    budgets: np.ndarray
    aurocs: np.ndarray
    baseline: float
    n_in: int
    n_out: int
    method: str = ""
    nonmonotone_norms: bool = False

    def __post_init__(self):
        if len(self.budgets) != len(self.aurocs):
            raise ValueError("budgets and aurocs must have equal length")
        if len(self.budgets) == 0 or self.budgets[0] != 0.0:
            raise ValueError("budgets must start at 0")
        if np.any(np.diff(self.budgets) <= 0):
            raise ValueError("budgets must be strictly increasing")
        if self.aurocs[0] != self.baseline:
            raise ValueError("curve at budget 0 must equal the baseline")


def robustness_curve(
    in_scores,
    trajectories: Sequence[AttackTrajectory],
    norm_kind: str,
    budgets,
    method: str = "",
) -> RobustnessCurve:
    """Interpolate every trajectory at each budget and compute the AUROC
    of the interpolated out-scores against the fixed in-scores."""
    if len(trajectories) == 0:
        raise EmptyInput("need at least one trajectory")
    budgets = np.asarray(budgets, dtype=np.float64)
    in_scores = np.asarray(in_scores, dtype=np.float64)
    aurocs = np.empty_like(budgets)
    for i, b in enumerate(budgets):
        out_scores = [interpolate_score(t, norm_kind, b) for t in trajectories]
        aurocs[i] = auroc(in_scores, out_scores)
    nonmono = any(has_nonmonotone_norms(t, norm_kind) for t in trajectories)
    return RobustnessCurve(
        norm_kind=norm_kind,
        budgets=budgets,
        aurocs=aurocs,
        baseline=float(aurocs[0]),
        n_in=len(in_scores),
        n_out=len(trajectories),
        method=method,
        nonmonotone_norms=nonmono,
    )


@dataclass(frozen=True)
class DeltaReport:
    """AUROC before vs at a fixed perturbation budget, and their difference."""

    method: str
    auroc_before: float
    auroc_at_budget: float
    delta: float
    norm_kind: str
    budget: float

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "auroc_before": self.auroc_before,
            "auroc_at_budget": self.auroc_at_budget,
            "delta": self.delta,
            "norm_kind": self.norm_kind,
            "budget": self.budget,
        }


def delta_report(curve: RobustnessCurve, budget: float) -> DeltaReport:
    """Linear interpolation of the curve at the budget, delta vs baseline."""
    if budget < 0 or budget > curve.budgets[-1]:
        raise ValueError(
            f"budget {budget} outside the sampled range [0, {curve.budgets[-1]}]"
        )
    at = float(np.interp(budget, curve.budgets, curve.aurocs))
    return DeltaReport(
        method=curve.method,
        auroc_before=curve.baseline,
        auroc_at_budget=at,
        delta=at - curve.baseline,
        norm_kind=curve.norm_kind,
        budget=float(budget),
    )


def write_curve_csv(curve: RobustnessCurve, path, config_hash: str = "") -> None:
    """Curve CSV (budget, auroc, n_in, n_out) plus a JSON sidecar with the
    method tag, norm kind, and config hash."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["budget", "auroc", "n_in", "n_out"])
            for b, a in zip(curve.budgets, curve.aurocs):
                writer.writerow([repr(float(b)), repr(float(a)), curve.n_in, curve.n_out])
        sidecar = {
            "method": curve.method,
            "norm_kind": curve.norm_kind,
            "config_hash": config_hash,
            "baseline_auroc": curve.baseline,
            "nonmonotone_norms": curve.nonmonotone_norms,
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_curve_csv(path) -> RobustnessCurve:
    """Inverse of write_curve_csv (sidecar supplies method and norm kind)."""
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
        budgets, aurocs, n_in, n_out = [], [], 0, 0
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                budgets.append(float(row["budget"]))
                aurocs.append(float(row["auroc"]))
                n_in, n_out = int(row["n_in"]), int(row["n_out"])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return RobustnessCurve(
        norm_kind=sidecar["norm_kind"],
        budgets=np.asarray(budgets),
        aurocs=np.asarray(aurocs),
        baseline=aurocs[0],
        n_in=n_in,
        n_out=n_out,
        method=sidecar["method"],
        nonmonotone_norms=bool(sidecar.get("nonmonotone_norms", False)),
    )


def write_delta_reports_json(reports: Sequence[DeltaReport], path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


_PALETTE = ("#1f77b4", "#d62728", "#ff7f0e", "#9467bd", "#2ca02c", "#8c564b")


def render_curves_svg(curves: Sequence[RobustnessCurve], path, title: str = "") -> None:
    """Self-contained SVG: one polyline per curve, AUROC vs norm budget."""
    if not curves:
        raise ValueError("need at least one curve")
    width, height = 640, 440
    left, right, top, bottom = 70, 20, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    x_max = max(float(c.budgets[-1]) for c in curves) or 1.0

    def sx(x):
        return left + plot_w * x / x_max

    def sy(y):
        return top + plot_h * (1.0 - y)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{title}</text>'
        )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{left + plot_w}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{frac:.2f}</text>'
        )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = sx(frac * x_max)
        parts.append(
            f'<text x="{x:.1f}" y="{top + plot_h + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{frac * x_max:.4g}</text>'
        )
    parts.append(
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="black" stroke-width="1"/>'
    )
    norm_label = _NORM_LABEL.get(curves[0].norm_kind, curves[0].norm_kind)
    parts.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">perturbation budget ({norm_label} norm)</text>'
    )
    parts.append(
        f'<text x="18" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {top + plot_h / 2:.1f})">AUROC</text>'
    )
    for i, curve in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(
            f"{sx(float(b)):.2f},{sy(float(a)):.2f}"
            for b, a in zip(curve.budgets, curve.aurocs)
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        ly = top + 16 + 16 * i
        parts.append(
            f'<line x1="{left + plot_w - 120}" y1="{ly - 4}" x2="{left + plot_w - 96}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{left + plot_w - 90}" y="{ly}" font-family="sans-serif" '
            f'font-size="12">{curve.method or f"curve {i}"}</text>'
        )
    parts.append("</svg>")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc
