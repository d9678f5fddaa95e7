"""Subcommand pipeline: generate, train, fit, attack-eval, report.

Every run is driven by one config file (see config.py for the grammar);
command-line flags override file values, and the fully resolved config is
archived as resolved.cfg in the output directory so any experiment can be
reproduced byte-for-byte from its own outputs.

Exit codes: 0 success, 2 config error, 3 runtime numerical error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import detectors as det_mod
from . import model as model_mod
from .attacks import (
    AttackConfig,
    run_attack_batch,
    run_attack_batch_lowres,
    write_trajectories_csv,
)
from .config import (
    DataSection,
    ExperimentConfig,
    apply_overrides,
    config_hash,
    format_value,
    load_config,
    render_config,
    validate_config,
)
from .data import (
    EmbeddingDataset,
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    load_cifar_binary,
    load_embeddings,
    resize_bilinear_batch,
)
from .errors import ConfigError, OodLabError
from .evaluation import (
    DeltaReport,
    auroc,
    delta_report,
    read_curve_csv,
    render_curves_svg,
    robustness_curve,
    write_curve_csv,
    write_delta_reports_json,
)
from .model import TrainConfig


class StageError(OodLabError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except OodLabError as exc:
        raise StageError(name, exc) from exc


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _take_per_class(ds: LabeledDataset, block: int, start: int, count: int,
                    limit: int | None = None) -> LabeledDataset:
    """Slice `count` examples per class out of class-contiguous blocks.

    Indices are interleaved across classes before truncation so a limit
    smaller than count*K stays as class-balanced as possible.
    """
    idx = np.array(
        [c * block + start + j for j in range(count) for c in range(ds.num_classes)]
    )
    if limit is not None:
        idx = idx[:limit]
    return ds.subset(idx)


def _synthetic_bundle(cfg: ExperimentConfig):
    """Build (in_train, in_eval, {mode: (ood_bank, ood_eval)}) splits.

    One generate_synthetic call per OOD mode; the in-distribution side is
    identical across modes because the generator consumes its RNG stream
    identically for near and far.
    """
    d = cfg.data
    modes = ("near", "far") if d.ood_mode == "both" else (d.ood_mode,)
    k = d.classes
    eval_in_pc = _ceil_div(d.n_eval_in, k)
    eval_out_pc = _ceil_div(d.n_eval_out, k)
    n_pc = max(d.n_train_per_class + eval_in_pc, d.n_bank_per_class + eval_out_pc)

    in_train = in_eval = None
    ood = {}
    for mode in modes:
        spec = SyntheticSpec(
            num_classes=k,
            height=d.height,
            width=d.width,
            channels=d.channels,
            latent_dim=d.latent_dim,
            separation=d.separation,
            ood_mode=mode,
            seed=cfg.seed,
        )
        in_set, ood_set = generate_synthetic(spec, n_pc)
        if in_train is None:
            in_train = _take_per_class(in_set, n_pc, 0, d.n_train_per_class)
            in_eval = _take_per_class(
                in_set, n_pc, d.n_train_per_class, eval_in_pc, limit=d.n_eval_in
            )
        bank = _take_per_class(ood_set, n_pc, 0, d.n_bank_per_class)
        eval_set = _take_per_class(
            ood_set, n_pc, d.n_bank_per_class, eval_out_pc, limit=d.n_eval_out
        )
        ood[mode] = (bank, eval_set)
    return in_train, in_eval, ood


def _cifar_bundle(cfg: ExperimentConfig):
    """Record-order splits of two CIFAR binary files (in and ood)."""
    d = cfg.data
    in_set = load_cifar_binary(d.in_path)
    ood_set = load_cifar_binary(d.ood_path)
    n_train = d.n_train_per_class * max(in_set.num_classes, 1)
    n_bank = d.n_bank_per_class * max(ood_set.num_classes, 1)
    if len(in_set) < n_train + d.n_eval_in:
        raise ConfigError(f"in_path has {len(in_set)} records, need {n_train + d.n_eval_in}")
    if len(ood_set) < n_bank + d.n_eval_out:
        raise ConfigError(f"ood_path has {len(ood_set)} records, need {n_bank + d.n_eval_out}")
    in_train = in_set.subset(np.arange(0, n_train))
    in_eval = in_set.subset(np.arange(n_train, n_train + d.n_eval_in))
    bank = ood_set.subset(np.arange(0, n_bank))
    eval_set = ood_set.subset(np.arange(n_bank, n_bank + d.n_eval_out))
    return in_train, in_eval, {"ood": (bank, eval_set)}


def _build_datasets(cfg: ExperimentConfig):
    if cfg.data.source == "synthetic":
        return _synthetic_bundle(cfg)
    return _cifar_bundle(cfg)


def _train_models(cfg: ExperimentConfig, in_train: LabeledDataset, n_models: int,
                  log_rows: list | None = None):
    """Train (or load) the models; member i uses seed cfg.seed + i."""
    models = []
    for i in range(n_models):
        if i == 0 and cfg.model.checkpoint:
            models.append(model_mod.load_model(cfg.model.checkpoint))
            continue
        tc = TrainConfig(
            epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate,
            weight_decay=cfg.train.weight_decay,
            seed=cfg.seed + i,
        )
        callback = None
        if log_rows is not None and i == 0:
            callback = lambda epoch, loss, acc: log_rows.append((epoch, loss, acc))
        models.append(
            model_mod.train(
                in_train,
                tc,
                hidden_widths=cfg.model.hidden,
                embedding_dim=cfg.model.embedding_dim,
                epoch_callback=callback,
            )
        )
    return models


def _fit_detectors(models, in_train: LabeledDataset):
    dets = []
    for m in models:
        emb = EmbeddingDataset(model_mod.embed_many(m, in_train.images), in_train.labels)
        dets.append(det_mod.fit_gaussians(emb))
    return dets


def _make_scorer(token: str, models, dets, bank):
    if token == "md":
        return det_mod.MahalanobisScorer(models[0], dets[0])
    if token == "rmd":
        return det_mod.RelativeMahalanobisScorer(models[0], dets[0])
    if token == "msp":
        return det_mod.MspScorer(models[0])
    if token == "clip":
        return det_mod.ClipScorer(models[0], bank)
    if token == "ensemble-md":
        members = [det_mod.MahalanobisScorer(m, d) for m, d in zip(models, dets)]
        return det_mod.DetectorEnsemble(members)
    if token == "ensemble-rmd":
        members = [det_mod.RelativeMahalanobisScorer(m, d) for m, d in zip(models, dets)]
        return det_mod.DetectorEnsemble(members)
    raise ConfigError(f"unknown method {token!r}")


def _budget_grid(cfg: ExperimentConfig, n_pixels: int, trajectories) -> np.ndarray:
    """Method-independent budget grid from 0 to the attack's reachable max.

    For FGSM the reachable maximum is analytic (steps * epsilon per pixel);
    for raw-gradient attacks it is the largest norm actually measured.
    """
    a, e = cfg.attack, cfg.evaluation
    if a.method == "fgsm":
        top = a.steps * a.epsilon * (1.0 if e.norm == "linf" else math.sqrt(n_pixels))
    else:
        top = max(
            (float(np.max(t.linf if e.norm == "linf" else t.l2)) for t in trajectories if len(t)),
            default=0.0,
        )
    if top <= 0:
        top = a.steps * a.epsilon
    return np.linspace(0.0, top, e.n_budgets)


def _report_budget(cfg: ExperimentConfig, budgets: np.ndarray) -> float:
    if cfg.evaluation.report_budget == "auto":
        return float(budgets[-1])
    return float(cfg.evaluation.report_budget)


def _write_resolved(cfg: ExperimentConfig, out: Path) -> str:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(render_config(cfg))
    return config_hash(cfg)


def cmd_generate(cfg: ExperimentConfig) -> int:
    if cfg.data.source != "synthetic":
        raise ConfigError("generate only applies to the synthetic data source")
    out = Path(cfg.out_dir)
    _write_resolved(cfg, out)
    data_dir = out / "datasets"
    data_dir.mkdir(parents=True, exist_ok=True)
    with _stage("generate"):
        in_train, in_eval, ood = _build_datasets(cfg)
        _save_dataset(in_train, data_dir / "in_train.npz")
        _save_dataset(in_eval, data_dir / "in_eval.npz")
        for mode, (bank, eval_set) in ood.items():
            _save_dataset(bank, data_dir / f"ood_bank_{mode}.npz")
            _save_dataset(eval_set, data_dir / f"ood_eval_{mode}.npz")
    (data_dir / "manifest.cfg").write_text(_manifest_text(cfg))
    print(f"wrote datasets and manifest to {data_dir}")
    return 0


def _manifest_text(cfg: ExperimentConfig) -> str:
    """Generation provenance: the seed and the full [data] section, in the
    config grammar so it round-trips through the config parser."""
    lines = ["[experiment]", f"seed = {cfg.seed}", "", "[data]"]
    lines += [f"{f.name} = {format_value(getattr(cfg.data, f.name))}" for f in fields(DataSection)]
    return "\n".join(lines) + "\n"


def _save_dataset(ds: LabeledDataset, path: Path) -> None:
    np.savez(path, images=ds.images, labels=ds.labels, num_classes=ds.num_classes)


def load_dataset_npz(path) -> LabeledDataset:
    with np.load(path) as payload:
        return LabeledDataset(
            payload["images"], payload["labels"], int(payload["num_classes"])
        )


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    _write_resolved(cfg, out)
    with _stage("data"):
        in_train, _, _ = _build_datasets(cfg)
    log_rows: list = []
    with _stage("train"):
        models = _train_models(cfg, in_train, 1, log_rows)
        model_mod.save_model(models[0], out / "model.oodm")
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for epoch, loss, acc in log_rows:
            writer.writerow([epoch, repr(loss), repr(acc)])
    final_acc = model_mod.training_accuracy(models[0], in_train)
    print(f"final training accuracy: {final_acc:.4f}")
    print(f"checkpoint: {out / 'model.oodm'}")
    return 0


def cmd_fit(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    _write_resolved(cfg, out)
    if cfg.data.source == "embeddings":
        with _stage("fit"):
            emb = load_embeddings(cfg.data.in_path)
            if emb.labels is None:
                raise ConfigError("in_path embeddings carry no labels; cannot fit")
            det = det_mod.fit_gaussians(emb)
            det_mod.save_detector(det, out / "detector.oodd")
    else:
        with _stage("data"):
            in_train, _, _ = _build_datasets(cfg)
        with _stage("train"):
            models = _train_models(cfg, in_train, 1)
        with _stage("fit"):
            det = _fit_detectors(models, in_train)[0]
            det_mod.save_detector(det, out / "detector.oodd")
    print(f"detector: {out / 'detector.oodd'}")
    return 0


def _attack_eval_embeddings(cfg: ExperimentConfig, out: Path) -> int:
    """Detector-only evaluation for precomputed embeddings (no attacks)."""
    with _stage("fit"):
        in_emb = load_embeddings(cfg.data.in_path)
        if in_emb.labels is None:
            raise ConfigError("in_path embeddings carry no labels; cannot fit")
        ood_emb = load_embeddings(cfg.data.ood_path)
        det = det_mod.fit_gaussians(in_emb)
    with _stage("evaluate"):
        reports = []
        for token in cfg.methods:
            score_fn = det_mod.md_score if token == "md" else det_mod.rmd_score
            in_scores = [score_fn(det, z).value for z in in_emb.embeddings]
            out_scores = [score_fn(det, z).value for z in ood_emb.embeddings]
            base = auroc(in_scores, out_scores)
            reports.append(
                DeltaReport(
                    method=token.upper(),
                    auroc_before=base,
                    auroc_at_budget=base,
                    delta=0.0,
                    norm_kind=cfg.evaluation.norm,
                    budget=0.0,
                )
            )
            print(f"{token}: unperturbed AUROC {base:.4f} (n_in={len(in_scores)}, "
                  f"n_out={len(out_scores)})")
        write_delta_reports_json(reports, out / "delta_reports.json")
    return 0


def cmd_attack_eval(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    chash = _write_resolved(cfg, out)
    if cfg.data.source == "embeddings":
        return _attack_eval_embeddings(cfg, out)

    with _stage("data"):
        in_train, in_eval, ood = _build_datasets(cfg)
    n_models = 2 if any(t.startswith("ensemble") for t in cfg.methods) else 1
    with _stage("train"):
        models = _train_models(cfg, in_train, n_models)
    with _stage("fit"):
        dets = _fit_detectors(models, in_train)

    a = cfg.attack
    acfg = AttackConfig(
        method=a.method,
        epsilon=a.epsilon,
        steps=a.steps,
        direction=a.direction,
        clamp_pixels=a.clamp,
        low_res=a.low_res,
    )
    norm = cfg.evaluation.norm
    multi_mode = len(ood) > 1
    for mode, (bank, eval_set) in ood.items():
        suffix = f"_{mode}" if multi_mode else ""
        curves = []
        per_method = {}
        with _stage(f"attack{suffix}"):
            word_bank = None
            if "clip" in cfg.methods:
                word_bank = model_mod.build_word_bank(models[0], in_train, bank)
            for token in cfg.methods:
                scorer = _make_scorer(token, models, dets, word_bank)
                in_scores = scorer.score_batch(in_eval.images)
                if a.low_res:
                    small = resize_bilinear_batch(
                        eval_set.images, a.low_res_height, a.low_res_width
                    )
                    shape = eval_set.image_shape
                    trajs = run_attack_batch_lowres(
                        scorer, small, shape[0], shape[1], acfg
                    )
                else:
                    trajs = run_attack_batch(scorer, eval_set.images, acfg)
                write_trajectories_csv(trajs, out / f"trajectories_{token}{suffix}.csv")
                per_method[token] = (in_scores, trajs)
        with _stage(f"evaluate{suffix}"):
            shape = eval_set.image_shape
            n_pixels = (
                a.low_res_height * a.low_res_width * shape[2] if a.low_res
                else shape[0] * shape[1] * shape[2]
            )
            budgets = _budget_grid(
                cfg, n_pixels, [t for _, ts in per_method.values() for t in ts]
            )
            for token in cfg.methods:
                in_scores, trajs = per_method[token]
                live = [t for t in trajs if len(t)]
                curve = robustness_curve(in_scores, live, norm, budgets, method=token.upper())
                write_curve_csv(curve, out / f"curve_{token}{suffix}.csv", chash)
                curves.append(curve)
            render_curves_svg(curves, out / f"curves{suffix}.svg",
                              title=f"OOD robustness{suffix.replace('_', ' ')}")
            budget = _report_budget(cfg, budgets)
            reports = [delta_report(c, budget) for c in curves]
            write_delta_reports_json(reports, out / f"delta_reports{suffix}.json")
            for r in reports:
                print(
                    f"{r.method}{suffix}: AUROC {r.auroc_before:.4f} -> "
                    f"{r.auroc_at_budget:.4f} at {norm}={r.budget:.6g} "
                    f"(delta {r.delta:+.4f})"
                )
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    if not out.exists():
        raise ConfigError(f"output directory {out} does not exist")
    groups: dict[str, list] = {}
    for path in sorted(out.glob("curve_*.csv")):
        stem = path.name[len("curve_"):-len(".csv")]
        suffix = ""
        for mode in ("_near", "_far", "_ood"):
            if stem.endswith(mode):
                suffix = mode
                break
        groups.setdefault(suffix, []).append(path)
    if not groups:
        raise ConfigError(f"no curve CSVs found in {out}")
    with _stage("report"):
        for suffix, paths in groups.items():
            reports = []
            for path in paths:
                curve = read_curve_csv(path)
                budget = (
                    float(curve.budgets[-1])
                    if cfg.evaluation.report_budget == "auto"
                    else float(cfg.evaluation.report_budget)
                )
                reports.append(delta_report(curve, budget))
            write_delta_reports_json(reports, out / f"delta_reports{suffix}.json")
            for r in reports:
                print(
                    f"{r.method}{suffix}: AUROC {r.auroc_before:.4f} -> "
                    f"{r.auroc_at_budget:.4f} (delta {r.delta:+.4f})"
                )
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "fit": cmd_fit,
    "attack-eval": cmd_attack_eval,
    "report": cmd_report,
}


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodlab",
        description="Adversarial robustness experiments on OOD detection scores.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "generate synthetic datasets and a manifest"),
        ("train", "train the classifier and write a checkpoint"),
        ("fit", "fit the Gaussian detector and write a checkpoint"),
        ("attack-eval", "run attacks and emit curves and reports"),
        ("report", "recompute delta reports from saved curves"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="experiment config file")
        sp.add_argument("--seed", type=int, default=None, help="override global seed")
        sp.add_argument("--out", default=None, help="override output directory")
        sp.add_argument("--method", default=None,
                        help="comma list: md,rmd,msp,clip,ensemble-md,ensemble-rmd")
        sp.add_argument("--norm", choices=("l2", "linf"), default=None)
        sp.add_argument("--epsilon", type=float, default=None, help="attack step size")
        sp.add_argument("--steps", type=int, default=None, help="attack step count")
        sp.add_argument("--budget", type=float, default=None,
                        help="norm budget for delta reports")
        sp.add_argument("--low-res", action="store_true",
                        help="attack a downsampled image through the resize")
        sp.add_argument("--no-clamp", action="store_true",
                        help="do not clamp attacked pixels to [0,1]")
    return parser


def _overrides_from(args: argparse.Namespace) -> dict[str, str]:
    ov: dict[str, str] = {}
    if args.seed is not None:
        ov["experiment.seed"] = str(args.seed)
    if args.out is not None:
        ov["experiment.out_dir"] = args.out
    if args.method is not None:
        ov["experiment.methods"] = args.method
    if args.norm is not None:
        ov["evaluation.norm"] = args.norm
    if args.epsilon is not None:
        ov["attack.epsilon"] = repr(args.epsilon)
    if args.steps is not None:
        ov["attack.steps"] = str(args.steps)
    if args.budget is not None:
        ov["evaluation.report_budget"] = repr(args.budget)
    if args.low_res:
        ov["attack.low_res"] = "true"
    if args.no_clamp:
        ov["attack.clamp"] = "false"
    return ov


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        if args.config is not None:
            cfg = load_config(args.config, _overrides_from(args))
        else:
            cfg = apply_overrides(ExperimentConfig(), _overrides_from(args))
        validate_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error in {exc}", file=sys.stderr)
        return 3
    except OodLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
