"""Experiment configuration: a flat key-value file with sections.

The grammar is INI as understood by configparser: `[section]` headers and
`key = value` lines, `#` comments. Five sections are recognized
(experiment, data, model, train, attack, evaluation); every key has a
default, so an empty file is a valid config. render_config writes every
resolved key back out, and parse/render round-trip losslessly - the
rendered form is what gets archived next to experiment outputs and hashed
into result sidecars, so a run can always be reproduced from its output
directory alone.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

METHOD_TOKENS = ("md", "rmd", "msp", "clip", "ensemble-md", "ensemble-rmd")
METHOD_ALIASES = {"ensemble": "ensemble-md"}
SOURCES = ("synthetic", "cifar", "embeddings")


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    classes: int = 10
    height: int = 32
    width: int = 32
    channels: int = 3
    latent_dim: int = 16
    separation: float = 1.3
    ood_mode: str = "near"  # near | far | both
    n_train_per_class: int = 100
    n_eval_in: int = 256
    n_eval_out: int = 128
    n_bank_per_class: int = 20
    in_path: str = ""
    ood_path: str = ""


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (256, 128)
    embedding_dim: int = 64
    checkpoint: str = ""


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.015
    weight_decay: float = 1e-5


@dataclass(frozen=True)
class AttackSection:
    method: str = "fgsm"  # fgsm | grad
    epsilon: float = 3e-4
    steps: int = 30
    direction: str = "decrease"  # decrease | increase
    clamp: bool = True
    low_res: bool = False
    low_res_height: int = 8
    low_res_width: int = 8


@dataclass(frozen=True)
class EvalSection:
    norm: str = "linf"  # linf | l2
    n_budgets: int = 13
    report_budget: str = "auto"  # "auto" (= max reachable norm) or a float


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/experiment"
    methods: tuple[str, ...] = ("md", "rmd")
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluation: EvalSection = field(default_factory=EvalSection)


def _parse_scalar(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r}") from exc


def _parse_int_tuple(raw: str, where: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r}") from exc


def _parse_section(cls, parser: configparser.ConfigParser, name: str):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    if parser.has_section(name):
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key [{name}] {key}")
            f = known[key]
            if f.name == "hidden":
                kwargs[key] = _parse_int_tuple(raw, f"[{name}] {key}")
            else:
                kwargs[key] = _parse_scalar(type(getattr(cls(), key)), raw, f"[{name}] {key}")
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    known_sections = {"experiment", "data", "model", "train", "attack", "evaluation"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    seed, out_dir, methods = 0, ExperimentConfig().out_dir, ExperimentConfig().methods
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "seed":
                seed = _parse_scalar(int, raw, "[experiment] seed")
            elif key == "out_dir":
                out_dir = raw.strip()
            elif key == "methods":
                tokens = [t.strip().lower() for t in raw.split(",") if t.strip()]
                methods = tuple(METHOD_ALIASES.get(t, t) for t in tokens)
            else:
                raise ConfigError(f"unknown key [experiment] {key}")

    return ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        methods=methods,
        data=_parse_section(DataSection, parser, "data"),
        model=_parse_section(ModelSection, parser, "model"),
        train=_parse_section(TrainSection, parser, "train"),
        attack=_parse_section(AttackSection, parser, "attack"),
        evaluation=_parse_section(EvalSection, parser, "evaluation"),
    )


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    """Write every resolved key; parse_config(render_config(c)) == c."""
    out = io.StringIO()
    out.write("[experiment]\n")
    out.write(f"seed = {cfg.seed}\n")
    out.write(f"out_dir = {cfg.out_dir}\n")
    out.write(f"methods = {','.join(cfg.methods)}\n")
    for name, section in (
        ("data", cfg.data),
        ("model", cfg.model),
        ("train", cfg.train),
        ("attack", cfg.attack),
        ("evaluation", cfg.evaluation),
    ):
        out.write(f"\n[{name}]\n")
        for f in fields(section):
            out.write(f"{f.name} = {format_value(getattr(section, f.name))}\n")
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Apply flag-style overrides given as {"section.key": "raw value"}."""
    if not overrides:
        return cfg
    text = render_config(cfg)
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if not parser.has_section(section):
            raise ConfigError(f"unknown section in override {dotted!r}")
        parser.set(section, key, raw)
    buf = io.StringIO()
    parser.write(buf)
    return parse_config(buf.getvalue())


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return apply_overrides(parse_config(text), overrides or {})


def validate_config(cfg: ExperimentConfig) -> None:
    """Check invariants the dataclasses cannot: tokens, ranges, paths."""
    if not cfg.methods:
        raise ConfigError("method list is empty")
    for token in cfg.methods:
        if token not in METHOD_TOKENS:
            raise ConfigError(f"unknown method {token!r} (valid: {', '.join(METHOD_TOKENS)})")
    d = cfg.data
    if d.source not in SOURCES:
        raise ConfigError(f"unknown data source {d.source!r}")
    if d.source == "synthetic":
        if d.ood_mode not in ("near", "far", "both"):
            raise ConfigError(f"ood_mode must be near, far or both, got {d.ood_mode!r}")
        if d.classes < 2 or d.separation <= 0:
            raise ConfigError("synthetic data needs classes >= 2 and separation > 0")
        if min(d.n_train_per_class, d.n_eval_in, d.n_eval_out, d.n_bank_per_class) < 1:
            raise ConfigError("synthetic split sizes must be >= 1")
    else:
        for label, p in (("in_path", d.in_path), ("ood_path", d.ood_path)):
            if not p:
                raise ConfigError(f"data source {d.source!r} requires {label}")
            if not Path(p).exists():
                raise ConfigError(f"{label} does not exist: {p}")
    if d.source == "embeddings":
        bad = [t for t in cfg.methods if t not in ("md", "rmd")]
        if bad:
            raise ConfigError(
                f"embedding source supports only md/rmd (no attack surface), got {bad}"
            )
    if cfg.model.checkpoint and not Path(cfg.model.checkpoint).exists():
        raise ConfigError(f"model checkpoint does not exist: {cfg.model.checkpoint}")
    if cfg.train.epochs < 0:
        raise ConfigError("train epochs must be >= 0")
    if cfg.attack.method not in ("fgsm", "grad"):
        raise ConfigError(f"attack method must be fgsm or grad, got {cfg.attack.method!r}")
    if cfg.attack.direction not in ("decrease", "increase"):
        raise ConfigError("attack direction must be decrease or increase")
    if cfg.attack.epsilon <= 0 or cfg.attack.steps < 1:
        raise ConfigError("attack needs epsilon > 0 and steps >= 1")
    if cfg.evaluation.norm not in ("linf", "l2"):
        raise ConfigError("evaluation norm must be linf or l2")
    if cfg.evaluation.n_budgets < 2:
        raise ConfigError("need at least 2 budget points")
    if cfg.evaluation.report_budget != "auto":
        try:
            b = float(cfg.evaluation.report_budget)
        except ValueError as exc:
            raise ConfigError("report_budget must be 'auto' or a number") from exc
        if b < 0:
            raise ConfigError("report_budget must be >= 0")


def with_out_dir(cfg: ExperimentConfig, out_dir: str) -> ExperimentConfig:
    return replace(cfg, out_dir=out_dir)
