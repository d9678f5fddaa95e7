import json
from pathlib import Path

import numpy as np
import pytest

from oodlab.cli import main
from oodlab.config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_config,
    parse_config,
    render_config,
    validate_config,
)
from oodlab.data import EmbeddingDataset, save_embeddings
from oodlab.errors import ConfigError

SMALL_CONFIG = """
[experiment]
seed = 3
methods = md,rmd

[data]
classes = 3
height = 8
width = 8
channels = 3
latent_dim = 6
separation = 2.0
n_train_per_class = 40
n_eval_in = 30
n_eval_out = 24
n_bank_per_class = 6

[model]
hidden = 32,16
embedding_dim = 8

[train]
epochs = 8
batch_size = 32
learning_rate = 0.05

[attack]
epsilon = 0.001
steps = 5

[evaluation]
n_budgets = 5
"""


def write_config(tmp_path, text=SMALL_CONFIG, out_dir=None):
    path = tmp_path / "exp.cfg"
    out = out_dir or (tmp_path / "run")
    path.write_text(text + f"\n[experiment]\nout_dir = {out}\n"
                    if "[experiment]" not in text
                    else text.replace("[experiment]", f"[experiment]\nout_dir = {out}", 1))
    return path


class TestConfigParsing:
    def test_defaults_from_empty(self):
        cfg = parse_config("")
        assert cfg.seed == 0
        assert cfg.methods == ("md", "rmd")
        assert cfg.attack.epsilon == 3e-4
        assert cfg.attack.steps == 30

    def test_round_trip_lossless(self):
        cfg = parse_config(SMALL_CONFIG)
        assert parse_config(render_config(cfg)) == cfg

    def test_round_trip_default(self):
        cfg = ExperimentConfig()
        assert parse_config(render_config(cfg)) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config("[attack]\nwarp_factor = 9\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse_config("[warp]\nx = 1\n")

    def test_ensemble_alias(self):
        cfg = parse_config("[experiment]\nmethods = ensemble\n")
        assert cfg.methods == ("ensemble-md",)

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("[train]\nepochs = soon\n")

    def test_overrides(self):
        cfg = apply_overrides(ExperimentConfig(), {"attack.epsilon": "0.01",
                                                   "experiment.seed": "9"})
        assert cfg.attack.epsilon == 0.01
        assert cfg.seed == 9

    def test_hash_changes_with_content(self):
        a = ExperimentConfig()
        b = apply_overrides(a, {"experiment.seed": "1"})
        assert config_hash(a) != config_hash(b)

    def test_validation_rejects_empty_methods(self):
        cfg = apply_overrides(ExperimentConfig(), {"experiment.methods": ""})
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_validation_rejects_unknown_method(self):
        cfg = apply_overrides(ExperimentConfig(), {"experiment.methods": "odin"})
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_validation_rejects_missing_paths(self):
        cfg = apply_overrides(
            ExperimentConfig(),
            {"data.source": "cifar", "data.in_path": "/nope.bin", "data.ood_path": "/nope2.bin"},
        )
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_validation_embeddings_restricts_methods(self, tmp_path):
        p_in = tmp_path / "in.oode"
        p_out = tmp_path / "out.oode"
        save_embeddings(EmbeddingDataset(np.zeros((4, 2)), np.array([0, 0, 1, 1])), p_in)
        save_embeddings(EmbeddingDataset(np.ones((4, 2))), p_out)
        cfg = apply_overrides(
            ExperimentConfig(),
            {"data.source": "embeddings", "data.in_path": str(p_in),
             "data.ood_path": str(p_out), "experiment.methods": "md,msp"},
        )
        with pytest.raises(ConfigError):
            validate_config(cfg)


class TestGenerate:
    def test_identical_manifests(self, tmp_path):
        cfg_path = write_config(tmp_path, out_dir=tmp_path / "a")
        assert main(["generate", "--config", str(cfg_path)]) == 0
        first = (tmp_path / "a" / "datasets" / "manifest.cfg").read_text()
        cfg_path2 = write_config(tmp_path, out_dir=tmp_path / "b")
        assert main(["generate", "--config", str(cfg_path2)]) == 0
        second = (tmp_path / "b" / "datasets" / "manifest.cfg").read_text()
        assert first == second

    def test_both_modes_distinct_files(self, tmp_path):
        text = SMALL_CONFIG + "\n[data]\nood_mode = both\n"
        # configparser forbids duplicate sections; splice the key instead
        text = SMALL_CONFIG.replace("[data]", "[data]\nood_mode = both", 1)
        cfg_path = write_config(tmp_path, text)
        assert main(["generate", "--config", str(cfg_path)]) == 0
        data_dir = tmp_path / "run" / "datasets"
        near = data_dir / "ood_eval_near.npz"
        far = data_dir / "ood_eval_far.npz"
        assert near.exists() and far.exists()
        with np.load(near) as a, np.load(far) as b:
            assert not np.array_equal(a["images"], b["images"])

    def test_manifest_round_trips_through_parser(self, tmp_path):
        cfg_path = write_config(tmp_path)
        main(["generate", "--config", str(cfg_path)])
        manifest = (tmp_path / "run" / "datasets" / "manifest.cfg").read_text()
        parsed = parse_config(manifest)
        original = load_config(cfg_path)
        assert parsed.data == original.data
        assert parsed.seed == original.seed


class TestTrain:
    def test_zero_epochs_emits_initialized_checkpoint(self, tmp_path):
        text = SMALL_CONFIG.replace("epochs = 8", "epochs = 0")
        cfg_path = write_config(tmp_path, text)
        assert main(["train", "--config", str(cfg_path)]) == 0
        from oodlab.model import init_model, load_model

        loaded = load_model(tmp_path / "run" / "model.oodm")
        init = init_model(8 * 8 * 3, 3, (32, 16), 8, seed=3)
        for a, b in zip(loaded.weights, init.weights):
            assert np.array_equal(a, b.astype(np.float32).astype(np.float64))

    def test_rerun_identical_checkpoint(self, tmp_path):
        cfg_path = write_config(tmp_path, out_dir=tmp_path / "r1")
        main(["train", "--config", str(cfg_path)])
        first = (tmp_path / "r1" / "model.oodm").read_bytes()
        cfg_path2 = write_config(tmp_path, out_dir=tmp_path / "r2")
        main(["train", "--config", str(cfg_path2)])
        second = (tmp_path / "r2" / "model.oodm").read_bytes()
        assert first == second

    def test_log_rows_equal_epochs(self, tmp_path):
        cfg_path = write_config(tmp_path)
        main(["train", "--config", str(cfg_path)])
        rows = (tmp_path / "run" / "train_log.csv").read_text().strip().splitlines()
        assert rows[0] == "epoch,loss,accuracy"
        assert len(rows) - 1 == 8


class TestFit:
    def test_writes_detector(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main(["fit", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "run" / "detector.oodd").exists()

    def test_embeddings_source(self, tmp_path):
        rng = np.random.default_rng(0)
        p_in = tmp_path / "in.oode"
        z = rng.standard_normal((40, 6))
        y = np.repeat(np.arange(4), 10)
        save_embeddings(EmbeddingDataset(z, y), p_in)
        p_out = tmp_path / "out.oode"
        save_embeddings(EmbeddingDataset(rng.standard_normal((20, 6)) + 2.0), p_out)
        text = (
            "[experiment]\nmethods = md,rmd\n"
            f"[data]\nsource = embeddings\nin_path = {p_in}\nood_path = {p_out}\n"
        )
        cfg_path = write_config(tmp_path, text)
        assert main(["fit", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "run" / "detector.oodd").exists()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("attack_eval")
    cfg_path = write_config(tmp_path)
    assert main(["attack-eval", "--config", str(cfg_path)]) == 0
    return tmp_path / "run"


class TestAttackEval:
    def test_emits_declared_files(self, run_dir):
        for name in (
            "resolved.cfg",
            "trajectories_md.csv",
            "trajectories_rmd.csv",
            "curve_md.csv",
            "curve_md.csv.json",
            "curve_rmd.csv",
            "curves.svg",
            "delta_reports.json",
        ):
            assert (run_dir / name).exists(), name

    def test_budget_grids_identical_across_methods(self, run_dir):
        from oodlab.evaluation import read_curve_csv

        md = read_curve_csv(run_dir / "curve_md.csv")
        rmd = read_curve_csv(run_dir / "curve_rmd.csv")
        assert np.array_equal(md.budgets, rmd.budgets)

    def test_delta_reports_structure(self, run_dir):
        reports = json.loads((run_dir / "delta_reports.json").read_text())
        assert {r["method"] for r in reports} == {"MD", "RMD"}
        for r in reports:
            assert r["delta"] == pytest.approx(r["auroc_at_budget"] - r["auroc_before"])

    def test_sidecar_carries_config_hash(self, run_dir):
        sidecar = json.loads((run_dir / "curve_md.csv.json").read_text())
        resolved = parse_config((run_dir / "resolved.cfg").read_text())
        assert sidecar["config_hash"] == config_hash(resolved)

    def test_rerun_from_resolved_config_reproduces_csvs(self, run_dir, tmp_path):
        resolved = run_dir / "resolved.cfg"
        rerun_out = tmp_path / "rerun"
        assert main([
            "attack-eval", "--config", str(resolved), "--out", str(rerun_out)
        ]) == 0
        for name in ("trajectories_md.csv", "trajectories_rmd.csv"):
            assert (rerun_out / name).read_bytes() == (run_dir / name).read_bytes()


class TestAttackEvalVariants:
    def test_empty_methods_is_config_error(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main(["attack-eval", "--config", str(cfg_path), "--method", ""]) == 2
        assert not (tmp_path / "run" / "trajectories_md.csv").exists()

    def test_runtime_error_exit_code(self, tmp_path):
        # valid-at-validation paths, corrupt content -> stage failure, exit 3
        p_in = tmp_path / "in.oode"
        p_in.write_bytes(b"JUNKJUNKJUNK")
        p_out = tmp_path / "out.oode"
        p_out.write_bytes(b"JUNKJUNKJUNK")
        text = (
            "[experiment]\nmethods = md\n"
            f"[data]\nsource = embeddings\nin_path = {p_in}\nood_path = {p_out}\n"
        )
        cfg_path = write_config(tmp_path, text)
        assert main(["attack-eval", "--config", str(cfg_path)]) == 3

    def test_embeddings_source_reports_baseline_only(self, tmp_path):
        rng = np.random.default_rng(1)
        p_in = tmp_path / "in.oode"
        save_embeddings(
            EmbeddingDataset(rng.standard_normal((30, 5)), np.repeat(np.arange(3), 10)),
            p_in,
        )
        p_out = tmp_path / "out.oode"
        save_embeddings(EmbeddingDataset(rng.standard_normal((12, 5)) + 3.0), p_out)
        text = (
            "[experiment]\nmethods = md,rmd\n"
            f"[data]\nsource = embeddings\nin_path = {p_in}\nood_path = {p_out}\n"
        )
        cfg_path = write_config(tmp_path, text)
        assert main(["attack-eval", "--config", str(cfg_path)]) == 0
        reports = json.loads((tmp_path / "run" / "delta_reports.json").read_text())
        assert all(r["delta"] == 0.0 for r in reports)
        assert {r["method"] for r in reports} == {"MD", "RMD"}

    def test_flag_overrides_change_resolved_config(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main([
            "attack-eval", "--config", str(cfg_path),
            "--steps", "3", "--epsilon", "0.002", "--no-clamp",
        ]) == 0
        resolved = parse_config((tmp_path / "run" / "resolved.cfg").read_text())
        assert resolved.attack.steps == 3
        assert resolved.attack.epsilon == 0.002
        assert resolved.attack.clamp is False

    def test_low_res_flag(self, tmp_path):
        text = SMALL_CONFIG.replace(
            "[attack]", "[attack]\nlow_res_height = 4\nlow_res_width = 4", 1
        )
        cfg_path = write_config(tmp_path, text)
        assert main([
            "attack-eval", "--config", str(cfg_path), "--low-res", "--method", "md",
        ]) == 0
        assert (tmp_path / "run" / "trajectories_md.csv").exists()


class TestReport:
    def test_recompute_at_budget(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main(["attack-eval", "--config", str(cfg_path)]) == 0
        assert main([
            "report", "--config", str(cfg_path), "--budget", "0.002",
        ]) == 0
        reports = json.loads((tmp_path / "run" / "delta_reports.json").read_text())
        assert all(r["budget"] == 0.002 for r in reports)

    def test_missing_out_dir(self, tmp_path):
        cfg_path = write_config(tmp_path, out_dir=tmp_path / "missing")
        assert main(["report", "--config", str(cfg_path)]) == 2
