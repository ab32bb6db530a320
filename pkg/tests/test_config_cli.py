"""Run configuration loading and the command-line entry points."""

import csv
import json

import numpy as np
import pytest
import yaml

import stationsense as ss
from stationsense.cli import main
from stationsense.config import config_from_dict, config_to_dict


class TestConfig:
    def test_defaults(self):
        cfg = ss.RunConfig()
        assert cfg.scenario.n_stations == 8
        assert cfg.windowing.width_s == 2.0
        assert cfg.training.downstream.batch_size == 256

    def test_round_trip_through_yaml(self, tmp_path):
        cfg = ss.RunConfig(
            scenario=ss.desk_scenario(),
            windowing=ss.desk_windowing(),
        )
        p = tmp_path / "cfg.yaml"
        ss.dump_config(cfg, p)
        back = ss.load_config(str(p))
        assert back.scenario == cfg.scenario
        assert back.windowing == cfg.windowing
        assert back.training == cfg.training
        assert back.sweep == cfg.sweep

    def test_partial_overrides(self):
        cfg = config_from_dict(
            {
                "scenario": {"duration_s": 60.0, "noise_std": 0.02},
                "windowing": {"label_rate_hz": 5.0},
                "training": {"downstream": {"learning_rate": 0.01, "batch_size": 64}},
                "sweep": {"seeds": [5]},
            }
        )
        assert cfg.scenario.duration_s == 60.0
        assert cfg.scenario.n_stations == 8  # untouched default
        assert cfg.windowing.label_rate_hz == 5.0
        assert cfg.training.downstream.learning_rate == 0.01
        assert cfg.sweep.seeds == (5,)

    def test_to_dict_yaml_safe(self):
        doc = config_to_dict(ss.RunConfig())
        yaml.safe_dump(doc)  # must not choke on tuples/arrays
        json.dumps(doc)

    def test_load_none_gives_defaults(self):
        assert ss.load_config(None) == ss.RunConfig()

    def test_desk_presets(self):
        assert ss.desk_scenario().duration_s == 600.0
        w = ss.desk_windowing()
        assert w.ssl_rate_hz > w.label_rate_hz
        s = ss.desk_settings()
        assert s.mode == "frozen"
        assert s.aug_strategy == "online"


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Tiny scenario config + built datasets shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "scenario": {"duration_s": 60.0},
        "windowing": {"label_rate_hz": 4.0, "ssl_rate_hz": 6.0},
        "training": {
            "pretrain": {"learning_rate": 1e-3, "batch_size": 256, "max_epochs": 4, "patience": 2},
            "downstream": {"learning_rate": 1e-3, "batch_size": 128, "max_epochs": 6, "patience": 3},
        },
        "sweep": {
            "available_station_counts": [8],
            "label_ratios": [1.0],
            "seeds": [0],
        },
    }
    cfg_path = root / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    data_dir = root / "data"
    rc = main(
        ["--config", str(cfg_path), "--seed", "0", "--out-dir", str(data_dir), "build-dataset"]
    )
    assert rc == 0
    return root, cfg_path, data_dir


class TestCli:
    def test_build_dataset_outputs(self, cli_workspace):
        _, _, data_dir = cli_workspace
        for name in ("train", "val", "test", "unlabeled"):
            d = ss.load_dataset(data_dir / f"{name}.bin")
            assert d.n > 0
            assert (d.labels is None) == (name == "unlabeled")

    def test_simulate_outputs(self, cli_workspace, tmp_path):
        _, cfg_path, _ = cli_workspace
        out = tmp_path / "sim"
        assert main(["--config", str(cfg_path), "--out-dir", str(out), "simulate"]) == 0
        with open(out / "trajectory.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 600  # 60 s probed at 10 Hz
        assert all(0.0 <= float(r["label"]) <= 1.0 for r in rows)
        with open(out / "frames.csv") as f:
            header = f.readline().strip().split(",")
        assert header[:2] == ["station", "timestamp"]
        assert len(header) == 2 + 2 * 64

    def test_pretrain_train_evaluate_chain(self, cli_workspace, tmp_path):
        _, cfg_path, data_dir = cli_workspace
        fx_path = tmp_path / "fx.ck"
        rc = main(
            ["--config", str(cfg_path), "pretrain",
             "--dataset", str(data_dir / "unlabeled.bin"), "--out", str(fx_path)]
        )
        assert rc == 0
        fx = ss.load_extractor(fx_path)
        assert fx.n_stations == 8

        model_path = tmp_path / "model.ck"
        rc = main(
            ["--config", str(cfg_path), "train",
             "--labeled", str(data_dir / "train.bin"),
             "--extractor", str(fx_path), "--aug", "sma", "--out", str(model_path)]
        )
        assert rc == 0
        model = ss.load_model(model_path)
        assert model.extractor is not None

        metrics_path = tmp_path / "metrics.csv"
        rc = main(
            ["evaluate", "--model", str(model_path),
             "--dataset", str(data_dir / "test.bin"), "--k", "1", "8",
             "--out", str(metrics_path)]
        )
        assert rc == 0
        with open(metrics_path) as f:
            rows = list(csv.DictReader(f))
        assert [r["k_available"] for r in rows] == ["1", "8"]
        assert all(float(r["rmse"]) >= 0 for r in rows)

    def test_train_identity_extractor(self, cli_workspace, tmp_path):
        _, cfg_path, data_dir = cli_workspace
        model_path = tmp_path / "naive.ck"
        rc = main(
            ["--config", str(cfg_path), "train",
             "--labeled", str(data_dir / "train.bin"),
             "--extractor", "identity", "--out", str(model_path)]
        )
        assert rc == 0
        assert ss.load_model(model_path).extractor is None

    def test_sweep_and_report(self, cli_workspace, tmp_path):
        _, cfg_path, data_dir = cli_workspace
        out = tmp_path / "sweep"
        rc = main(
            ["--config", str(cfg_path), "--out-dir", str(out), "sweep",
             "--data-dir", str(data_dir), "--methods", "constant,naive"]
        )
        assert rc == 0
        with open(out / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert {r["method"] for r in rows} == {"constant", "naive"}
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["methods"] == ["constant", "naive"]

        summary_path = tmp_path / "summary.csv"
        rc = main(["report", "--metrics", str(out / "metrics.csv"), "--out", str(summary_path)])
        assert rc == 0
        with open(summary_path) as f:
            srows = list(csv.DictReader(f))
        assert {r["method"] for r in srows} == {"constant", "naive"}

    def test_pca_export(self, cli_workspace, tmp_path):
        _, _, data_dir = cli_workspace
        out = tmp_path / "pca.csv"
        rc = main(
            ["pca-export", "--train", str(data_dir / "train.bin"),
             "--test", str(data_dir / "test.bin"), "--k", "8", "4", "--out", str(out)]
        )
        assert rc == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        test_n = ss.load_dataset(data_dir / "test.bin").n
        assert len(rows) == 2 * test_n
        assert {r["availability"] for r in rows} == {"8", "4"}
