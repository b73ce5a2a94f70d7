import csv
import json
import os

import numpy as np
import pytest
import yaml

from cran_harq.cli import main
from cran_harq.config import ConfigError, ExperimentConfig
from cran_harq.dataset import DatasetError, read_dataset

TINY = {
    "snr_grid": [-2.0],
    "sizes": {"train": 300, "val": 200, "test": 300},
    "fb_bits": [4],
    "eps_target_factors": [3.0],
    "dida": {"epochs": [2], "batch": [128], "lam": [0.1], "dropout": [0.1]},
    "eval": {"roc_points": 200, "restarts": 2},
    "batch_frames": 200,
}


def write_cfg(path, **over):
    cfg = {**TINY, **over}
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(cfg, out, *args):
    return main(["--config", cfg, "--output", str(out), *args])


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(base / "tiny.yaml")
    out = base / "run"
    assert run(cfg, out, "generate") == 0
    assert run(cfg, out, "train") == 0
    assert run(cfg, out, "evaluate") == 0
    assert run(cfg, out, "report") == 0
    return base, cfg, out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg["sizes"]["train"] == 50000 and cfg.combined_enabled

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig({"sim": {"bogus": 1}})

    def test_bad_scheme(self):
        with pytest.raises(ConfigError):
            ExperimentConfig({"schemes": ["RF"]})

    def test_hash_ignores_output(self):
        assert ExperimentConfig({"output_dir": "a"}).hash() == ExperimentConfig({"output_dir": "b"}).hash()
        assert ExperimentConfig({"seed": 2}).hash() != ExperimentConfig().hash()

    def test_cli_config_error(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("sizes: {train: 5}\n")
        assert main(["--config", str(p), "report"]) == 2
        assert "config error" in capsys.readouterr().err


class TestPipeline:
    def test_outputs(self, pipeline_run):
        _, _, out = pipeline_run
        assert os.path.exists(out / "datasets" / "chain_snr-2.0.json")
        assert os.path.exists(out / "models" / "DIDA_snr-2.0_p1_b4.npz")
        assert os.path.exists(out / "results" / "report.md")

    def test_dida_one_cell_one_model(self, pipeline_run):
        _, _, out = pipeline_run
        models = sorted(f for f in os.listdir(out / "models") if f.startswith("DIDA") and f.endswith(".npz"))
        assert models == ["DIDA_snr-2.0_p1_b4.npz", "DIDA_snr-2.0_p2_b4.npz"]
        grid = read_csv(out / "models" / "DIDA_snr-2.0_p1_b4_grid.csv")
        assert len(grid) == 1 and {"val_auc", "test_auc"} <= set(grid[0])

    def test_operating_points(self, pipeline_run):
        _, cfg, out = pipeline_run
        rows = read_csv(out / "results" / "operating_points.csv")
        nack = [r for r in rows if r["scheme"] == "always-NACK"]
        assert nack and all(float(r["E_T"]) == 4.0 for r in nack)
        schemes = {r["scheme"] for r in rows}
        assert "TH-SNR+DIDA" in schemes and {"TH-SNR", "TH-LLR", "LR-LLR", "LR-SC", "DIDA"} <= schemes
        h = ExperimentConfig.load(cfg).hash()
        assert all(r["config_hash"] == h and r["seed"] == "1" for r in rows)

    def test_combined_uses_component_curves(self, pipeline_run):
        _, _, out = pipeline_run
        rows = {r["scheme"]: r for r in read_csv(out / "results" / "operating_points.csv")}
        comb = rows["TH-SNR+DIDA"]
        if comb["feasible"] == "True":
            roc = read_csv(out / "results" / "roc.csv")
            th = [(float(r["alpha"]), float(r["beta"])) for r in roc if r["scheme"] == "TH-SNR" and r["point"] == "1"]
            a, b = zip(*th)
            assert abs(np.interp(float(comb["alpha1"]), a, b) - float(comb["beta1"])) <= 1e-12

    def test_roc_rows(self, pipeline_run):
        _, _, out = pipeline_run
        roc = read_csv(out / "results" / "roc.csv")
        groups = {}
        for r in roc:
            groups.setdefault((r["scheme"], r["point"], r["fb_bits"]), []).append(float(r["alpha"]))
        for alphas in groups.values():
            assert len(alphas) <= 1002  # up to 1000 cutoffs plus the two anchors
            assert all(x <= y for x, y in zip(alphas, alphas[1:]))

    def test_refuses_overwrite(self, pipeline_run, capsys):
        _, cfg, out = pipeline_run
        assert run(cfg, out, "train", "--scheme", "TH-LLR") == 2
        assert "refusing" in capsys.readouterr().err

    def test_scheme_filter(self, pipeline_run, tmp_path):
        base, cfg, out = pipeline_run
        other = tmp_path / "only"
        os.makedirs(other)
        os.symlink(out / "datasets", other / "datasets")
        assert run(cfg, other, "train", "--scheme", "TH-LLR") == 0
        assert sorted(os.listdir(other / "models")) == ["TH-LLR_snr-2.0_p1_b4.json", "TH-LLR_snr-2.0_p2_b4.json"]

    def test_missing_artifacts(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert run(cfg, tmp_path / "empty", "train") == 1
        assert "run generate first" in capsys.readouterr().err

    def test_deterministic_generation(self, pipeline_run, tmp_path):
        _, cfg, out = pipeline_run
        assert run(cfg, tmp_path / "again", "generate") == 0
        for name in os.listdir(out / "datasets"):
            assert (tmp_path / "again" / "datasets" / name).read_bytes() == (out / "datasets" / name).read_bytes()

    def test_hash_mismatch(self, pipeline_run):
        _, _, out = pipeline_run
        with pytest.raises(DatasetError):
            read_dataset(out / "datasets" / "snr-2.0_p1_test.csv", expected_hash="0" * 16)

    def test_header(self, pipeline_run):
        _, cfg, out = pipeline_run
        with open(out / "datasets" / "snr-2.0_p2_val.csv") as fh:
            header = json.loads(fh.readline())
        assert header["config_hash"] == ExperimentConfig.load(cfg).dataset_hash()
        assert header["point"] == 2 and header["split"] == "val"


class TestVerifyAppendix:
    def test_pass(self, capsys):
        assert main(["verify-appendix"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert all(line.startswith("PASS") for line in lines) and len(lines) >= 6

    def test_tampered_bound(self, capsys):
        assert main(["verify-appendix", "--bound-scale", "0.01"]) == 1
        assert "FAIL" in capsys.readouterr().out
