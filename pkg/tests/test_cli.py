import json
import os
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from bnnlv.cli import (
    GAPS_SCHEMA,
    RESULT_SCHEMA,
    _write_csv,
    _write_json,
    _write_text_atomic,
    expand_grid,
    main,
    parse_config,
)
from bnnlv.exceptions import ConfigError


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestParseConfig:
    def test_scalars_and_comments(self):
        cfg = parse_config(
            "method = NCAI   # constrained\n"
            "\n"
            "epochs = 50\n"
            "learning_rate = 1e-2\n"
            "eb_z = true\n"
            "batch_size = none\n"
        )
        assert cfg == {
            "method": "NCAI",
            "epochs": 50,
            "learning_rate": 0.01,
            "eb_z": True,
            "batch_size": None,
        }

    def test_lists(self):
        cfg = parse_config("lambda1 = [0, 1, 10]\nhidden = [20]\n")
        assert cfg["lambda1"] == [0, 1, 10]
        assert cfg["hidden"] == [20]

    def test_error_lines_are_numbered(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("epochs = 5\nnot a pair\n")
        with pytest.raises(ConfigError, match="line 1.*unknown key"):
            parse_config("epoch = 5\n")
        with pytest.raises(ConfigError, match="unterminated"):
            parse_config("lambda1 = [1, 2\n")
        with pytest.raises(ConfigError, match="empty"):
            parse_config("epochs =\n")


class TestExpandGrid:
    def test_no_sweep(self):
        cells = expand_grid({"method": "NCAI", "epochs": 5})
        assert cells == [{"method": "NCAI", "epochs": 5}]

    def test_product_order(self):
        cells = expand_grid({"lambda1": [0, 1], "sigma2_eps": [0.1, 0.01, 1.0], "epochs": 3})
        assert len(cells) == 6
        assert cells[0]["lambda1"] == 0 and cells[0]["sigma2_eps"] == 0.1
        assert cells[1]["lambda1"] == 0 and cells[1]["sigma2_eps"] == 0.01
        assert cells[-1]["lambda1"] == 1 and cells[-1]["sigma2_eps"] == 1.0
        assert all(c["epochs"] == 3 for c in cells)

    def test_structural_lists_not_swept(self):
        cells = expand_grid({"hidden": [10, 10], "sizes": [40, 10, 10]})
        assert len(cells) == 1
        assert cells[0]["hidden"] == [10, 10]


class TestWriters:
    def test_atomic_text_leaves_no_droppings(self, tmp_path):
        target = tmp_path / "out.txt"
        _write_text_atomic(str(target), "hello\n")
        _write_text_atomic(str(target), "replaced\n")
        assert target.read_text() == "replaced\n"
        assert os.listdir(tmp_path) == ["out.txt"]

    def test_json_schema_enforced(self, tmp_path):
        bad = {"transform": {}, "records": "nope"}
        with pytest.raises(jsonschema.ValidationError):
            _write_json(str(tmp_path / "x.json"), bad, GAPS_SCHEMA)
        assert not (tmp_path / "x.json").exists()

    def test_csv_floats_roundtrip(self, tmp_path):
        path = tmp_path / "vals.csv"
        val = 0.1 + 0.2
        _write_csv(str(path), ("a", "b"), [(val, 1)])
        lines = path.read_text().splitlines()
        assert lines[0] == "a,b"
        back = float(lines[1].split(",")[0])
        assert back == val


class TestGenData:
    def test_deterministic_outputs(self, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (out1, out2):
            code = main(["gen-data", "--name", "depeweg", "--seed", "3",
                         "--sizes", "30,10,10", "--out", out])
            assert code == 0
        for fname in ("train.csv", "val.csv", "test.csv", "latents_train.csv"):
            assert _read(os.path.join(out1, fname)) == _read(os.path.join(out2, fname))

    def test_manifest_written(self, tmp_path):
        out = str(tmp_path / "d")
        assert main(["gen-data", "--name", "goldberg", "--sizes", "20,5,5", "--out", out]) == 0
        with open(os.path.join(out, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 0
        assert "version" in manifest
        # goldberg has no generative latents, so no sidecar
        assert not os.path.exists(os.path.join(out, "latents_train.csv"))

    def test_rejects_unknown_name(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["gen-data", "--name", "mystery", "--out", str(tmp_path / "x")])


TRAIN_CONFIG = """
method = {method}
dataset = heavy_tail
sizes = [25, 8, 8]
hidden = [5]
latent_dim = 1
sigma2_eps = 0.1
sigma2_z = 1.0
epochs = 25
restarts = 1
warm_epochs = 40
init = warm
"""


def _run_train(tmp_path, method, name):
    cfg_path = tmp_path / f"{name}.cfg"
    cfg_path.write_text(TRAIN_CONFIG.format(method=method))
    out = str(tmp_path / name)
    code = main(["train", "--config", str(cfg_path), "--seed", "5", "--out", out])
    assert code == 0
    return out


class TestTrain:
    def test_writes_all_artifacts(self, tmp_path):
        out = _run_train(tmp_path, "NCAI", "run")
        for fname in ("result.json", "history.csv", "model.json",
                      "predictive_grid.csv", "latent_means.csv", "manifest.json"):
            assert os.path.exists(os.path.join(out, fname)), fname
        with open(os.path.join(out, "result.json")) as fh:
            result = json.load(fh)
        jsonschema.validate(result, RESULT_SCHEMA)
        assert result["method"] == "NCAI"
        assert result["metrics"]["recon_mse"] is not None

    def test_penalty_free_matches_plain_descent(self, tmp_path):
        cfg = TRAIN_CONFIG + "lambda1 = 0\nlambda2 = 0\nlambda3 = 0\n"
        paths = {}
        for method, name in (("NCAI", "zero"), ("BNNLV_BBB", "bbb")):
            cfg_path = tmp_path / f"{name}.cfg"
            cfg_path.write_text(cfg.format(method=method))
            out = str(tmp_path / name)
            assert main(["train", "--config", str(cfg_path), "--seed", "7", "--out", out]) == 0
            paths[name] = out
        h_zero = _read(os.path.join(paths["zero"], "history.csv"))
        h_bbb = _read(os.path.join(paths["bbb"], "history.csv"))
        assert h_zero == h_bbb

    def test_grid_keys_rejected_outside_grid(self, tmp_path):
        cfg_path = tmp_path / "sweep.cfg"
        cfg_path.write_text(TRAIN_CONFIG.format(method="NCAI") + "lambda1 = [0, 1]\n")
        code = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "absent.cfg"),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"

    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "div.cfg"
        cfg_path.write_text(TRAIN_CONFIG.format(method="BNNLV_BBB").replace(
            "sigma2_eps = 0.1", "sigma2_eps = 1e-320"))
        code = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "divergence"


class TestEvaluate:
    def test_report_for_saved_model(self, tmp_path):
        out = _run_train(tmp_path, "NCAI", "base")
        eval_out = str(tmp_path / "eval")
        code = main(["evaluate", "--model", os.path.join(out, "model.json"),
                     "--dataset", "heavy_tail", "--sizes", "25,8,8",
                     "--samples", "200", "--seed", "5", "--out", eval_out])
        assert code == 0
        with open(os.path.join(eval_out, "metrics.json")) as fh:
            metrics = json.load(fh)
        assert "avg_marginal_ll" in metrics
        assert metrics["pc_y_z"] is not None

    def test_latent_row_mismatch_is_config_error(self, tmp_path, capsys):
        out = _run_train(tmp_path, "NCAI", "base2")
        code = main(["evaluate", "--model", os.path.join(out, "model.json"),
                     "--dataset", "heavy_tail", "--sizes", "40,8,8",
                     "--samples", "200", "--out", str(tmp_path / "e2")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert "latent factors" in err["message"]


class TestNonidentDemo:
    def test_node_gap_table(self, tmp_path):
        out = str(tmp_path / "nd")
        code = main(["nonident-demo", "--transform", "node", "--c", "0.99",
                     "--n", "10,50", "--trials", "20", "--out", out])
        assert code == 0
        with open(os.path.join(out, "gaps.json")) as fh:
            gaps = json.load(fh)
        jsonschema.validate(gaps, GAPS_SCHEMA)
        assert [r["n"] for r in gaps["records"]] == [10, 50]

    def test_layer_gap_table(self, tmp_path):
        out = str(tmp_path / "nl")
        code = main(["nonident-demo", "--transform", "layer", "--t-scale", "0.5",
                     "--sigma2-z", "1.0", "--n", "50", "--trials", "10", "--out", out])
        assert code == 0
        with open(os.path.join(out, "gaps.json")) as fh:
            gaps = json.load(fh)
        assert gaps["transform"]["kind"] == "layer"


class TestMapDemo:
    def test_gap_report(self, tmp_path):
        out = str(tmp_path / "md")
        code = main(["map-demo", "--dataset", "heavy_tail", "--seed", "1",
                     "--epochs", "60", "--restarts", "2", "--out", out])
        assert code == 0
        with open(os.path.join(out, "map.json")) as fh:
            report = json.load(fh)
        assert len(report["random_log_joints"]) == 2
        assert report["best_random"] == max(report["random_log_joints"])
        assert report["gap"] == pytest.approx(
            report["best_random"] - report["ground_truth_log_joint"]
        )


class TestDecompose:
    def test_grid_csv_from_true_model(self, tmp_path):
        out = str(tmp_path / "dc")
        code = main(["decompose", "--dataset", "bimodal", "--x-grid", "0:1:3",
                     "--s-w", "10", "--s-inner", "150", "--out", out])
        assert code == 0
        with open(os.path.join(out, "decomposition.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "x,total,aleatoric,epistemic"
        assert len(lines) == 4
        first = [float(v) for v in lines[1].split(",")]
        assert first[1] == pytest.approx(first[2] + first[3], abs=1e-9)

    def test_grid_spec_may_start_negative(self, tmp_path):
        out = str(tmp_path / "dn")
        code = main(["decompose", "--dataset", "depeweg", "--x-grid", "-1:1:2",
                     "--s-w", "5", "--s-inner", "100", "--out", out])
        assert code == 0
        with open(os.path.join(out, "decomposition.csv")) as fh:
            rows = fh.read().splitlines()
        assert [float(r.split(",")[0]) for r in rows[1:]] == [-1.0, 1.0]


class TestGrid:
    def test_sweep_and_selection(self, tmp_path):
        cfg_path = tmp_path / "grid.cfg"
        cfg_path.write_text(TRAIN_CONFIG.format(method="NCAI") + "lambda2 = [0, 10]\n")
        out = str(tmp_path / "gr")
        code = main(["grid", "--config", str(cfg_path), "--seed", "2", "--out", out])
        assert code == 0
        with open(os.path.join(out, "grid.json")) as fh:
            summary = json.load(fh)
        assert len(summary["cells"]) == 2
        assert os.path.exists(os.path.join(out, "cell_000", "result.json"))
        assert os.path.exists(os.path.join(out, "cell_001", "result.json"))
        scores = [c["val_avg_marginal_ll"] for c in summary["cells"]]
        assert scores[summary["best"]] == max(scores)
        assert summary["best_config"]["lambda2"] in (0, 10)


def test_module_entry_point(tmp_path):
    out = str(tmp_path / "ep")
    proc = subprocess.run(
        [sys.executable, "-m", "bnnlv.cli", "gen-data", "--name", "yuan",
         "--sizes", "10,5,5", "--out", out],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert os.path.exists(os.path.join(out, "train.csv"))
