import json

import numpy as np
import pytest

from pyrmask.cli import load_config, main
from pyrmask.errors import ConfigError
from pyrmask.train import TrainConfig


def tiny_dict(**kw):
    d = TrainConfig(n_categories=4, channels=8, depth=1, heads=2,
                    img_h=32, img_w=32, iterations=4, batch_size=2,
                    seed=3, train_size=4, val_size=2, eval_every=0).to_dict()
    d.update(kw)
    return d


def write_config(tmp_path, **kw):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_dict(**kw)))
    return str(path)


class TestConfigLoading:
    def test_defaults_without_file(self):
        cfg = load_config(None, [])
        assert cfg == TrainConfig()

    def test_file_plus_overrides(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, ["lr=0.005", "loss.lambda_attn=0.2",
                                 "single_scale_only=16"])
        assert cfg.lr == 0.005
        assert cfg.loss.lambda_attn == 0.2
        assert cfg.scales == (16,)

    def test_override_values_parsed_as_json(self):
        cfg = load_config(None, ["prediction_average=true"])
        assert cfg.prediction_average is True

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["lr"])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["warmup=5"])

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError):
            load_config("/no/such/config.json", [])

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{oops")
        with pytest.raises(ConfigError):
            load_config(str(path), [])


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_no_arguments_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "gradcheck" in capsys.readouterr().out

    def test_config_error_exits_two(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestTrainEval:
    def test_train_then_eval_reproduces_miou(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(out),
                     "--quiet"]) == 0
        train_line = capsys.readouterr().out.strip().splitlines()[-1]
        logged = float(train_line.split()[-1])

        assert main(["eval", "--config", config,
                     "--checkpoint", str(out / "model.ckpt")]) == 0
        eval_out = capsys.readouterr().out.strip().splitlines()
        evaluated = float(eval_out[-1].split()[-1])
        assert abs(evaluated - logged) <= 1e-12
        report = json.loads((out / "metrics.json").read_text())
        assert abs(report["final_miou"] - evaluated) <= 1e-12

    def test_eval_rejects_config_mismatch(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", config, "--out", str(out), "--quiet"])
        capsys.readouterr()
        code = main(["eval", "--config", config, "--set", "lr=0.5",
                     "--checkpoint", str(out / "model.ckpt")])
        assert code == 2
        capsys.readouterr()


class TestGenData:
    def test_writes_requested_count(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "scenes"
        assert main(["gen-data", "--config", config, "--count", "3",
                     "--out", str(out)]) == 0
        capsys.readouterr()
        assert len(list(out.glob("sample_*.f64"))) == 3
        assert len(list(out.glob("sample_*.json"))) == 3


class TestExportAttn:
    def test_writes_full_map_grid(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", config, "--out", str(out), "--quiet"])
        capsys.readouterr()
        dump = tmp_path / "dump"
        assert main(["export-attn", "--config", config,
                     "--checkpoint", str(out / "model.ckpt"),
                     "--sample-seed", "5", "--out", str(dump)]) == 0
        capsys.readouterr()
        # depth 1, 3 scales, 4 categories
        maps = sorted(dump.rglob("*.f64"))
        attn_maps = [p for p in maps if "attn" in p.parts]
        assert len(attn_maps) == 1 * 3 * 4
        sidecar = json.loads(
            (dump / "attn" / "layer0" / "scale8" / "cat0.json").read_text())
        assert sidecar["scale"] == 8 and sidecar["category"] == 0
        assert (dump / "prediction.pgm").exists()

    def test_no_render_flag(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", config, "--out", str(out), "--quiet"])
        capsys.readouterr()
        dump = tmp_path / "dump"
        assert main(["export-attn", "--config", config,
                     "--checkpoint", str(out / "model.ckpt"),
                     "--out", str(dump), "--no-render"]) == 0
        capsys.readouterr()
        assert not list((dump / "attn").rglob("*.pgm"))
