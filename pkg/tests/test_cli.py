import json

import pytest

from conftest import make_blobs
from ossl.cli import (ConfigError, config_hash, load_config, main,
                      read_metrics, write_metrics)
from ossl.data import save_raw_tensor


def strip_wall_ms(text):
    """Metrics CSV without the trailing wall-clock column."""
    return "\n".join(line.rsplit(",", 1)[0] for line in text.splitlines())


@pytest.fixture
def workspace(tmp_path):
    """Raw-format train / ood datasets plus a ready-to-run config file."""
    train = make_blobs(n_per_class=16, seed=0)
    ood = make_blobs(n_per_class=8, seed=5, shift=0.2, role="ood_test")
    train_path = tmp_path / "train.osslraw"
    ood_path = tmp_path / "ood.osslraw"
    save_raw_tensor(train, train_path)
    save_raw_tensor(ood, ood_path)
    cfg = {
        "version": 1,
        "model": {"backbone_kind": "tiny_cnn", "num_classes": 2,
                  "init_seed": 7},
        "sgd": {"l_r": 0.05, "batch_size": 16, "n_epoch": 2,
                "shuffle_seed": 3, "mode": "ossl"},
        "train_set": {"name": "blobs", "format": "raw",
                      "path": str(train_path), "class_count": 2},
        "test_sets": [{"name": "ood", "format": "raw",
                       "path": str(ood_path), "class_count": 2}],
        "output_dir": str(tmp_path / "run"),
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return tmp_path, cfg, cfg_path


def rewrite(cfg_path, cfg):
    cfg_path.write_text(json.dumps(cfg))
    return cfg_path


class TestLoadConfig:
    def test_round_trip_fields(self, workspace):
        _, cfg, cfg_path = workspace
        loaded = load_config(cfg_path)
        assert loaded["model"].backbone_kind == "tiny_cnn"
        assert loaded["sgd"].batch_size == 16
        assert loaded["train_set"]["name"] == "blobs"
        assert [t["name"] for t in loaded["test_sets"]] == ["ood"]

    def test_unknown_top_level_key(self, workspace):
        _, cfg, cfg_path = workspace
        cfg["optimizer"] = "adam"
        with pytest.raises(ConfigError, match="unknown keys.*optimizer"):
            load_config(rewrite(cfg_path, cfg))

    def test_unknown_nested_key(self, workspace):
        _, cfg, cfg_path = workspace
        cfg["sgd"]["momentum"] = 0.9
        with pytest.raises(ConfigError, match="sgd.*momentum"):
            load_config(rewrite(cfg_path, cfg))

    def test_wrong_version(self, workspace):
        _, cfg, cfg_path = workspace
        cfg["version"] = 2
        with pytest.raises(ConfigError, match="version"):
            load_config(rewrite(cfg_path, cfg))

    def test_missing_dataset_file(self, workspace):
        tmp_path, cfg, cfg_path = workspace
        cfg["train_set"]["path"] = str(tmp_path / "nope.osslraw")
        with pytest.raises(ConfigError, match="train_set.path"):
            load_config(rewrite(cfg_path, cfg))

    def test_idx_requires_labels_path(self, workspace):
        tmp_path, cfg, cfg_path = workspace
        (tmp_path / "imgs.idx").write_bytes(b"\x00" * 16)
        cfg["train_set"] = {"format": "idx", "path": str(tmp_path / "imgs.idx")}
        with pytest.raises(ConfigError, match="labels_path"):
            load_config(rewrite(cfg_path, cfg))

    def test_bad_sgd_value(self, workspace):
        _, cfg, cfg_path = workspace
        cfg["sgd"]["l_r"] = -1.0
        with pytest.raises(ConfigError, match="sgd"):
            load_config(rewrite(cfg_path, cfg))

    def test_output_root_env(self, workspace, monkeypatch, tmp_path):
        _, cfg, cfg_path = workspace
        cfg["output_dir"] = "rel/run"
        monkeypatch.setenv("OSSL_OUTPUT_ROOT", str(tmp_path / "root"))
        loaded = load_config(rewrite(cfg_path, cfg))
        assert loaded["output_dir"] == str(tmp_path / "root" / "rel" / "run")


class TestTrainCommand:
    def test_outputs_and_metrics_schema(self, workspace, capsys):
        tmp_path, cfg, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path)]) == 0
        out_dir = tmp_path / "run"
        assert (out_dir / "checkpoint.ossl").exists()
        assert (out_dir / "resolved_config.json").exists()
        lines = (out_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,L_ch,L_rh,L_ah,train_acc,ood_acc,wall_ms"
        assert len(lines) == 1 + cfg["sgd"]["n_epoch"]
        first = lines[1].split(",")
        assert first[0] == "1"
        assert all(v != "" for v in first[1:5])   # ossl defines every loss
        assert "mode=ossl" in capsys.readouterr().out

    def test_baseline_leaves_loss_fields_empty(self, workspace):
        tmp_path, cfg, cfg_path = workspace
        cfg["sgd"]["mode"] = "baseline_ch"
        cfg["output_dir"] = str(tmp_path / "run_b")
        assert main(["train", "--config", str(rewrite(cfg_path, cfg))]) == 0
        row = (tmp_path / "run_b" / "metrics.csv").read_text().splitlines()[1]
        fields = row.split(",")
        assert fields[2] == "" and fields[3] == ""   # L_rh, L_ah undefined

    def test_deterministic_reruns(self, workspace):
        tmp_path, cfg, cfg_path = workspace
        outs = []
        for tag in ("a", "b"):
            cfg["output_dir"] = str(tmp_path / f"run_{tag}")
            assert main(["train", "--config", str(rewrite(cfg_path, cfg))]) == 0
            outs.append(tmp_path / f"run_{tag}")
        m0 = (outs[0] / "metrics.csv").read_text()
        m1 = (outs[1] / "metrics.csv").read_text()
        assert strip_wall_ms(m0) == strip_wall_ms(m1)
        assert (outs[0] / "checkpoint.ossl").read_bytes() == \
               (outs[1] / "checkpoint.ossl").read_bytes()

    def test_config_error_exit_code(self, workspace, capsys):
        tmp_path, cfg, cfg_path = workspace
        cfg["train_set"]["path"] = str(tmp_path / "missing.osslraw")
        assert main(["train", "--config", str(rewrite(cfg_path, cfg))]) == 2
        assert "train_set.path" in capsys.readouterr().err

    def test_invalid_json_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train", "--config", str(bad)]) == 2
        assert "error:" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort_exit_code(self, workspace, capsys):
        tmp_path, cfg, cfg_path = workspace
        cfg["sgd"]["l_r"] = 1e18
        cfg["sgd"]["n_epoch"] = 5
        cfg["output_dir"] = str(tmp_path / "run_nan")
        assert main(["train", "--config", str(rewrite(cfg_path, cfg))]) == 3
        assert "numeric abort" in capsys.readouterr().err

    def test_resolved_config_is_reloadable_fixed_point(self, workspace):
        from ossl.cli import _resolved_config_json
        tmp_path, cfg, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path)]) == 0
        resolved = tmp_path / "run" / "resolved_config.json"
        reloaded = load_config(resolved)
        assert _resolved_config_json(reloaded) == resolved.read_text()
        assert config_hash(reloaded) == config_hash(load_config(cfg_path))


class TestEvalEmbedTsne:
    @pytest.fixture
    def trained(self, workspace):
        tmp_path, cfg, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path)]) == 0
        return tmp_path, cfg

    def test_eval_prints_accuracy(self, trained, capsys):
        tmp_path, cfg = trained
        rc = main(["eval", "--checkpoint", str(tmp_path / "run/checkpoint.ossl"),
                   "--dataset", cfg["test_sets"][0]["path"],
                   "--name", "ood", "--class-count", "2"])
        assert rc == 0
        name, head, acc, n = capsys.readouterr().out.strip().split(",")
        assert name == "ood" and head == "semantic"
        assert 0.0 <= float(acc) <= 1.0 and int(n) == 16

    def test_eval_rotation_head(self, trained, capsys):
        tmp_path, cfg = trained
        rc = main(["eval", "--checkpoint", str(tmp_path / "run/checkpoint.ossl"),
                   "--dataset", cfg["test_sets"][0]["path"],
                   "--head", "rotation", "--class-count", "2"])
        assert rc == 0
        assert int(capsys.readouterr().out.strip().split(",")[-1]) == 4 * 16

    def test_embed_then_tsne(self, trained, capsys):
        tmp_path, cfg = trained
        emb = tmp_path / "train.osslemb"
        rc = main(["embed", "--checkpoint", str(tmp_path / "run/checkpoint.ossl"),
                   "--dataset", cfg["train_set"]["path"],
                   "--class-count", "2", "--out", str(emb)])
        assert rc == 0 and emb.exists()
        coords = tmp_path / "coords.csv"
        rc = main(["tsne", "--embeddings", str(emb), "--out", str(coords),
                   "--perplexity", "8", "--iterations", "30"])
        assert rc == 0
        lines = coords.read_text().splitlines()
        assert lines[0].startswith("# perplexity=8.0")
        assert lines[1] == "point_index,x,y,label"
        assert len(lines) == 2 + 32
        idx, x, y, label = lines[2].split(",")
        assert idx == "0" and label in ("0", "1")
        float(x), float(y)

    def test_tsne_perplexity_error(self, trained, capsys):
        tmp_path, cfg = trained
        emb = tmp_path / "train.osslemb"
        main(["embed", "--checkpoint", str(tmp_path / "run/checkpoint.ossl"),
              "--dataset", cfg["train_set"]["path"],
              "--class-count", "2", "--out", str(emb)])
        rc = main(["tsne", "--embeddings", str(emb),
                   "--out", str(tmp_path / "c.csv"), "--perplexity", "30"])
        assert rc == 2
        assert "perplexity" in capsys.readouterr().err


class TestReportCommand:
    def _train_modes(self, workspace, modes):
        tmp_path, cfg, cfg_path = workspace
        dirs = []
        for mode in modes:
            cfg["sgd"]["mode"] = mode
            cfg["output_dir"] = str(tmp_path / f"run_{mode}")
            assert main(["train", "--config", str(rewrite(cfg_path, cfg))]) == 0
            dirs.append(cfg["output_dir"])
        return tmp_path, dirs

    def test_table_over_run_dirs(self, workspace, capsys):
        _, dirs = self._train_modes(workspace, ["baseline_ch", "ossl"])
        capsys.readouterr()   # drop the train command output
        assert main(["report"] + dirs) == 0
        out = capsys.readouterr().out
        assert out.startswith("mode,ood\n")
        assert "baseline_ch," in out and "ossl," in out
        assert "*" in out   # one cell flagged as column max

    def test_mode_flag_required_without_resolved_config(self, workspace, capsys):
        tmp_path, dirs = self._train_modes(workspace, ["ossl"])
        bare = tmp_path / "bare.csv"
        bare.write_bytes((tmp_path / "run_ossl" / "metrics.csv").read_bytes())
        assert main(["report", str(bare)]) == 2
        assert "--mode" in capsys.readouterr().err
        assert main(["report", str(bare), "--mode", "ossl"]) == 0

    def test_out_file(self, workspace, capsys, tmp_path):
        _, dirs = self._train_modes(workspace, ["ossl"])
        out = tmp_path / "table.csv"
        assert main(["report", dirs[0], "--out", str(out)]) == 0
        assert out.read_text().startswith("mode,ood")
        capsys.readouterr()


class TestMetricsRoundTrip:
    def test_write_read_identity(self, tmp_path, workspace):
        tmp, cfg, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path)]) == 0
        path = tmp / "run" / "metrics.csv"
        record = read_metrics(path, "ossl")
        back = tmp_path / "again.csv"
        write_metrics(record, back)
        assert strip_wall_ms(back.read_text()) == strip_wall_ms(path.read_text())
        ep = record.epochs[-1]
        assert ep.l_ch is not None and "ood" in ep.test_acc
