import json

import pytest

from owseg import cli

TINY = {"model": {"num_queries": 4, "num_stages": 2, "mask_resolution": 8, "feature_dim": 32,
                  "encoder_channels": [8, 16, 16, 32], "dynamic_dim": 8},
        "train": {"batch_size": 2}}


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(out), "--num-images", "4", "--image-size", "32",
                     "--novel", "ring", "--seed", "7"]) == 0
    return out


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_byte_identical(tmp_path, data_dir):
    again = tmp_path / "again"
    cli.main(["gen-data", "--out", str(again), "--num-images", "4", "--image-size", "32",
              "--novel", "ring", "--seed", "7"])
    assert tree_bytes(data_dir) == tree_bytes(again)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["config_hash"]) == 64 and manifest["version"]
    split = json.loads((data_dir / "split.json").read_text())
    assert split["novel_ids"] == [4]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["gen-data", "--num-images", "1", "--image-size", "32"]) == 0
    assert (tmp_path / "root" / "data" / "annotations.json").is_file()


def test_preset_3x_sets_schedule_and_lsj(tmp_path, data_dir, tiny_config):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--config", str(tiny_config),
                     "--preset", "3x", "--max-steps", "0", "--out", str(out)]) == 0
    train_cfg = json.loads((out / "config.json").read_text())["train"]
    assert train_cfg["epochs"] == 36 and train_cfg["decay_epochs"] == [27, 33]
    assert train_cfg["augmentation"] == "lsj"


def test_flags_override_config(tmp_path, data_dir, tiny_config):
    out = tmp_path / "run"
    cli.main(["train", "--data", str(data_dir), "--config", str(tiny_config), "--variant", "void",
              "--queries", "3", "--seed", "9", "--max-steps", "0", "--out", str(out)])
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["model"]["variant"] == "void" and cfg["model"]["num_queries"] == 3
    assert cfg["train"]["seed"] == 9
    assert json.loads((out / "manifest.json").read_text())["seed"] == 9


@pytest.mark.parametrize("content, key", [
    ({"model": {"bogus_key": 1}}, "bogus_key"),
    ({"train": {"learning_rate": 0.1}}, "learning_rate"),
    ({"optimizer": {}}, "optimizer"),
])
def test_invalid_config_key_exits_nonzero(tmp_path, data_dir, capsys, content, key):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(content))
    code = cli.main(["train", "--data", str(data_dir), "--config", str(p), "--out",
                     str(tmp_path / "r")])
    assert code != 0 and key in capsys.readouterr().err


def test_yaml_config(tmp_path, data_dir, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("model:\n  nonsense: 3\n")
    assert cli.main(["train", "--data", str(data_dir), "--config", str(p)]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_missing_files_exit_nonzero(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope")]) == 2
    assert "annotations.json" in capsys.readouterr().err
    assert cli.main(["eval", "--run", str(tmp_path), "--data", str(tmp_path)]) == 2
    assert "checkpoint.bin" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path)]) == 2


def train_and_eval(tmp_path, name, data_dir, tiny_config, protocol="plain"):
    run = tmp_path / name
    assert cli.main(["train", "--data", str(data_dir), "--config", str(tiny_config),
                     "--epochs", "2", "--max-steps", "3", "--seed", "3", "--out", str(run)]) == 0
    assert cli.main(["eval", "--run", str(run), "--data", str(data_dir), "--protocol", protocol,
                     "--budget", "4"]) == 0
    return run


def test_train_eval_is_deterministic(tmp_path, data_dir, tiny_config):
    a = train_and_eval(tmp_path, "a", data_dir, tiny_config)
    b = train_and_eval(tmp_path, "b", data_dir, tiny_config)
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    for name in ("report_box.json", "report_mask.json", "predictions.json"):
        assert (a / "eval_plain" / name).read_bytes() == (b / "eval_plain" / name).read_bytes()
    assert len((a / "metrics.jsonl").read_text().splitlines()) == 3


def test_cross_category_eval_uses_novel_ground_truth_only(tmp_path, data_dir, tiny_config):
    run = train_and_eval(tmp_path, "cc", data_dir, tiny_config, "cross-category")
    report = json.loads((run / "eval_cross_category" / "report_box.json").read_text())
    ann = json.loads((data_dir / "annotations.json").read_text())
    n_novel = sum(a["category_id"] == 4 for a in ann["annotations"])
    assert report["protocol"] == "cross_category" and report["num_gt"] == n_novel
    plain = json.loads((data_dir / "manifest.json").read_text())
    assert plain["command"] == "gen-data"


def test_training_on_split_data_drops_novel_supervision(data_dir):
    ds = cli.load_data_dir(data_dir, "base_only")
    assert all(i.category_id != 4 for s in ds.samples for i in s.instances)
    assert any(i.category_id == 4 for s in ds.samples for i in s.eval_instances)


def test_ablate_tables_and_failed_cells(tmp_path, data_dir, tiny_config, monkeypatch):
    real_train = cli.train

    def flaky(model_cfg, *a, **kw):
        if model_cfg.variant == "mask":
            raise RuntimeError("boom")
        return real_train(model_cfg, *a, **kw)

    monkeypatch.setattr(cli, "train", flaky)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--data", str(data_dir), "--config", str(tiny_config),
                     "--max-steps", "1", "--epochs", "1", "--budget", "4",
                     "--out", str(out)]) == 0
    variants = json.loads((out / "table_variants.json").read_text())
    assert variants["columns"] == ["method", "AR_box", "AR", "AR_0.5", "AR_0.75", "AR_small",
                                   "AR_med", "AR_large"]
    assert [r["method"] for r in variants["rows"]] == list(cli.VARIANTS)
    status = {r["method"]: r["status"] for r in variants["rows"]}
    assert status["mask"].startswith("failed") and status["box"] == "ok"
    neck = json.loads((out / "table_neck.json").read_text())
    assert [(r["DCN"], r["BiFPN"]) for r in neck["rows"]] == [("", ""), ("", "x")]
    for stem in ("table_variants", "table_neck"):
        for ext in (".csv", ".png", ".md"):
            assert (out / (stem + ext)).stat().st_size > 0
    png = (out / "table_variants.png").read_bytes()
    assert cli.main(["report", str(out)]) == 0
    assert (out / "table_variants.png").read_bytes() == png


def test_ablate_needs_two_cells(tmp_path, data_dir, capsys):
    assert cli.main(["ablate", "--data", str(data_dir), "--axis", "variant",
                     "--variants", "box"]) == 2
    assert cli.main(["ablate", "--data", str(data_dir), "--variants", "box,xyz"]) == 2
    assert "xyz" in capsys.readouterr().err
