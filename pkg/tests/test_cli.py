import json

import pytest

from eofuse import cli
from eofuse import dataset_io


@pytest.fixture
def config_file(tmp_path):
    payload = {
        "model": {"layers": 1, "heads": 2, "width": 16, "grid": [4, 4]},
        "data": {"height": 24, "width": 24, "min_objects": 1, "max_objects": 2,
                 "train_scenes": 8, "eval_scenes": 4,
                 "p_opt_only": 0.3, "p_sar_only": 0.3, "p_both": 0.4},
        "optimizer": {"steps": 3, "batch_size": 4},
        "seed": 2,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_gen_data(tmp_path, config_file, capsys):
    rc = cli.main(["gen-data", "--config", str(config_file), "--out", str(tmp_path / "o")])
    assert rc == 0
    spec, scenes = dataset_io.read_dataset(tmp_path / "o" / "dataset")
    assert len(scenes) == 12
    assert spec.seed == 2


def test_train_then_eval(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    for name in ("checkpoint.bin", "history.csv", "records.csv", "metrics.csv", "summary.json"):
        assert (out / name).exists()
    train_metrics = (out / "metrics.csv").read_text()

    out2 = tmp_path / "eval"
    rc = cli.main(["eval", "--config", str(config_file),
                   "--ckpt", str(out / "checkpoint.bin"), "--out", str(out2)])
    assert rc == 0
    assert (out2 / "metrics.csv").read_text() == train_metrics


def test_seed_override_changes_results(tmp_path, config_file):
    a, b, c = (tmp_path / n for n in ("a", "b", "c"))
    cli.main(["train", "--config", str(config_file), "--out", str(a)])
    cli.main(["train", "--config", str(config_file), "--out", str(b), "--seed", "2"])
    cli.main(["train", "--config", str(config_file), "--out", str(c), "--seed", "99"])
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    assert (a / "history.csv").read_bytes() != (c / "history.csv").read_bytes()


def test_token_drop_command(tmp_path, config_file):
    out = tmp_path / "td"
    rc = cli.main(["token-drop", "--config", str(config_file), "--out", str(out),
                   "--ratios", "0.5,1.0"])
    assert rc == 0
    lines = (out / "token_drop.csv").read_text().strip().split("\n")
    assert lines[0] == "ratio,strategy,accuracy,seed"
    assert len(lines) == 5


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tyop": 1}), encoding="utf-8")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_divergence_exit_code(tmp_path, config_file, recwarn):
    import warnings
    payload = json.loads(config_file.read_text())
    payload["optimizer"] = {"steps": 60, "batch_size": 6, "step_size": 1e4}
    diverge = tmp_path / "diverge.json"
    diverge.write_text(json.dumps(payload), encoding="utf-8")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rc = cli.main(["train", "--config", str(diverge), "--out", str(tmp_path / "x")])
    assert rc == 3


def test_io_error_exit_code(tmp_path, config_file):
    rc = cli.main(["eval", "--config", str(config_file),
                   "--ckpt", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "x")])
    assert rc == 4


def test_bad_ratio_exit_code(tmp_path, config_file):
    rc = cli.main(["token-drop", "--config", str(config_file),
                   "--out", str(tmp_path / "x"), "--ratios", "abc"])
    assert rc == 2
    rc = cli.main(["token-drop", "--config", str(config_file),
                   "--out", str(tmp_path / "x"), "--ratios", "1.5"])
    assert rc == 2
