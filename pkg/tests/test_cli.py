import json
import subprocess
import sys

import pytest

from dam.checkpoint import load_checkpoint
from dam.cli import run
from dam.config import dumps


@pytest.fixture
def tiny_ini(tiny_cfg, tmp_path):
    tiny_cfg.train.episodes = 8
    tiny_cfg.train.eval_episodes = 3
    p = tmp_path / "tiny.ini"
    p.write_text(dumps(tiny_cfg))
    return str(p)


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_unknown_flag_is_a_validation_error(capsys):
    assert run(["params", "--bogus"]) == 1
    line = _error_line(capsys)
    assert line["error"] == "validation" and "--bogus" in line["message"]


def test_missing_config_file(capsys, tmp_path):
    assert run(["params", "--config", str(tmp_path / "none.ini")]) == 1
    assert _error_line(capsys)["error"] == "validation"


def test_bad_choice(capsys):
    assert run(["params", "--kshot", "3"]) == 1


def test_ablate_flag_conflict(capsys):
    assert run(["ablate", "--ablation", "b3d", "--b3d", "off", "--episodes", "0"]) == 1
    assert "conflicts" in _error_line(capsys)["message"]


def test_params_table(capsys):
    assert run(["params"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("config {")
    assert out.strip().splitlines()[-1].split() == ["total", "51,001"]


def test_runtime_failure_exits_two(capsys, tmp_path):
    bad = tmp_path / "bad.damc"
    bad.write_bytes(b"DAMC garbage")
    assert run(["eval", "--checkpoint", str(bad)]) == 2
    line = _error_line(capsys)
    assert line["error"] == "runtime" and line["command"] == "eval"


def test_train_twice_gives_identical_checkpoints(capsys, tiny_ini, tmp_path):
    digests = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        assert run(["train", "--config", tiny_ini, "--out", str(out_dir)]) == 0
        last = capsys.readouterr().out.strip().splitlines()[-1].split()
        assert last[0] == "checkpoint" and last[2] == "sha256"
        digests.append(last[3])
        assert len((out_dir / "metrics.ndjson").read_text().splitlines()) == 2 + 1
    assert digests[0] == digests[1]
    assert (tmp_path / "a" / "model.damc").read_bytes() == (tmp_path / "b" / "model.damc").read_bytes()

    assert run(["eval", "--checkpoint", str(tmp_path / "a" / "model.damc"), "--episodes", "3"]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    train_rec = json.loads((tmp_path / "a" / "metrics.ndjson").read_text().splitlines()[-1])
    assert rec["mIoU"] == train_rec["mIoU"]


def test_eval_fold_mismatch(capsys, tiny_ini, tmp_path):
    assert run(["train", "--config", tiny_ini, "--episodes", "0", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert run(["eval", "--checkpoint", str(tmp_path / "model.damc"), "--fold", "2"]) == 1
    assert "fold" in _error_line(capsys)["message"]


def test_gen_data(capsys, tmp_path):
    assert run(["gen-data", "--episodes", "2", "--size", "32", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["episode_00000", "episode_00001"]
    assert run(["gen-data", "--size", "30", "--out", str(tmp_path)]) == 1


def test_gradcheck_subset(capsys):
    assert run(["gradcheck", "--ops", "add", "matmul", "--trials", "2"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_pretrain_backbone_writes_weights(capsys, tmp_path):
    out = tmp_path / "bb.damc"
    assert run(["pretrain-backbone", "--epochs", "0", "--out", str(out)]) == 0
    assert all(not k.startswith("backbone.") for k in load_checkpoint(str(out)).tensors)


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "dam.cli", "params", "--fold", "9"],
                         capture_output=True, text=True)
    assert res.returncode == 1
    assert json.loads(res.stderr)["error"] == "validation"
