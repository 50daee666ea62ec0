import csv
import json
import os

import pytest

from pgada.cli import main, resolve_config, CliError

FAST = {"epochs": 3, "eta": 0.05, "batch": 64, "pool_per_class": 16, "pool_classes": 8,
        "episodes": 20}


def write_cfg(path, **kw):
    cfg = {**FAST, **kw}
    path.write_text(json.dumps(cfg))
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data_dir(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.json")
    out = tmp_path / "run"
    code, _, _ = run(capsys, "gen-data", "--config", cfg, "--out", out)
    assert code == 0
    return cfg, out


def test_gen_data_defaults(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "d")
    assert code == 0 and err.startswith("[info]")
    with open(tmp_path / "d" / "pool.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["label", "x0"] and len(rows[0]) == 17
    assert len(rows) - 1 >= 128
    doc = json.loads((tmp_path / "d" / "episodes.json").read_text())
    assert len(doc["episodes"]) == 500


def test_gen_data_idempotent(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--seed", 4, "--out", tmp_path / name)[0] == 0
    for f in ("pool.csv", "episodes.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "gen-data", "--out", blocker / "sub")
    assert code == 2
    assert err.startswith("[error]")


def test_train_curve_and_loss_drop(data_dir, capsys):
    cfg, out = data_dir
    code, _, _ = run(capsys, "train", "--config", cfg, "--out", out, "--epochs", 8)
    assert code == 0
    with open(out / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "L_ori", "L_adv", "L_self", "variant"]
    assert len(rows) == 8
    hist = json.loads((out / "checkpoint.json").read_text())["meta"]["history"]
    assert hist[-1]["combined"] < hist[0]["combined"]


def test_default_training_run_lowers_loss(tmp_path, capsys):
    out = tmp_path / "d"
    assert run(capsys, "gen-data", "--out", out)[0] == 0
    assert run(capsys, "train", "--out", out)[0] == 0
    hist = json.loads((out / "checkpoint.json").read_text())["meta"]["history"]
    assert hist[-1]["combined"] < hist[0]["combined"]


def test_ablation_flag_in_curve(data_dir, capsys):
    cfg, out = data_dir
    assert run(capsys, "train", "--config", cfg, "--out", out, "--ablation", "fixed_g")[0] == 0
    with open(out / "curve.csv") as fh:
        assert {r["variant"] for r in csv.DictReader(fh)} == {"fixed_g"}


def test_resume_reproduces_next_epoch(data_dir, tmp_path, capsys):
    cfg, out = data_dir
    pool = out / "pool.csv"
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "full", "--pool", pool,
               "--epochs", 4)[0] == 0
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "half", "--pool", pool,
               "--epochs", 2)[0] == 0
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "rest", "--pool", pool,
               "--epochs", 4, "--resume", tmp_path / "half" / "checkpoint.json")[0] == 0
    assert (tmp_path / "full" / "curve.csv").read_bytes() == (tmp_path / "rest" / "curve.csv").read_bytes()
    assert (tmp_path / "full" / "checkpoint.json").read_bytes() == \
        (tmp_path / "rest" / "checkpoint.json").read_bytes()


def test_missing_pool(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", tmp_path / "nothing")
    assert code == 2 and "pool" in err


def test_nan_loss_exit_code(data_dir, capsys):
    cfg, out = data_dir
    code, _, err = run(capsys, "train", "--config", cfg, "--out", out, "--eta", "1e200")
    assert code == 3
    assert err.startswith("[error]")


def test_eval_clean_separable(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", class_sep=10.0, k_shot=5, eta=0.1, epochs=30,
                    pool_per_class=80, pool_classes=16, batch=128, episodes=100)
    out = tmp_path / "e"
    assert run(capsys, "gen-data", "--config", cfg, "--out", out)[0] == 0
    assert run(capsys, "train", "--config", cfg, "--out", out)[0] == 0
    code, stdout, _ = run(capsys, "eval", "--config", cfg, "--out", out,
                          "--checkpoint", out / "checkpoint.json")
    assert code == 0
    mean, pm, hw = stdout.split()
    assert pm == "±" and len(mean.split(".")[1]) == 4 and len(hw.split(".")[1]) == 4
    assert float(mean) >= 0.95


def test_eval_flags(data_dir, capsys):
    cfg, out = data_dir
    assert run(capsys, "train", "--config", cfg, "--out", out)[0] == 0
    code, _, _ = run(capsys, "eval", "--config", cfg, "--out", out, "--checkpoint",
                     out / "checkpoint.json", "--no-ot", "--episodes", 7, "--dump-plans")
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["payload"]["config"]["eval"]["use_ot"] is False
    assert doc["payload"]["episode_count"] == 7
    with open(out / "report.csv") as fh:
        assert len(list(csv.reader(fh))) == 8
    assert len(os.listdir(out / "plans")) == 7


def test_eval_shape_mismatch(data_dir, tmp_path, capsys):
    cfg, out = data_dir
    other = tmp_path / "other"
    assert run(capsys, "gen-data", "--config", cfg, "--out", other, "--p", 5)[0] == 0
    assert run(capsys, "train", "--config", cfg, "--out", other, "--p", 5)[0] == 0
    code, _, err = run(capsys, "eval", "--config", cfg, "--out", out, "--checkpoint",
                       other / "checkpoint.json")
    assert code == 2 and "inputs" in err


def test_verify_theorem1(tmp_path, capsys):
    code, stdout, _ = run(capsys, "verify", "theorem1", "--out", tmp_path, "--verify-episodes", 200)
    assert code == 0
    assert all(line.startswith("PASS") for line in stdout.splitlines())
    with open(tmp_path / "theorem1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    for d in ("4", "16"):
        errs = [float(r["error"]) for r in rows if r["dim"] == d]
        assert errs == sorted(errs) and errs[0] == 0.0


def test_verify_failure_exit_code(tmp_path, capsys):
    # 1000 samples are too few for the 0.1 tolerance on the equal-law case
    code, stdout, _ = run(capsys, "verify", "lemma1", "--out", tmp_path, "--lemma-samples", 1000)
    assert code == 4
    assert any(line.startswith("FAIL") for line in stdout.splitlines())
    assert any(line.startswith("PASS") for line in stdout.splitlines())


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "eta": 0.1,\n  "epochs": \n}')
    code, _, err = run(capsys, "verify", "lemma1", "--config", bad, "--out", tmp_path)
    assert code == 2
    assert f"{bad}:4:1" in err


@pytest.mark.parametrize("doc,needle", [
    ({"bogus": 1}, "unknown config key"),
    ({"eta": -1}, "out of range"),
    ({"beta": 1.0}, "out of range"),
    ({"epochs": 2.5}, "integer"),
    ({"variant": "best"}, "out of range"),
    ([1, 2], "JSON object"),
])
def test_config_rejections(tmp_path, capsys, doc, needle):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "gen-data", "--config", path, "--out", tmp_path / "o")
    assert code == 2 and needle in err


def test_bad_flag_value(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--n-way", "1")
    assert code == 2 and "--n-way" in err
    code, _, _ = run(capsys, "gen-data")
    assert code == 2


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 3, "eta": 0.5}))
    cfg = resolve_config("train", str(path), {"epochs": "7"})
    assert cfg["epochs"] == 7 and cfg["eta"] == 0.5 and cfg["batch"] == 128
    assert resolve_config("train", None, {})["epochs"] == 20
    with pytest.raises(CliError):
        resolve_config("train", None, {"nope": 1})


def test_ablate_small(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "a.json", episodes=100, epochs=2, fragile_dim=0,
                    variants=["full", "no_ot"])
    code, stdout, _ = run(capsys, "ablate", "--config", cfg, "--out", tmp_path, "--jobs", 2)
    assert code == 0
    assert [line.split()[0] for line in stdout.splitlines()] == ["full", "no_ot"]
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert len(doc["payload"]) == 2 and "wall_clock_seconds" in doc["metadata"]
