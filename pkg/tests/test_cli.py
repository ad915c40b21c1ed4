import csv
import os

import numpy as np
import pytest

from arwb import cli
from arwb import scenegen as S
from arwb.config import SCHEMA, RunConfig, example_path
from arwb.errors import ConfigError


def run(workdir, *argv):
    return cli.main(["--workdir", str(workdir), *argv])


def read_metrics(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_gen_is_byte_identical(tmp_path):
    for w in ("a", "b"):
        assert run(tmp_path / w, "gen", "--kind", "sign", "--n", "6", "--seed", "4") == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b


def test_gen_rejects_zero_scenes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "gen", "--kind", "road", "--n", "0")
    assert exc.value.code == 2


def test_arw_seed_overrides_flag(tmp_path, monkeypatch):
    run(tmp_path, "gen", "--kind", "road", "--n", "3", "--seed", "2", "--out", "plain")
    monkeypatch.setenv("ARW_SEED", "2")
    run(tmp_path, "gen", "--kind", "road", "--n", "3", "--seed", "9", "--out", "env")
    a, b = S.read_dataset(str(tmp_path / "plain")), S.read_dataset(str(tmp_path / "env"))
    np.testing.assert_array_equal(a.images(), b.images())
    assert "seed=2" in (tmp_path / "env" / "manifest.csv").read_text().splitlines()[0]


def test_sequence_gen(tmp_path):
    run(tmp_path, "gen", "--kind", "sequence", "--n", "4", "--d0", "60", "--d1", "30")
    data = S.read_dataset(str(tmp_path / "data" / "sequence-train"))
    np.testing.assert_allclose(data.distances(), [60, 50, 40, 30])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    run(w, "gen", "--kind", "sign", "--n", "16", "--out", "signs")
    run(w, "gen", "--kind", "road", "--n", "16", "--out", "road")
    assert run(w, "train", "--model", "detector", "--data", "signs", "--epochs", "1", "--out", "det.ckpt") == 0
    assert run(w, "train", "--model", "regressor", "--data", "road", "--epochs", "1", "--out", "reg.ckpt") == 0
    return w


@pytest.mark.parametrize("name", ["fgsm", "autopgd", "rp2"])
def test_attack_audit_respects_linf(work, name):
    eps = 4 / 255
    assert run(work, "attack", "--name", name, "--model", "det.ckpt", "--data", "signs", "--eps", str(eps),
               "--iters", "2", "--out", name) == 0
    rows = read_metrics(work / "out" / name / "metrics.csv")
    assert len(rows) == 16
    assert all(float(r["linf"]) <= eps for r in rows)
    assert all(r["bound_ok"] == "1" for r in rows)
    assert len(os.listdir(work / "out" / name / "images")) == 16


def test_simba_audit_respects_query_cap(work):
    assert run(work, "attack", "--name", "simba", "--model", "reg.ckpt", "--data", "road", "--queries", "7",
               "--eps", "0.2", "--out", "simba") == 0
    rows = read_metrics(work / "out" / "simba" / "metrics.csv")
    assert all(int(r["queries_used"]) <= 7 for r in rows)
    assert all(r["bound_ok"] == "1" for r in rows)


def test_wrong_model_for_data_is_config_error(work):
    assert run(work, "attack", "--name", "fgsm", "--model", "reg.ckpt", "--data", "signs") == 3
    assert run(work, "attack", "--name", "fgsm", "--model", "missing.ckpt", "--data", "signs") == 3
    assert run(work, "attack", "--name", "cap", "--model", "det.ckpt", "--data", "signs") == 3


def test_defend_and_report(work):
    assert run(work, "defend", "--name", "medianblur", "--data", "signs", "--model", "det.ckpt") == 0
    assert (work / "out" / "medianblur" / "summary.csv").exists()
    assert run(work, "restore", "--data", "road", "--denoiser", "den.ckpt", "--train-epochs", "1",
               "--steps", "2") == 0
    assert (work / "den.ckpt").exists()


def test_advtrain_and_contrastive_write_checkpoints(work):
    assert run(work, "advtrain", "--model", "detector", "--data", "signs", "--epochs", "1", "--iters", "1",
               "--out", "adv.ckpt") == 0
    assert run(work, "contrastive", "--model", "detector", "--data", "signs", "--epochs", "1",
               "--finetune-epochs", "1", "--batch-size", "8", "--init", "det.ckpt", "--out", "con.ckpt") == 0
    assert (work / "adv.ckpt.curve.csv").read_text().startswith("# config_hash=")
    assert (work / "con.ckpt.contrastive.csv").exists()


def test_report_rerenders_raw(tmp_path, capsys):
    raw = tmp_path / "r.raw.csv"
    raw.write_text("# config_hash=abc seed=0\nattack,defense,run_id,map50\nNone,None,x,0.123456\n")
    assert run(tmp_path, "report", "--raw", "r.raw.csv", "--format", "csv") == 0
    out = capsys.readouterr().out
    assert out.splitlines() == ["# config_hash=abc seed=0", "attack,defense,map50", "None,None,0.12"]


def test_unknown_config_key(tmp_path):
    (tmp_path / "bad.cfg").write_text("[attack]\nepsilon = 0.03\nepsiloon = 0.1\n")
    assert run(tmp_path, "bench", "--config", "bad.cfg") == 3
    (tmp_path / "bad2.cfg").write_text("[attack]\nnames = FGSM, Nope\n")
    assert run(tmp_path, "bench", "--config", "bad2.cfg") == 3


def test_config_defaults_and_hash(monkeypatch):
    monkeypatch.delenv("ARW_SEED", raising=False)
    cfg = RunConfig()
    assert all(cfg[s][k] == d for s, keys in SCHEMA.items() for k, (_, d) in keys.items())
    other = RunConfig.from_text("[bench]\nseed = 1\n")
    assert cfg.hash() != other.hash() and len(cfg.hash()) == 16
    assert RunConfig.from_text(cfg.canonical().replace(" = '", " = ").replace("'\n", "\n")).hash() == cfg.hash()
    monkeypatch.setenv("ARW_SEED", "7")
    assert RunConfig.from_text("[bench]\nseed = 1\n").seed == 7
    with pytest.raises(ConfigError):
        RunConfig.from_text("[model]\nlr = fast\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("[nosuch]\nx = 1\n")


def test_example_config_is_valid(monkeypatch):
    monkeypatch.delenv("ARW_SEED", raising=False)
    cfg = RunConfig.load(example_path())
    cli.validate_config(cfg)
    assert cfg.names("attack") == ["None", "Gaussian", "FGSM", "AutoPGD", "SimBA", "CAP/RP2"]
