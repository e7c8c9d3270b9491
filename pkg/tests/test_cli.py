import csv
import json

import numpy as np
import pytest

from relightbake.cli import config_hash, main, read_config_file, ConfigError
from relightbake.pfm import read_pfm, write_pfm

SMALL = ["--resolution", "16"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["pseudo", "--out", str(d / "data"), "--n-random", "2", "--train-poses", "2", "--test-poses", "1",
                 *SMALL]) == 0
    assert main(["train-cnn", "--data", str(d / "data"), "--out", str(d / "cnn"), "--steps", "3",
                 "--batch", "2"]) == 0
    assert main(["train-hash", "--scene", "spheres", "--out", str(d / "hash"), "--steps", "3", "--rays", "32",
                 "--dirs", "4", *SMALL]) == 0
    return d


def test_pseudo_outputs(workdir):
    m = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(m["poses"]) == 4
    run = json.loads((workdir / "data" / "run.json").read_text())
    assert run["command"] == "pseudo" and len(run["config_hash"]) == 16


def test_train_outputs_and_resume(workdir):
    rows = list(csv.reader(open(workdir / "cnn" / "loss.csv")))
    assert rows[0][:2] == ["step", "total"] and len(rows) == 4
    assert main(["train-cnn", "--data", str(workdir / "data"), "--out", str(workdir / "cnn"), "--steps", "5",
                 "--batch", "2", "--resume", str(workdir / "cnn" / "cnn.rbck")]) == 0
    rows = list(csv.reader(open(workdir / "cnn" / "loss.csv")))
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
    assert (workdir / "hash" / "hash.rbck").exists()


def test_render_teacher_and_eval(workdir, capsys):
    out = workdir / "r1"
    assert main(["render", "--out", str(out), "--spp", "2", "--bounces", "1", *SMALL]) == 0
    for name in ("raw.pfm", "radiance.pfm", "radiance.png", "run.json"):
        assert (out / name).exists()
    aux = sorted(p.name for p in (out / "aux").iterdir())
    assert aux == ["albedo.pfm", "depth.pfm", "depth_gradient.pfm", "indirect.pfm", "mask.pfm", "normal.pfm"]
    assert np.all(read_pfm(out / "aux" / "depth_gradient.pfm")[..., 2] == 0)
    capsys.readouterr()
    assert main(["eval", str(out / "radiance.pfm"), str(out / "radiance.pfm")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["psnr"] == 99.0 and res["ssim"] == pytest.approx(1.0) and res["lpips"] == "n/a"


@pytest.mark.filterwarnings("ignore:zero masked albedo mean")
def test_render_baked(workdir):
    out = workdir / "rb"
    assert main(["render", "--out", str(out), "--provider", "baked", "--cnn", str(workdir / "cnn" / "cnn.rbck"),
                 "--hash", str(workdir / "hash" / "hash.rbck"), "--spp", "1", "--bounces", "2",
                 "--calibrate-albedo", *SMALL]) == 0
    run = json.loads((out / "run.json").read_text())
    assert len(run["albedo_scale"]) == 3
    assert np.all(np.isfinite(read_pfm(out / "radiance.pfm")))


def test_bench(workdir):
    out = workdir / "bench"
    assert main(["bench", "--out", str(out), "--spp-list", "1,2", "--repeats", "1", "--no-denoise", *SMALL]) == 0
    rows = list(csv.reader(open(out / "latency.csv")))
    assert [r[0] for r in rows[1:]] == ["teacher@1", "teacher@2"]


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("spp = 3  # comment\nbounces = 1\nresolution = 8\n")
    out = tmp_path / "o"
    assert main(["render", "--config", str(cfg), "--spp", "1", "--out", str(out)]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["spp"] == 1 and run["config"]["bounces"] == 1 and run["config"]["resolution"] == 8


@pytest.mark.parametrize("argv", [
    ["render", "--scene", "/no/such.scene"],
    ["render", "--env", "/no/such.pfm"],
    ["render", "--provider", "baked"],
    ["render", "--provider", "baked", "--cnn", "/x.rbck", "--hash", "/y.rbck"],
    ["render", "--threads", "0", "--resolution", "8"],
    ["train-cnn"],
    ["train-cnn", "--data", "/no/such/dir"],
    ["train-hash", "--dirs", "8"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_config_key_and_value(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("sppp = 3\n")
    assert main(["render", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("spp = many\n")
    assert main(["render", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["render", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError):
        cfg.write_text("no equals sign\n")
        read_config_file(cfg)


def test_eval_errors(tmp_path):
    write_pfm(tmp_path / "a.pfm", np.zeros((12, 12, 3)))
    write_pfm(tmp_path / "b.pfm", np.zeros((12, 13, 3)))
    assert main(["eval", str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm")]) == 2
    assert main(["eval", str(tmp_path / "a.pfm"), str(tmp_path / "none.pfm")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(workdir, tmp_path):
    assert main(["train-cnn", "--data", str(workdir / "data"), "--out", str(tmp_path / "c"), "--steps", "4",
                 "--batch", "2", "--lr", "1e37"]) == 3


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["render", "--bounces", "5", "--out", "x"])
    assert e.value.code == 2


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
