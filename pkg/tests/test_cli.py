import json

import pytest

from cpce.cli import EXIT_CODES, compare_histories, main, resolve_config, CliError
from cpce.container import load_container
from cpce.data import load_volume
from cpce.trainer import HistoryRecord

TINY = {
    "data": {"n_volumes": 2, "n_val_volumes": 1, "n_slices": 4, "size": 64,
             "train_patches": 256, "val_patches": 64},
    "train": {"epochs": 1, "eval_batch": 64},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--data-dir", str(root / "data"), "--runs-dir", str(root / "runs")]
    assert main([*base, "simulate"]) == 0
    return root, base


def run_dirs(root, prefix):
    return sorted(p for p in (root / "runs").iterdir() if p.name.startswith(prefix))


def test_simulate_layout(workspace):
    root, _ = workspace
    data = root / "data"
    assert (data / "manifest.json").exists()
    assert (data / "train" / "vol00_ld.cpce").exists()
    assert load_volume(data / "val" / "vol00_nd.cpce").shape == (4, 64, 64)


def test_train_twice_identical(workspace, tmp_path):
    root, base = workspace
    assert main([*base, "train", "--init", "scratch", "--quiet", "--out", str(tmp_path / "a")]) == 0
    assert main([*base, "train", "--init", "scratch", "--quiet", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "history.csv").read_text()
    assert a == (tmp_path / "b" / "history.csv").read_text()
    assert a.splitlines()[0] == "step,pl,wd,mse"
    echoed = json.loads((tmp_path / "a" / "config.json").read_text())
    assert echoed["config"]["data"]["size"] == 64 and echoed["config"]["train"]["batch_size"] == 128


def test_run_directory_named_by_config(workspace):
    root, base = workspace
    assert main([*base, "train", "--quiet"]) == 0
    assert main([*base, "train", "--quiet"]) == 0
    dirs = run_dirs(root, "train-")
    assert len(dirs) == 1 and (dirs[0] / "final.cpce").exists()


@pytest.fixture(scope="module")
def trained(workspace):
    root, base = workspace
    out = root / "trained"
    assert main([*base, "train", "--quiet", "--out", str(out)]) == 0
    return out / "final.cpce"


def test_inflate_verify_passes(workspace, trained, capsys):
    root, base = workspace
    out = root / "g3.cpce"
    code = main([*base, "inflate", "--from", str(trained), "--slices", "3", "--out", str(out),
                 "--verify", str(root / "data" / "val" / "vol00_ld.cpce")])
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert code == 0
    assert line.endswith("PASS")
    assert float(line.split()[0].split("=")[1]) <= 1e-5
    assert "generator.depth_schedule" in load_container(out)


def test_denoise_evaluate_compare(workspace, trained, tmp_path, capsys):
    root, base = workspace
    vol = root / "data" / "val" / "vol00_ld.cpce"
    assert main([*base, "denoise", "--model", str(trained), "--volume", str(vol),
                 "--out", str(tmp_path / "den.cpce")]) == 0
    assert load_volume(tmp_path / "den.cpce").shape == (4, 64, 64)
    assert main([*base, "evaluate", "--model", "none", "--testset", str(root / "data" / "val"),
                 "--out", str(tmp_path / "ev"), "--png", "0", "1", "--roi", "0", "0", "32", "32"]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert len(report["rows"]) == 4 and report["model_id"] == "LDCT"
    assert (tmp_path / "ev" / "vol00_slice001.png").exists()
    assert main([*base, "evaluate", "--model", str(trained), "--testset", str(root / "data" / "val"),
                 "--out", str(tmp_path / "ev2")]) == 0
    hist = trained.parent / "history.csv"
    capsys.readouterr()
    assert main(["compare", "--histories", str(hist), str(hist), "--labels", "a", "b",
                 "--out", str(tmp_path / "cmp.json")]) == 0
    assert "a" in capsys.readouterr().out
    assert json.loads((tmp_path / "cmp.json").read_text())["runs"]["a"]["records"] == 2


def test_transfer_train(workspace, trained, tmp_path):
    root, base = workspace
    assert main([*base, "train", "--from", str(trained), "--slices", "3", "--quiet",
                 "--out", str(tmp_path / "t")]) == 0
    lines = (tmp_path / "t" / "history.csv").read_text().splitlines()
    assert lines[1].startswith("0,")


def test_compare_reports_when_scratch_reaches_transfer_start():
    transfer = [HistoryRecord(0, 5.0, 1.0, 0.01), HistoryRecord(10, 4.0, 1.0, 0.009)]
    scratch = [HistoryRecord(10, 9.0, 1.0, 0.02), HistoryRecord(20, 6.0, 1.0, 0.015),
               HistoryRecord(30, 4.9, 1.0, 0.011)]
    s = compare_histories({"transfer": transfer, "scratch": scratch}, steps_per_epoch=20)
    (item,) = s["reach_transfer_start"]
    assert item["other"] == "scratch" and item["reached"] == {"step": 30, "epoch": 1.5}


@pytest.mark.parametrize("argv, code", [
    (["bogus"], "usage"),
    (["inflate", "--from", "missing.cpce", "--slices", "3", "--out", "x.cpce"], "missing_file"),
    (["--config", "nope.json", "simulate"], "missing_file"),
    (["compare", "--histories", "missing.csv"], "missing_file"),
    (["train", "--from", "x.cpce"], "usage"),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    if argv[:2] == ["train", "--from"]:
        (tmp_path / "x.cpce").write_bytes(b"")
    assert main(argv) == EXIT_CODES[code]
    if code != "usage" or argv[0] != "bogus":
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith(f"error: code={code} exit={EXIT_CODES[code]} message=")


def test_schema_errors_name_the_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": 1e-4, "momentum": 0.9}}))
    assert main(["--config", str(bad), "simulate"]) == EXIT_CODES["schema"]
    assert "train.momentum" in capsys.readouterr().err
    with pytest.raises(CliError, match="data.size"):
        resolve_config(overrides={"data": {"size": {"x": 1}}})


def test_corrupt_checkpoint_is_format_error(tmp_path, capsys):
    (tmp_path / "bad.cpce").write_bytes(b"CPCE\x01\x00\x00\x00\x05\x00\x00\x00")
    (tmp_path / "v.cpce").write_bytes(b"")
    code = main(["denoise", "--model", str(tmp_path / "bad.cpce"), "--volume", str(tmp_path / "v.cpce"),
                 "--out", str(tmp_path / "o.cpce")])
    assert code == EXIT_CODES["format"]
    assert "offset" in capsys.readouterr().err


def test_data_dir_env_fallback(monkeypatch):
    monkeypatch.setenv("CPCE_DATA_DIR", "/somewhere/data")
    assert resolve_config()["paths"]["data_dir"] == "/somewhere/data"


def test_missing_dataset(tmp_path):
    assert main(["--data-dir", str(tmp_path / "empty"), "--runs-dir", str(tmp_path / "r"),
                 "train", "--quiet"]) == EXIT_CODES["missing_file"]
