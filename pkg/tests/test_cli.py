import json
import subprocess
import sys

import pytest

from tumorseg.cli import loglog_slope, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def config_of(stdout, name):
    first = stdout.splitlines()[0]
    assert first.startswith(f"config {name} ")
    return json.loads(first[len(f"config {name} "):])


def test_gen_data_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--cases", "4", "--size", "32", "--seed", "7", "--out", str(tmp_path / d))
        assert code == 0
    cfg = config_of(out, "gen-data")
    assert cfg["cases"] == 4 and cfg["noise"] == 0.1
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == [f"case{i:03d}.vol4" for i in range(4)]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_data_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TUMORSEG_DATA", str(tmp_path / "env"))
    code, out, _ = run(capsys, "gen-data", "--cases", "1", "--size", "16")
    assert code == 0 and config_of(out, "gen-data")["out"] == str(tmp_path / "env")
    assert (tmp_path / "env" / "case000.vol4").exists()


def test_unknown_flag_exits_2():
    r = subprocess.run([sys.executable, "-m", "tumorseg", "gen-data", "--bogus"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_contradicting_norm_exits_2(tmp_path, capsys):
    run(capsys, "gen-data", "--cases", "2", "--size", "16", "--out", str(tmp_path / "d"))
    code, _, err = run(capsys, "train", "--preset", "BL", "--norm", "group", "--data", str(tmp_path / "d"),
                       "--out", str(tmp_path / "r"))
    assert code == 2 and "group" in err


def test_indivisible_patch_exits_2(tmp_path, capsys):
    run(capsys, "gen-data", "--cases", "2", "--size", "16", "--out", str(tmp_path / "d"))
    code, _, err = run(capsys, "train", "--patch", "12", "--levels", "4", "--data", str(tmp_path / "d"),
                       "--out", str(tmp_path / "r"))
    assert code == 2 and "divisible" in err


def test_missing_data_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r"))
    assert code == 1 and "does not exist" in err


def test_grad_check_single_preset(capsys):
    code, out, _ = run(capsys, "grad-check", "--levels", "3", "--patch", "8", "--preset", "BL+GN",
                       "--coords", "2", "--no-layers")
    assert code == 0
    last = out.strip().splitlines()[-1]
    assert last.startswith("max relative error:") and "PASS" in last
    assert float(last.split()[3]) < 1e-4


def test_bench_attention_slopes(capsys):
    code, out, _ = run(capsys, "bench-attention", "--sides", "4,8,16")
    assert code == 0
    assert out.count("exact") == 2
    slope_line = [ln for ln in out.splitlines() if ln.startswith("log-log slope, score term")][0]
    axial = float(slope_line.split("axial ")[1].split(",")[0])
    full = float(slope_line.split("full ")[1])
    assert abs(axial - 4.0) < 0.1 and abs(full - 6.0) < 0.1


def test_loglog_slope():
    assert loglog_slope([2, 4, 8], [3 * 2 ** 5, 3 * 4 ** 5, 3 * 8 ** 5]) == pytest.approx(5.0, abs=1e-12)


def test_smoke_pipeline(tmp_path, capsys):
    d, r, p, e, pp = (tmp_path / n for n in ("data", "run", "probs", "ens", "post"))
    assert run(capsys, "gen-data", "--cases", "3", "--size", "16", "--out", str(d))[0] == 0
    code, out, _ = run(capsys, "train", "--preset", "BL+AA", "--data", str(d), "--out", str(r), "--patch", "8",
                       "--levels", "3", "--epochs", "1", "--minibatches", "2", "--folds", "2", "--float64")
    assert code == 0
    cfg = config_of(out, "train")
    assert cfg["batch_size"] == 2 and cfg["folds"] == 2 and cfg["norm"] == "batch"
    assert cfg["encoder_channels"] == [8, 16, 32] and cfg["attention_schedule"] == {"1": [2, 4], "2": [4, 8]}
    models = sorted(r.glob("fold_*.ckpt"))
    assert len(models) == 2 and (r / "folds.txt").exists() and (r / "train.log").read_text().count("\n") == 2
    assert run(capsys, "infer", "--model", *map(str, models), "--data", str(d), "--out", str(p))[0] == 0
    assert len(list(p.glob("*.prob3"))) == 6
    assert run(capsys, "ensemble", "--manifest", str(p / "manifest.txt"), "--out", str(e))[0] == 0
    assert len(list(e.glob("*.vol4"))) == 3
    assert run(capsys, "postprocess", "--input", str(e), "--out", str(pp))[0] == 0
    code, out, _ = run(capsys, "eval", "--pred", str(pp), "--gt", str(d), "--csv", str(tmp_path / "m.csv"),
                       "--title", "BL+AA")
    assert code == 0
    table = out.splitlines()[1:]
    assert table[0].split("|")[1].split() == ["ET", "TC", "WT", "Average"]
    assert table[2].startswith("Dice") and table[3].startswith("HD95")
    assert (tmp_path / "m.csv").read_text().count("\n") == 1 + 3 * 3


def test_no_folds_flag(tmp_path, capsys):
    run(capsys, "gen-data", "--cases", "2", "--size", "16", "--out", str(tmp_path / "d"))
    code, out, _ = run(capsys, "train", "--preset", "BL+L", "--data", str(tmp_path / "d"), "--out",
                       str(tmp_path / "r"), "--patch", "8", "--levels", "3", "--epochs", "1", "--minibatches", "1",
                       "--no-folds", "--batch-size", "1")
    assert code == 0 and config_of(out, "train")["folds"] is None
    assert (tmp_path / "r" / "all.ckpt").exists()
