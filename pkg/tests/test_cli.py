import json

import numpy as np
import pytest

from hybridreg import cli, pipeline
from hybridreg.exceptions import DivergenceError
from hybridreg.raster import save_png

FAST = ["--resolution", "128", "--iters", "30", "20", "10"]


@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["phantom", str(root / "src"), "--n", "2", "--size", "160"]) == 0
    assert cli.main(["synth", str(root / "src"), "--out", str(root / "ds"), "--n-pairs", "3",
                     "--resolution", "128"]) == 0
    return root


def _pair(root, i=0):
    p = root / "ds" / f"pair_{i:04d}"
    return [str(p / "fixed.png"), str(p / "moving.png")], str(p / "points.json")


def test_register_ok_and_json_line(pairs, tmp_path, capsys):
    imgs, pts = _pair(pairs)
    code = cli.main(["register", *imgs, "--points", pts, "--out", str(tmp_path / "r"), *FAST])
    assert code == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["stage"] == "ok" and line["rmse_final"] < line["rmse_global"]


def test_register_report_deterministic(pairs, tmp_path):
    imgs, pts = _pair(pairs, 1)
    for d in ("a", "b"):
        assert cli.main(["register", *imgs, "--points", pts, "--out", str(tmp_path / d), *FAST]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_flag_precedence(pairs, tmp_path):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("resolution=96\noptim.weights.smooth=4\n")
    imgs, _ = _pair(pairs)
    out = tmp_path / "r"
    args = ["register", *imgs, "--out", str(out), "--config", str(cfgfile), "--iters", "5", "5", "5",
            "--set", "optim.weights.encc=1.5", "--lambda-smooth", "3"]
    assert cli.main(args) == 0
    cfg = json.loads((out / "report.json").read_text())["config"]
    assert cfg["resolution"] == 96
    assert cfg["optim"]["weights"] == {"position": 5.0, "encc": 1.5, "smooth": 3.0}


def test_register_missing_file(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["register", str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--out", str(out)]) == 1
    assert not out.exists()


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["register", "only-one"])
    assert exc.value.code == 1


def test_register_global_failure(tmp_path):
    rng = np.random.default_rng(0)
    save_png(tmp_path / "a.png", rng.random((96, 96)))
    save_png(tmp_path / "b.png", rng.random((96, 96)))
    mf = tmp_path / "m.json"
    mf.write_text(json.dumps({"frame": [96, 96], "matches": [[1, 1, 2, 2], [40, 40, 41, 41]]}))
    out = tmp_path / "o"
    code = cli.main(["register", str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--matches", str(mf),
                     "--out", str(out), "--resolution", "0"])
    assert code == 2
    assert json.loads((out / "report.json").read_text())["stage"] == "global_failed"


def test_register_deform_failure(pairs, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("smooth")

    monkeypatch.setattr(pipeline, "register_deformable", boom)
    imgs, _ = _pair(pairs)
    assert cli.main(["register", *imgs, "--out", str(tmp_path / "o"), *FAST]) == 3


def test_bad_match_file_is_usage_error(pairs, tmp_path):
    mf = tmp_path / "m.json"
    mf.write_text("{not json")
    imgs, _ = _pair(pairs)
    assert cli.main(["register", *imgs, "--matches", str(mf), "--out", str(tmp_path / "o"), *FAST]) == 1


def test_batch_and_eval(pairs, tmp_path, capsys):
    out = tmp_path / "b"
    assert cli.main(["batch", str(pairs / "ds" / "manifest.csv"), "--out", str(out), "--threads", "1", *FAST]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["pairs"] == 3 and summary["failed"] == 0
    assert cli.main(["eval", str(out), "--out", str(tmp_path / "e.json"), "--csv", str(tmp_path / "e.csv")]) == 0
    ev = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert ev["auc"] == pytest.approx(summary["auc"])
    assert len(json.loads((tmp_path / "e.json").read_text())["pairs"]) == 3
    assert (tmp_path / "e.csv").read_text().count("\n") == 4


def test_batch_all_failed(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("fixed,moving\nno1.png,no2.png\nno3.png,no4.png\n")
    assert cli.main(["batch", str(m), "--out", str(tmp_path / "o"), "--threads", "1"]) == 2


def test_eval_nothing(tmp_path):
    assert cli.main(["eval", str(tmp_path)]) == 1


def test_synth_repro_bytes(pairs, tmp_path):
    assert cli.main(["synth", str(pairs / "src"), "--out", str(tmp_path / "again"), "--n-pairs", "2",
                     "--resolution", "128"]) == 0
    for name in ("fixed.png", "moving.png", "gt_field.hrfd"):
        a = (tmp_path / "again" / "pair_0001" / name).read_bytes()
        assert a == (pairs / "ds" / "pair_0001" / name).read_bytes()
