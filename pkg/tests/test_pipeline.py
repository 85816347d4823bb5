import csv
import json

import numpy as np
import pytest

from hybridreg import pipeline
from hybridreg.exceptions import DivergenceError
from hybridreg.field import load_field
from hybridreg.pipeline import (
    RunConfig,
    collect_results,
    load_config,
    read_manifest,
    register_arrays,
    register_pair,
    run_batch,
    scale_points,
    synth_dataset,
    thread_cap,
)
from hybridreg.raster import save_png
from hybridreg.synth import fundus_phantom

FAST = {"resolution": 128, "optim.iters_per_level": [30, 20, 10]}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    src = root / "src"
    src.mkdir()
    for i in range(3):
        save_png(src / f"s{i}.png", fundus_phantom(192, seed=20 + i))
    manifest = synth_dataset(src, 5, root / "pairs", resolution=128, seed=7)
    return root, manifest


def fast_cfg(**extra):
    return RunConfig().with_overrides({**FAST, **extra})


def test_run_config_defaults():
    c = RunConfig()
    assert c.resolution == 768 and c.ransac_thresh == 3.0
    o = c.optim
    assert (o.weights.position, o.weights.encc, o.weights.smooth) == (5.0, 2.0, 1.0)
    assert (o.stride, o.window, o.top_k) == (8, 15, 120)


def test_overrides_and_unknown_keys():
    c = RunConfig().with_overrides({"optim.weights.smooth": "2.5", "seed": "4", "write_trace_csv": "yes",
                                     "optim.iters_per_level": "5,4,3"})
    assert c.optim.weights.smooth == 2.5 and c.seed == 4 and c.write_trace_csv
    assert list(c.optim.iters_per_level) == [5, 4, 3]
    with pytest.raises(ValueError):
        RunConfig().with_overrides({"optim.nope": 1})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(detector="sift")


def test_load_config_formats(tmp_path):
    (tmp_path / "a.cfg").write_text("# comment\nresolution = 256\noptim.weights.encc=3  # trailing\n")
    c = load_config(tmp_path / "a.cfg")
    assert c.resolution == 256 and c.optim.weights.encc == 3.0
    (tmp_path / "b.json").write_text(json.dumps({"config": c.to_dict()}))
    assert load_config(tmp_path / "b.json") == c
    (tmp_path / "bad.cfg").write_text("resolution\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.cfg")


def test_round_trip_dict():
    c = fast_cfg(seed=3)
    assert RunConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_scale_points_corner_aligned():
    pts = np.array([[0.0, 0.0], [767.0, 767.0], [383.5, 0.0]])
    out = scale_points(pts, (768, 768), (256, 256))
    np.testing.assert_allclose(out, [[0, 0], [255, 255], [127.5, 0]])
    np.testing.assert_allclose(scale_points(out, (256, 256), (768, 768)), pts)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv(pipeline.THREADS_ENV, "3")
    assert thread_cap() == 3
    monkeypatch.setenv(pipeline.THREADS_ENV, "0")
    assert thread_cap() == 1
    monkeypatch.setenv(pipeline.THREADS_ENV, "many")
    with pytest.warns(RuntimeWarning):
        assert thread_cap() >= 1


def test_identity_pair():
    img = fundus_phantom(128, seed=8)
    res = register_arrays(img, img, RunConfig(resolution=0))
    assert res.stage == "ok"
    assert np.abs(res.phi.u).mean() < 0.05 and np.abs(res.phi.v).mean() < 0.05
    pts = np.array([[30.0, 40.0], [90.0, 70.0], [64.0, 64.0]])
    assert np.sqrt(np.mean(np.sum((res.transfer(pts) - pts) ** 2, axis=1))) < 0.1


def test_register_pair_artifacts_and_determinism(dataset, tmp_path):
    root, _ = dataset
    p = root / "pairs" / "pair_0000"
    args = (p / "fixed.png", p / "moving.png", fast_cfg(write_trace_csv=True), None, p / "points.json")
    r1 = register_pair(*args, out_dir=tmp_path / "a")
    register_pair(*args, out_dir=tmp_path / "b")
    names = {f.name for f in (tmp_path / "a").iterdir()}
    assert names == {"warped.png", "field.hrfd", "checkerboard.png", "report.json", "timing.json", "trace.csv"}
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert r1["rmse_final"] < r1["rmse_global"]
    assert r1["config"]["optim"]["weights"] == {"position": 5.0, "encc": 2.0, "smooth": 1.0}
    phi = load_field(tmp_path / "a" / "field.hrfd")
    assert phi.shape == (128, 128)


def test_config_echo_reproduces(dataset, tmp_path):
    root, _ = dataset
    p = root / "pairs" / "pair_0001"
    r1 = register_pair(p / "fixed.png", p / "moving.png", fast_cfg(seed=2), None, p / "points.json", tmp_path / "a")
    cfg2 = load_config(tmp_path / "a" / "report.json")
    r2 = register_pair(p / "fixed.png", p / "moving.png", cfg2, None, p / "points.json")
    assert r2["rmse_final"] == r1["rmse_final"]


def test_missing_input_writes_nothing(tmp_path):
    with pytest.raises(OSError):
        register_pair(tmp_path / "nope.png", tmp_path / "nope2.png", fast_cfg(), out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_too_few_matches_is_global_failure(dataset, tmp_path):
    root, _ = dataset
    p = root / "pairs" / "pair_0000"
    mf = tmp_path / "m.json"
    mf.write_text(json.dumps({"frame": [128, 128], "matches": [[10, 10, 11, 11], [50, 60, 52, 61], [90, 20, 91, 22]]}))
    rep = register_pair(p / "fixed.png", p / "moving.png", fast_cfg(), mf, None, tmp_path / "o")
    assert rep["stage"] == "global_failed" and rep["error"]
    assert json.loads((tmp_path / "o" / "report.json").read_text())["stage"] == "global_failed"
    assert not (tmp_path / "o" / "warped.png").exists()


def test_divergence_is_deform_failure(dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("encc")

    monkeypatch.setattr(pipeline, "register_deformable", boom)
    root, _ = dataset
    p = root / "pairs" / "pair_0000"
    rep = register_pair(p / "fixed.png", p / "moving.png", fast_cfg(), None, None, tmp_path / "o")
    assert rep["stage"] == "deform_failed" and "encc" in rep["error"]
    assert (tmp_path / "o" / "warped_global.png").exists()


def test_manifest_reading(dataset, tmp_path):
    _, manifest = dataset
    rows = read_manifest(manifest)
    assert len(rows) == 5 and rows[0]["fixed"].startswith(str(manifest.parent))
    (tmp_path / "empty.csv").write_text("fixed,moving\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "empty.csv")
    (tmp_path / "nohdr.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "nohdr.csv")


def test_batch_mixed_sources(dataset, tmp_path):
    root, manifest = dataset
    rows = list(csv.DictReader(open(manifest)))
    # give row 1 an explicit match file built from its ground-truth control points
    pts = json.loads((root / "pairs" / rows[1]["points"]).read_text())
    recs = [list(m) + list(f) for f, m in zip(pts["fixed"], pts["moving"])]
    (root / "pairs" / "m1.json").write_text(json.dumps({"frame": pts["frame"], "matches": recs}))
    rows[1]["matches"] = "m1.json"
    rows.append({"fixed": "missing.png", "moving": "missing.png", "matches": "", "points": "",
                 "category": "x", "pair_id": "broken"})
    m2 = root / "pairs" / "mixed.csv"
    with open(m2, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    batch, outcomes = run_batch(m2, fast_cfg(), tmp_path / "b", threads=1)
    assert len(outcomes) == 6 and len(batch.pairs) == 5
    assert [e["pair_id"] for e in batch.errors] == ["broken"]
    doc = json.loads((tmp_path / "b" / "batch.json").read_text())
    assert doc["sources"]["pair_0001"] == "ingested" and doc["sources"]["pair_0000"] == "builtin"
    assert doc["n_rows"] == 6 and doc["n_failed"] == 1
    assert np.median([p.rmse_final / p.rmse_global for p in batch.pairs]) < 1.0
    assert len(collect_results([tmp_path / "b"])) == 5
    assert len(collect_results([tmp_path / "b" / "summary.csv"])) == 5
    assert len(collect_results([tmp_path / "b" / "batch.json"])) == 5


def test_batch_parallel_matches_serial(dataset, tmp_path):
    _, manifest = dataset
    a, _ = run_batch(manifest, fast_cfg(), tmp_path / "s", threads=1)
    b, _ = run_batch(manifest, fast_cfg(), tmp_path / "p", threads=2)
    assert [p.rmse_final for p in a.pairs] == [p.rmse_final for p in b.pairs]


def test_synth_dataset_round_robin_and_repro(dataset, tmp_path):
    root, manifest = dataset
    seen = [json.loads((manifest.parent / f"pair_{i:04d}" / "params.json").read_text())["source"]
            for i in range(5)]
    assert seen == ["s0.png", "s1.png", "s2.png", "s0.png", "s1.png"]
    again = synth_dataset(root / "src", 2, tmp_path / "again", resolution=128, seed=7)
    for name in ("fixed.png", "moving.png", "points.json", "gt_field.hrfd"):
        assert (again.parent / "pair_0001" / name).read_bytes() == (manifest.parent / "pair_0001" / name).read_bytes()


def test_synth_dataset_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        synth_dataset(tmp_path / "empty", 2, tmp_path / "o")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_dataset(tmp_path / "empty", 2, blocker / "sub")
