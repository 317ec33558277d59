import csv
import json
import os

import numpy as np
import pytest

from salcal import cli
from salcal.cli import ResultRow, ResultsTable, main
from salcal.losses import relative_improvement
from salcal.nn import save_checkpoint, tiny_cnn


def _gen(tmp_path, name="gen", count=5, seed=7, *extra):
    out = str(tmp_path / name)
    assert main(["generate", "--count", str(count), "--dims", "16x16", "--seed", str(seed), "--out", out,
                 "--quiet", *extra]) == 0
    return out


def _experiment(tmp_path, name, loss="mse", epochs=2, **data):
    doc = {
        "schema_version": 1,
        "name": name,
        "data": data or {
            "train": {"synthetic": {"count": 16, "seed": 1, "background": "cue"}},
            "val": {"synthetic": {"count": 6, "seed": 2, "background": "cue"}},
            "test": {"synthetic": {"count": 6, "seed": 3, "background": "shifted"}},
        },
        "model": {"input_dims": [16, 16], "channels": [4, 8]},
        "train": {"loss": {"kind": loss}, "epochs": epochs},
        "output_dir": f"runs/{name}",
    }
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    return str(path), str(tmp_path / "runs" / name)


def _rewrite_targets(src, dst, value):
    with open(src) as fh:
        rows = list(csv.reader(fh))
    for r in rows[1:]:
        r[1] = repr(value)
    with open(dst, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def test_generate(tmp_path, capsys):
    out = _gen(tmp_path, count=10)
    files = os.listdir(out)
    assert sum(f.endswith(".png") for f in files) == 10
    assert sum(f.endswith(".json") for f in files) == 10
    assert "manifest.csv" in files and cli.LOCK_NAME not in files
    again = _gen(tmp_path, "gen2", 10)
    assert open(os.path.join(out, "manifest.csv"), "rb").read() == open(os.path.join(again, "manifest.csv"), "rb").read()


def test_generate_unwritable(tmp_path, capsys):
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert main(["generate", "--count", "2", "--out", str(blocker / "d")]) == 2
    assert str(blocker / "d") in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["generate", "--count", "2"]) == 1
    assert main(["generate", "--count", "2", "--out", "x", "--dims", "sixteen"]) == 1


def test_heatmap_build(tmp_path):
    out = _gen(tmp_path)
    hm = str(tmp_path / "hm")
    assert main(["heatmap", "build", "--manifest", os.path.join(out, "manifest.csv"), "--out", hm, "--quiet"]) == 0
    names = sorted(os.listdir(hm))
    assert len(names) == 5 and all(n.endswith(".hsm.png") for n in names)
    first = {n: open(os.path.join(hm, n), "rb").read() for n in names}
    assert main(["heatmap", "build", "--manifest", os.path.join(out, "manifest.csv"), "--out", hm, "--quiet"]) == 0
    assert first == {n: open(os.path.join(hm, n), "rb").read() for n in names}


def test_heatmap_skips_unannotated(tmp_path, caplog):
    out = _gen(tmp_path)
    src = os.path.join(out, "manifest.csv")
    with open(src) as fh:
        rows = list(csv.reader(fh))
    rows[1][4] = ""
    with open(src, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    hm = str(tmp_path / "hm")
    assert main(["heatmap", "build", "--manifest", src, "--out", hm]) == 0
    assert len(os.listdir(hm)) == 4
    assert "1 image(s) without annotation" in caplog.text


def test_heatmap_error_exit_code(tmp_path):
    out = _gen(tmp_path)
    args = ["heatmap", "build", "--manifest", os.path.join(out, "manifest.csv"), "--out", str(tmp_path / "h")]
    assert main(args + ["--kernel", "4"]) == 3
    assert main(args + ["--cam-h", "99"]) == 3


def test_train_artifacts_and_determinism(tmp_path):
    exp, run = _experiment(tmp_path, "base", epochs=3)
    assert main(["train", exp, "--threads", "1", "--quiet"]) == 0
    assert sorted(os.listdir(run)) == ["history.csv", "model.ckpt", "report.json"]
    history = open(os.path.join(run, "history.csv")).read().splitlines()
    assert len(history) == 1 + 3
    report = json.load(open(os.path.join(run, "report.json")))
    assert report["schema_version"] == 1 and report["test"]["n_samples"] == 6
    first = {n: open(os.path.join(run, n), "rb").read() for n in ("history.csv", "model.ckpt")}
    assert main(["train", exp, "--threads", "1", "--quiet"]) == 0
    assert first == {n: open(os.path.join(run, n), "rb").read() for n in ("history.csv", "model.ckpt")}
    again = json.load(open(os.path.join(run, "report.json")))
    report.pop("created_at"), again.pop("created_at")
    assert report == again


def test_seed_override_changes_run(tmp_path):
    exp, run = _experiment(tmp_path, "s", epochs=1)
    assert main(["train", exp, "--quiet"]) == 0
    a = open(os.path.join(run, "model.ckpt"), "rb").read()
    assert main(["--seed", "5", "train", exp, "--quiet"]) == 0
    assert open(os.path.join(run, "model.ckpt"), "rb").read() != a
    assert json.load(open(os.path.join(run, "report.json")))["seed_override"] == 5


def test_cyborg_without_annotations_fails_cleanly(tmp_path, capsys):
    out = _gen(tmp_path, count=6)
    src = os.path.join(out, "manifest.csv")
    with open(src) as fh:
        rows = list(csv.reader(fh))
    for r in rows[1:]:
        r[4] = ""
    bare = os.path.join(out, "bare.csv")
    with open(bare, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    exp, run = _experiment(tmp_path, "cy", loss="cyborg_multiplied", train=bare, val=src)
    assert main(["train", exp, "--quiet"]) == 4
    assert "scene_00000.png" in capsys.readouterr().err
    assert os.listdir(run) == []


def test_partial_artifacts_removed(tmp_path, monkeypatch):
    exp, run = _experiment(tmp_path, "p", epochs=1)

    def boom(model, path):
        raise OSError("disk full")

    monkeypatch.setattr(cli, "save_checkpoint", boom)
    assert main(["train", exp, "--quiet"]) == 2
    assert os.listdir(run) == []


def test_lockfile_guard(tmp_path, capsys):
    exp, run = _experiment(tmp_path, "l", epochs=1)
    os.makedirs(run)
    open(os.path.join(run, cli.LOCK_NAME), "w").close()
    assert main(["train", exp, "--quiet"]) == 2
    assert "locked" in capsys.readouterr().err


def test_bad_experiment_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", str(bad)]) == 4
    bad.write_text(json.dumps({"schema_version": 2}))
    assert main(["train", str(bad)]) == 4
    assert main(["train", str(tmp_path / "missing.json")]) == 2
    exp, _ = _experiment(tmp_path, "m", train="nope.csv")
    assert main(["train", exp]) == 2


def test_eval_prints_improvement(tmp_path, capsys):
    out = _gen(tmp_path)
    model = tiny_cnn((16, 16), (4, 8))
    model.head.weights[:] = 0
    ckpt = str(tmp_path / "zero.ckpt")
    save_checkpoint(model, ckpt)  # predicts exactly 0 kcal
    m = os.path.join(out, "m.csv")
    _rewrite_targets(os.path.join(out, "manifest.csv"), m, 240.65)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--manifest", m, "--baseline-mae", "321.60"]) == 0
    text = capsys.readouterr().out
    assert "240.65" in text and "25.17%" in text
    assert main(["eval", "--checkpoint", ckpt, "--manifest", m]) == 0
    assert text.splitlines()[-1].rstrip().endswith("25.17% |")
    assert capsys.readouterr().out.splitlines()[-1].rstrip().endswith("|  |")
    _rewrite_targets(os.path.join(out, "manifest.csv"), m, 0.0)
    assert main(["eval", "--checkpoint", ckpt, "--manifest", m]) == 0
    assert "| 0.00 |" in capsys.readouterr().out


def test_eval_task_mismatch(tmp_path):
    out = _gen(tmp_path)
    ckpt = str(tmp_path / "cls.ckpt")
    save_checkpoint(tiny_cnn((16, 16), (4, 8), "classification", 5), ckpt)
    assert main(["eval", "--checkpoint", ckpt, "--manifest", os.path.join(out, "manifest.csv")]) == 5
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest",
                 os.path.join(out, "manifest.csv")]) == 2


def _fake_run(root, name, mae):
    d = root / name
    d.mkdir()
    (d / "report.json").write_text(json.dumps({
        "schema_version": 1, "name": name, "method": name, "model": "TinyCNN",
        "test": {"mae": mae, "rmse": mae * 1.2, "n_samples": 10}, "created_at": "x",
    }))
    return str(d)


def test_report_sorting_and_improvement(tmp_path, capsys):
    runs = [_fake_run(tmp_path, n, v) for n, v in (("a", 300.0), ("b", 250.0), ("c", 275.0))]
    out_csv = str(tmp_path / "t.csv")
    assert main(["report", *runs, "--baseline", "a", "--csv", out_csv]) == 0
    md = capsys.readouterr().out.splitlines()
    assert [line.split("|")[1].strip() for line in md[2:]] == ["b", "c", "a"]
    assert "**250.00**" in md[2]
    with open(out_csv) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        assert float(r["improvement"]) == pytest.approx(100 * (300.0 - float(r["mae"])) / 300.0, abs=1e-12)
    assert [r["best"] for r in rows] == ["1", "0", "0"]


def test_report_single_run_baseline(tmp_path, capsys):
    run = _fake_run(tmp_path, "only", 123.0)
    assert main(["report", run, "--baseline", "only"]) == 0
    assert "0.00%" in capsys.readouterr().out


def test_report_errors(tmp_path):
    assert main(["report", str(tmp_path)]) == 6
    run = _fake_run(tmp_path, "x", 1.0)
    assert main(["report", run, "--baseline", "nobody"]) == 6


def test_results_table_recompute():
    rows = [ResultRow("base", "mse", "m", 321.60), ResultRow("cy", "cyborg", "m", 228.13)]
    t = ResultsTable.from_runs(rows, baseline="base")
    assert t.rows[0].run == "cy"
    assert t.rows[0].improvement == relative_improvement(321.60, 228.13)
    assert "29.06%" in t.markdown()


def test_ensemble_verb(tmp_path):
    ea, ra = _experiment(tmp_path, "ma", epochs=1)
    eb, rb = _experiment(tmp_path, "mb", loss="cyborg_multiplied", epochs=1)
    assert main(["train", ea, "--quiet"]) == 0 and main(["train", eb, "--quiet"]) == 0
    doc = {
        "schema_version": 1, "name": "ens", "kind": "ensemble",
        "members": ["runs/ma/model.ckpt", "runs/mb/model.ckpt"],
        "data": json.load(open(ea))["data"],
        "train": {"loss": {"kind": "mse"}, "epochs": 2},
        "output_dir": "runs/ens",
    }
    (tmp_path / "ens.json").write_text(json.dumps(doc))
    assert main(["ensemble", str(tmp_path / "ens.json"), "--quiet"]) == 0
    names = sorted(os.listdir(tmp_path / "runs" / "ens"))
    assert names == ["ensemble.ckpt", "ensemble.member0.ckpt", "ensemble.member1.ckpt", "history.csv", "report.json"]
    assert main(["train", str(tmp_path / "ens.json")]) == 4
    assert main(["report", ra, rb, str(tmp_path / "runs" / "ens"), "--quiet"]) == 0


def test_checked_in_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    names = sorted(os.listdir(root))
    assert names == ["rq1_baseline.json", "rq1_cyborg.json", "rq2_pretrain.json", "rq3_ensemble.json",
                     "rq4_finetune.json"]
    for n in ("rq1_baseline.json", "rq1_cyborg.json", "rq2_pretrain.json"):
        cfg = cli.load_experiment(os.path.join(root, n))
        assert cfg.kind == "train" and cfg.data["test"]["synthetic"]["background"] == "shifted"
    assert cli.load_experiment(os.path.join(root, "rq2_pretrain.json")).pretrain["train"].task == "classification"
