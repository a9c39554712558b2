from __future__ import annotations

import json

import pytest

from wsirisk.cli import main

TINY = {"input_size": 32, "channels": [8, 8], "embed_dim": 8, "epochs": 1, "cancer_epochs": 1,
        "batch_size": 16, "k_folds": 2, "patch_size": 256, "stride": 256}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps({"width": 1024, "height": 1024}))
    assert main(["synth", "--spec", str(root / "spec.json"), "--n-patients", "10", "--seed", "2",
                 "--out", str(root / "new" / "corpus")]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--config", str(root / "cfg.json"), "--manifest", str(root / "new/corpus/manifest.csv"),
                 "--out", str(root / "run")]) == 0
    return root


def test_synth_creates_dir_and_run_json(workspace):
    corpus = workspace / "new" / "corpus"
    assert (corpus / "manifest.csv").exists()
    run = json.loads((corpus / "run.json").read_text())
    assert run["command"] == "synth" and run["config"]["seed"] == 2 and "version" in run


def test_synth_malformed_spec_exits_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{\n  "width": 1024,\n  oops\n}')
    assert main(["synth", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "c")]) == 2
    assert "bad.json:3:" in capsys.readouterr().err


def test_synth_unknown_spec_key_exits_2(tmp_path):
    (tmp_path / "s.json").write_text('{"widht": 1024}')
    assert main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "c")]) == 2


def test_train_outputs_and_refuses_overwrite(workspace):
    run = workspace / "run"
    for rel in ("folds.json", "run.json", "fold_0/cancer.ckpt", "fold_1/risk.ckpt", "fold_0/train_log.json"):
        assert (run / rel).exists(), rel
    log = json.loads((run / "fold_0" / "train_log.json").read_text())
    assert log["header"]["seed"] == 0
    assert json.loads((run / "run.json").read_text())["config"]["epochs"] == 1
    args = ["train", "--config", str(workspace / "cfg.json"), "--manifest",
            str(workspace / "new/corpus/manifest.csv"), "--out", str(run), "--epochs", "0"]
    assert main(args) == 2
    before = (run / "fold_0" / "risk.ckpt").read_bytes()
    assert main(args + ["--force"]) == 0
    assert json.loads((run / "run.json").read_text())["config"]["epochs"] == 0  # flag beats file
    assert (run / "fold_0" / "risk.ckpt").read_bytes() != before


def test_train_config_errors_exit_2(tmp_path):
    (tmp_path / "c.json").write_text('{"epochs": 1, "not_a_key": 3}')
    assert main(["train", "--config", str(tmp_path / "c.json"), "--manifest", "m", "--out", str(tmp_path)]) == 2
    (tmp_path / "d.json").write_text('{"lam": 2.0}')
    assert main(["train", "--config", str(tmp_path / "d.json"), "--manifest", "m", "--out", str(tmp_path)]) == 2


def test_infer_rows_match_tissue_patches_and_repeat(workspace):
    manifest = str(workspace / "new/corpus/manifest.csv")
    for name in ("p1", "p2"):
        assert main(["infer", "--run", str(workspace / "run"), "--manifest", manifest,
                     "--out", str(workspace / name)]) == 0
    for f in ("patch_predictions.csv", "slide_predictions.json"):
        assert (workspace / "p1" / f).read_bytes() == (workspace / "p2" / f).read_bytes()
    slides = json.loads((workspace / "p1" / "slide_predictions.json").read_text())
    assert len(slides) == 10
    rows = (workspace / "p1" / "patch_predictions.csv").read_text().strip().splitlines()[1:]
    assert len(rows) == sum(s["accepted"] + s["rejected"] + s["benign"] for s in slides)


def test_infer_lambda_one_rejects_everything(workspace):
    assert main(["infer", "--run", str(workspace / "run"), "--manifest", str(workspace / "new/corpus/manifest.csv"),
                 "--out", str(workspace / "lam1"), "--infer-lam", "1.0"]) == 0
    slides = json.loads((workspace / "lam1" / "slide_predictions.json").read_text())
    assert {s["status"] for s in slides} == {"no-cancer-patches"}


def test_eval_report_and_table_check(workspace):
    manifest = str(workspace / "new/corpus/manifest.csv")
    main(["infer", "--run", str(workspace / "run"), "--manifest", manifest, "--out", str(workspace / "pe")])
    assert main(["eval", "--predictions", str(workspace / "pe"), "--manifest", manifest,
                 "--out", str(workspace / "rep"), "--verify-paper-tables"]) == 0
    rep = json.loads((workspace / "rep" / "report.json").read_text())
    assert rep["n_slides"] == 10
    assert rep["patch"]["confusion"]["total"] > 0
    assert rep["paper_tables"]["n_flags"] == 2 and rep["paper_tables"]["ok"]
    assert (workspace / "rep" / "run.json").exists()


def test_eval_empty_and_bad_schema(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["n_slides"] == 0
    (tmp_path / "p").mkdir()
    (tmp_path / "p" / "slide_predictions.json").write_text('[{"slide": 1}]')
    assert main(["eval", "--predictions", str(tmp_path / "p"), "--manifest", "x", "--out", str(tmp_path / "f")]) == 2
    (tmp_path / "p" / "slide_predictions.json").write_text('{"not": "a list"}')
    assert main(["eval", "--predictions", str(tmp_path / "p"), "--manifest", "x", "--out", str(tmp_path / "g")]) == 2


def test_cam_outputs_and_item_errors(workspace):
    manifest = str(workspace / "new/corpus/manifest.csv")
    ckpt = str(workspace / "run" / "fold_0" / "risk.ckpt")
    base = ["cam", "--checkpoint", ckpt, "--manifest", manifest, "--patch-size", "256"]
    assert main(base + ["--ref", "P000_S0:256:256", "--ref", "P000_S0:512:256", "--out", str(workspace / "c1")]) == 0
    index = json.loads((workspace / "c1" / "index.json").read_text())
    assert len(index) == 2 and all((workspace / "c1" / v).exists() for v in index.values())
    assert main(base + ["--ref", "P000_S0:256:256", "--ref", "P000_S0:512:256", "--out", str(workspace / "c2")]) == 0
    for name in index.values():
        assert (workspace / "c1" / name).read_bytes() == (workspace / "c2" / name).read_bytes()
    assert main(base + ["--ref", "P000_S0:900:0", "--ref", "NOPE:0:0", "--ref", "P000_S0:0:0",
                        "--out", str(workspace / "c3")]) == 1
    index = json.loads((workspace / "c3" / "index.json").read_text())
    assert "error" in index["P000_S0:900:0"] and "error" in index["NOPE:0:0"]
    assert isinstance(index["P000_S0:0:0"], str)
    assert main(base + ["--ref", "P000_S0:0:0", "--target-class", "5", "--out", str(workspace / "c4")]) == 1


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "wsirisk" in capsys.readouterr().out
