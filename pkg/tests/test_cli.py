import json

import numpy as np
import pytest

from preedit import codec, corpus, report
from preedit.cli import main
from preedit.editors import Smoother, load_editor
from preedit.proxy import psnr
from preedit.train import load_checkpoint

from imagery import photo_crops


def _last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    src = root / "pngs"
    src.mkdir()
    for i, crop in enumerate(photo_crops(12, 64, 96, seed=3)):
        corpus.write_png(src / f"photo{i:02d}.png", crop)
    run = root / "run"
    assert main(["ingest", str(src), str(run), "--patch-size", "32", "--patches-per-image", "3"]) == 0
    return run


def test_ingest_output(run_dir, capsys):
    m = corpus.load_manifest(run_dir)
    assert len(m.sources) == 12 and m.patch_size == 32
    assert corpus.load_patches(run_dir, "train").shape[1:] == (3, 32, 32)


def test_train_evaluate_report(run_dir, capsys):
    assert main(["train", str(run_dir), "--stage", "entropy", "--steps", "5"]) == 0
    out = _last_json(capsys.readouterr().out)
    assert out["stage"] == "entropy" and (run_dir / "entropy.params").exists()
    logs = (run_dir / "logs" / "entropy.jsonl").read_text().splitlines()
    assert len(logs) == 5 and set(json.loads(logs[0])) >= {"step", "loss", "dist", "quality", "bits"}

    cfg = run_dir / "smoother.json"
    cfg.write_text(json.dumps({"stage": "smoother", "steps": 50, "mu": 0.5, "checkpoint_interval": 1}))
    args = ["train", str(run_dir), "--config", str(cfg), "--steps", "2", "--entropy", str(run_dir / "entropy.params")]
    assert main(args) == 0
    capsys.readouterr()
    editor = load_editor(run_dir / "smoother.params")
    assert isinstance(editor, Smoother)
    saved_cfg, *_ = load_checkpoint(run_dir / "checkpoints" / "smoother" / "step0000002.ckpt")
    assert saved_cfg.steps == 2 and saved_cfg.mu == 0.5  # flags win over the file, file over defaults
    assert (run_dir / "smoother.entropy.params").exists()

    assert main(["evaluate", str(run_dir), "--entropy", str(run_dir / "entropy.params"),
                 "--editor", f"smoother={run_dir / 'smoother.params'}", "--q", "10", "20"]) == 0
    capsys.readouterr()
    rows = report.read_rows(run_dir / report.ROWS_FILE)
    n_test = len(corpus.load_patches(run_dir, "test"))
    assert len(rows) == n_test * 2 * 2
    assert report.check_closest_fewer_bits(rows) == []

    assert main(["report", str(run_dir)]) == 0
    summary = _last_json(capsys.readouterr().out)
    rep = json.loads((run_dir / report.REPORT_JSON).read_text())
    assert summary["rows"] == len(rep["rows"])
    assert rep["correlation"]["points"] == n_test * 2


def test_evaluate_rows_recomputable(run_dir, capsys):
    assert main(["evaluate", str(run_dir), "--q", "15"]) == 0
    rows = report.read_rows(run_dir / report.ROWS_FILE)
    patches = corpus.load_patches(run_dir, "test")
    for row, patch in zip(rows, patches):
        img = patch / 255.0
        bs = codec.encode(img, 15)
        assert row["bpp"] == 8 * len(bs.data) / (32 * 32)
        assert row["mse"] == pytest.approx(np.mean((codec.decode(bs) - img) ** 2), rel=1e-12)


def test_edit_compress_identity_is_byte_identical(run_dir, tmp_path, capsys):
    src = sorted((run_dir.parent / "pngs").iterdir())[0]
    out_png, out_jpg = tmp_path / "e.png", tmp_path / "e.jpg"
    assert main(["edit-compress", str(src), "--q", "20", "--out-png", str(out_png), "--out-jpg", str(out_jpg)]) == 0
    stats = _last_json(capsys.readouterr().out)
    original = corpus.read_png(src) / 255.0
    baseline = codec.encode(original, 20)
    assert out_jpg.read_bytes() == baseline.data
    assert np.array_equal(corpus.read_png(out_png), corpus.read_png(src))
    # the stats line is recomputable from the files on disk
    assert stats["bytes"] == out_jpg.stat().st_size
    assert stats["bpp"] == 8 * out_jpg.stat().st_size / (original.shape[1] * original.shape[2])
    decoded = codec.decode(codec.JpegBitstream.from_bytes(out_jpg.read_bytes()))
    assert stats["psnr"] == pytest.approx(psnr(decoded, original), rel=1e-12)


def _perturbed_smoother(path):
    sm = Smoother(0, features=8)
    sm.params["out/weight"].value = np.random.default_rng(0).normal(0, 0.02, sm.params["out/weight"].shape)
    sm.save(path)
    return path


def test_edit_compress_target_bpp(run_dir, tmp_path, capsys):
    src = sorted((run_dir.parent / "pngs").iterdir())[1]
    editor = _perturbed_smoother(tmp_path / "sm.params")
    original = corpus.read_png(src) / 255.0
    budget = 8 * len(codec.encode(original, 35).data) / (64 * 96)
    args = ["edit-compress", str(src), "--editor", str(editor), "--target-bpp", str(budget),
            "--out-png", str(tmp_path / "a.png"), "--out-jpg", str(tmp_path / "a.jpg")]
    assert main(args) == 0
    stats = _last_json(capsys.readouterr().out)
    assert stats["bpp"] <= budget


def test_missing_checkpoint_is_structured(tmp_path, capsys, run_dir):
    src = sorted((run_dir.parent / "pngs").iterdir())[0]
    code = main(["edit-compress", str(src), "--editor", str(tmp_path / "nope.params"),
                 "--out-png", str(tmp_path / "a.png"), "--out-jpg", str(tmp_path / "a.jpg")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "checkpoint_not_found" and err["path"].endswith("nope.params")


def test_report_on_incomplete_run(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "incomplete_run" and report.ROWS_FILE in err["message"]


def test_bad_config_is_structured(run_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stage": "smoother", "q_range": [30, 10]}))
    assert main(["train", str(run_dir), "--config", str(cfg)]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "bad_config"
    assert main(["train", str(run_dir)]) == 1


def test_commands_are_deterministic(run_dir, tmp_path, capsys):
    src = sorted((run_dir.parent / "pngs").iterdir())[2]
    editor = _perturbed_smoother(tmp_path / "sm.params")
    outs = []
    for k in range(2):
        assert main(["edit-compress", str(src), "--editor", str(editor), "--q", "12",
                     "--out-png", str(tmp_path / f"{k}.png"), "--out-jpg", str(tmp_path / f"{k}.jpg")]) == 0
        outs.append(_last_json(capsys.readouterr().out))
    assert (tmp_path / "0.jpg").read_bytes() == (tmp_path / "1.jpg").read_bytes()
    assert outs[0]["bpp"] == outs[1]["bpp"]
