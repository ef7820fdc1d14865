import json

import numpy as np
import pytest

from conftest import noisy_square
from maskforge.cli import main
from maskforge.evalmetrics import binary_iou
from maskforge.imagecore import load_binary_mask, save_binary_mask, save_image, write_label_mask
from maskforge.synthetic import write_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    manifest = write_dataset(root, n_images=6, size=20, seed=5)
    return manifest


FAST = ["--rounds", "1", "--max-iterations", "3", "--appearance-components", "2"]


def _square_files(tmp_path, seed=0):
    img, truth, init = noisy_square(seed)
    img = np.rint(img * 255) / 255
    save_image(img, tmp_path / "img.png")
    save_binary_mask(init, tmp_path / "coarse.png")
    return truth


def test_enhance_recovers_square(tmp_path):
    truth = _square_files(tmp_path)
    out = tmp_path / "out.png"
    args = ["enhance", "--image", str(tmp_path / "img.png"), "--coarse-mask", str(tmp_path / "coarse.png"), "--out", str(out)]
    assert main(args) == 0
    assert binary_iou(load_binary_mask(out), truth) >= 0.95
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


def test_enhance_missing_file_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.png"
    rc = main(["enhance", "--image", str(missing), "--coarse-mask", str(missing), "--out", str(tmp_path / "o.png")])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err


def test_enhance_degenerate_mask(tmp_path, capsys):
    _square_files(tmp_path)
    save_binary_mask(np.zeros((16, 16), bool), tmp_path / "empty.png")
    rc = main(["enhance", "--image", str(tmp_path / "img.png"), "--coarse-mask", str(tmp_path / "empty.png"),
               "--out", str(tmp_path / "o.png")])
    assert rc == 1
    assert "both foreground and background" in capsys.readouterr().err


def test_saliency_command(tmp_path):
    img = np.full((12, 12, 3), 0.1)
    img[4:8, 4:8] = 0.9
    save_image(img, tmp_path / "s.png")
    assert main(["saliency", "--image", str(tmp_path / "s.png"), "--out", str(tmp_path / "m.png")]) == 0
    assert load_binary_mask(tmp_path / "m.png")[6, 6]


def test_pipeline_rounds_override_and_determinism(dataset, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"manifest": str(dataset), "output": "run", "refinement": {"rounds": 4}}))
    rc = main(["pipeline", "--config", str(cfg), *FAST])
    assert rc == 0
    run = tmp_path / "run"
    assert sorted(p.name for p in run.glob("round_*")) == ["round_0", "round_1"]
    summary = json.loads((run / "summary.json").read_text())
    assert [r["round"] for r in summary["rounds"]] == [0, 1]
    assert all(0.0 <= r["mean_binary_iou"] <= 1.0 for r in summary["rounds"])
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["refinement"]["rounds"] == 1 and echoed["seed"] == 0

    again = tmp_path / "again"
    assert main(["pipeline", "--config", str(run / "config.json"), "--output", str(again)]) == 0
    assert (again / "summary.json").read_bytes() == (run / "summary.json").read_bytes()


def test_seed_from_environment(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("MASKFORGE_SEED", "7")
    assert main(["pipeline", "--manifest", str(dataset), "--output", str(tmp_path / "r"), *FAST]) == 0
    assert json.loads((tmp_path / "r" / "config.json").read_text())["seed"] == 7
    assert main(["pipeline", "--manifest", str(dataset), "--output", str(tmp_path / "f"), "--seed", "3", *FAST]) == 0
    assert json.loads((tmp_path / "f" / "config.json").read_text())["seed"] == 3


def test_config_problems_listed_together(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({
        "manifest": "nowhere.json",
        "backend": "cnn",
        "refinement": {"rounds": 0, "low_coverage": 0.9},
    }))
    assert main(["pipeline", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "manifest not found" in err and "backend must be" in err and "rounds must be" in err
    assert not (tmp_path / "out").exists()


def test_refine_continues_from_snapshot(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", "--manifest", str(dataset), "--output", str(out), *FAST]) == 0
    assert main(["refine", "--manifest", str(dataset), "--output", str(out), "--from", str(out / "round_1"), *FAST]) == 0
    assert (out / "round_2" / "state.json").is_file()


def test_exchange_backend_missing_predictions_is_runtime_failure(dataset, tmp_path, capsys):
    rc = main(["pipeline", "--manifest", str(dataset), "--output", str(tmp_path / "x"), "--backend", "external-exchange", *FAST])
    assert rc == 2
    assert "refine --from" in capsys.readouterr().err
    assert (tmp_path / "x" / "exchange" / "round_0" / "train_manifest.json").is_file()


def _label_dir(path, masks):
    path.mkdir()
    for name, m in masks.items():
        write_label_mask(np.asarray(m, np.uint8), path / f"{name}.png")
    return path


def test_eval_identity(tmp_path):
    d = _label_dir(tmp_path / "gt", {"a": [[0, 3], [3, 3]], "b": [[0, 0], [5, 255]]})
    assert main(["eval", "--pred", str(d), "--gt", str(d), "--out", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["mean_iou"] == 1.0


def test_eval_hand_fixture(tmp_path):
    gt = _label_dir(tmp_path / "gt", {"a": [[0, 0], [2, 2]], "b": [[0, 4], [4, 4]]})
    pred = _label_dir(tmp_path / "pred", {"a": [[0, 2], [2, 2]], "b": [[0, 0], [4, 4]], "c": [[0]]})
    out = tmp_path / "e.json"
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    # class 0: TP 2, FP 1, FN 1 -> 1/2; class 2: TP 2, FP 1 -> 2/3; class 4: TP 2, FN 1 -> 2/3
    assert rep["per_class_iou"][0] == pytest.approx(1 / 2)
    assert rep["per_class_iou"][2] == pytest.approx(2 / 3)
    assert rep["per_class_iou"][4] == pytest.approx(2 / 3)
    assert rep["mean_iou"] == pytest.approx((1 / 2 + 2 / 3 + 2 / 3) / 3)
    assert rep["unmatched_predictions"] == ["c"]


def test_eval_size_mismatch_names_stem(tmp_path, capsys):
    gt = _label_dir(tmp_path / "gt", {"odd": [[0, 1]]})
    pred = _label_dir(tmp_path / "pred", {"odd": [[0], [1]]})
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "e.json")]) == 1
    assert "odd" in capsys.readouterr().err


def test_segment_oracle(dataset, tmp_path):
    out = tmp_path / "pred"
    assert main(["segment", "--manifest", str(dataset), "--out", str(out), "--backend", "oracle"]) == 0
    assert main(["eval", "--pred", str(out), "--gt", str(dataset.parent / "gt"), "--out", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["mean_iou"] == 1.0
