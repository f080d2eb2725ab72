import json
import shutil

import numpy as np
import pytest
from PIL import Image

from synthpan.cli import EXIT_ERROR, EXIT_OK, EXIT_VIOLATIONS, main
from synthpan.pipeline import load_manifest
from synthpan.taxonomy import default_taxonomy, dumps

SMALL = ["--width", "160", "--height", "90", "--fx", "125", "--fy", "125", "--cx", "80", "--cy", "45"]


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["generate", "--out", str(out), "--frames", "6", "--seed", "2", *SMALL]) == EXIT_OK
    return out


def test_generate_validate_split_evaluate_preview(generated, tmp_path, capsys):
    manifest = generated / "manifest.json"
    assert main(["validate", "--manifest", str(manifest)]) == EXIT_OK
    assert "0 violations" in capsys.readouterr().out
    assert main(["split", "--manifest", str(manifest), "--seed", "1", "--ratios", "0.5", "0.0", "0.5"]) == EXIT_OK
    assert "train=3 val=0 test=3" in capsys.readouterr().out
    assert load_manifest(manifest).split_counts() == {"train": 3, "val": 0, "test": 3}
    # splitting again without --overwrite fails
    assert main(["split", "--manifest", str(manifest), "--seed", "1"]) == EXIT_ERROR
    report = tmp_path / "report.json"
    assert main(["evaluate", "--manifest", str(manifest), "--predictions", str(generated / "panoptic.json"),
                 "--report", str(report)]) == EXIT_OK
    assert "Panoptic Quality [PQ]" in capsys.readouterr().out
    assert json.loads(report.read_text())["pq"] == 100.0
    assert main(["preview", "--manifest", str(manifest), "--out", str(tmp_path / "p.png")]) == EXIT_OK
    assert (tmp_path / "p.png").is_file()


def test_validate_reports_violations(generated, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(generated, copy)
    (copy / "frames" / "000001_sem.png").unlink()
    assert main(["validate", "--manifest", str(copy / "manifest.json")]) == EXIT_VIOLATIONS


def test_seed_is_mandatory(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "x")]) == EXIT_ERROR
    assert not (tmp_path / "x").exists()


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames": 3, "width": 80, "height": 60, "fx": 60, "fy": 60, "cx": 40, "cy": 30}))
    out = tmp_path / "ds"
    assert main(["--config", str(cfg), "generate", "--out", str(out), "--seed", "5", "--frames", "2"]) == EXIT_OK
    m = load_manifest(out / "manifest.json")
    assert len(m.frames) == 2 and (m.width, m.height) == (80, 60)


def test_convert_masks(tmp_path, capsys):
    tax = default_taxonomy()
    img = np.zeros((10, 12, 3), np.uint8)
    img[:, :6] = tax.by_name("floor").color
    img[2:4, 8:10] = tax.by_name("clamp").color
    img[6:8, 8:10] = tax.by_name("clamp").color
    Image.fromarray(img).save(tmp_path / "a.png")
    (tmp_path / "tax.txt").write_text(dumps(tax))
    out = tmp_path / "conv"
    assert main(["convert", str(tmp_path / "a.png"), "--taxonomy", str(tmp_path / "tax.txt"),
                 "--out", str(out)]) == EXIT_OK
    assert "2 thing annotations" in capsys.readouterr().out
    pan = json.loads((out / "panoptic.json").read_text())
    assert len(pan["annotations"][0]["segments_info"]) == 3
    assert (out / "a_pan.png").is_file()
    img[0, 11] = (1, 2, 3)
    Image.fromarray(img).save(tmp_path / "b.png")
    assert main(["convert", str(tmp_path / "b.png"), "--taxonomy", str(tmp_path / "tax.txt"),
                 "--out", str(out), "--strict"]) == EXIT_ERROR
    assert "x=11, y=0" in capsys.readouterr().err


def test_missing_manifest_is_an_error(tmp_path, capsys):
    assert main(["validate", "--manifest", str(tmp_path / "none.json")]) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err
