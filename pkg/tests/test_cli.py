"""End-to-end checks of the command line pipeline on a tiny dataset."""

import json
from pathlib import Path

import numpy as np
import pytest

from graspfield.cli import main

CFG = {
    "n_scenes": 3,
    "codec_k": 4,
    "scene": {"resolution": 32, "mask_size": 64},
    "sampler": {"steps": 30},
    "flow": {"steps": 40, "finetune_steps": 10, "lr": 3e-3},
}


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("gfdata")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(CFG))
    rc = main(["gen-data", "--config", str(cfg_path),
               "--data-root", str(root), "--seed", "5"])
    assert rc == 0
    rc = main(["fit-codec", "--config", str(cfg_path),
               "--data-root", str(root), "--seed", "5"])
    assert rc == 0
    return root


def _cfg(root):
    return str(root / "cfg.json")


def test_gen_data_manifest(data_root):
    manifest = json.loads((data_root / "manifest.json").read_text())
    assert manifest["n_scenes"] == 3
    assert all(e["status"] == "ok" for e in manifest["scenes"])
    assert all(1 <= e["bin"] <= 5 for e in manifest["scenes"])
    for e in manifest["scenes"]:
        assert (data_root / e["dir"] / "object.sdfg").exists()


def test_library_reconstruct_outputs(data_root):
    out = data_root / "lib_out"
    rc = main(["reconstruct", "--config", _cfg(data_root),
               "--data-root", str(data_root), "--seed", "5",
               "--ablation", "full", "--out-dir", str(out)])
    assert rc == 0
    for i in range(3):
        d = out / "recon" / f"scene_{i:05d}"
        assert (d / "recon.sdfg").exists()
        assert (d / "recon.ply").exists()
        assert (d / "trajectory.jsonl").exists()
    log = json.loads((out / "recon" / "recon_log.json").read_text())
    assert log["mode"] == "full"
    assert len(log["scenes"]) == 3


def test_worker_count_does_not_change_results(data_root):
    a = data_root / "w1"
    b = data_root / "w2"
    for out, workers in ((a, "1"), (b, "2")):
        rc = main(["reconstruct", "--config", _cfg(data_root),
                   "--data-root", str(data_root), "--seed", "5",
                   "--workers", workers, "--out-dir", str(out)])
        assert rc == 0
    for i in range(3):
        name = f"scene_{i:05d}/recon.sdfg"
        assert (a / "recon" / name).read_bytes() == \
            (b / "recon" / name).read_bytes()


def test_evaluate_report_and_figures(data_root):
    out = data_root / "lib_out"
    if not (out / "recon").exists():
        assert main(["reconstruct", "--config", _cfg(data_root),
                     "--data-root", str(data_root), "--seed", "5",
                     "--out-dir", str(out)]) == 0
    rc = main(["evaluate", "--config", _cfg(data_root),
               "--data-root", str(data_root), "--seed", "5",
               "--out-dir", str(out)])
    assert rc == 0
    report_dir = out / "report"
    assert (report_dir / "report.csv").exists()
    doc = json.loads((report_dir / "report.json").read_text())
    assert "viou" in doc["metrics"]
    assert doc["counts"]["All"] == 3
    assert (report_dir / "fig_viou.png").read_bytes()[:8].startswith(
        b"\x89PNG")


def test_train_then_denoiser_backend(data_root):
    rc = main(["train", "--config", _cfg(data_root),
               "--data-root", str(data_root), "--seed", "5"])
    assert rc == 0
    assert (data_root / "denoiser.tdnz").exists()
    assert (data_root / "train_log.jsonl").exists()
    out = data_root / "den_out"
    rc = main(["reconstruct", "--config", _cfg(data_root),
               "--data-root", str(data_root), "--seed", "5",
               "--out-dir", str(out)])
    assert rc == 0
    grid = (out / "recon" / "scene_00000" / "recon.sdfg").read_bytes()
    lib_grid = (data_root / "lib_out" / "recon" / "scene_00000"
                / "recon.sdfg").read_bytes()
    # different backend, different trajectory
    assert grid != lib_grid
    (data_root / "denoiser.tdnz").unlink()  # later tests use the library route


def test_ablate_writes_all_modes(data_root):
    out = data_root / "ab_out"
    rc = main(["ablate", "--config", _cfg(data_root),
               "--data-root", str(data_root), "--seed", "5",
               "--touch-noise-mm", "4", "--out-dir", str(out)])
    assert rc == 0
    doc = json.loads((out / "ablation" / "ablation.json").read_text())
    modes = [r["mode"] for r in doc["runs"]]
    assert modes == ["full", "no-touch", "vision-only", "full+4mm"]
    assert all(np.isfinite(r["mean_viou"]) for r in doc["runs"])
    text = (out / "ablation" / "ablation.csv").read_text()
    assert text.splitlines()[0] == "mode,mean_viou,n"
    assert (out / "ablation" / "fig_ablation.png").exists()


def test_guidance_flag_recorded(data_root):
    out = data_root / "ng_out"
    rc = main(["reconstruct", "--config", _cfg(data_root),
               "--data-root", str(data_root), "--seed", "5",
               "--guidance", "off", "--out-dir", str(out)])
    assert rc == 0
    log = json.loads((out / "recon" / "recon_log.json").read_text())
    assert log["guidance"] is False


def test_missing_manifest_fails_cleanly(tmp_path, capsys):
    rc = main(["fit-codec", "--data-root", str(tmp_path)])
    assert rc == 1
    assert "gen-data" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"no_such_key": 1}')
    rc = main(["gen-data", "--config", str(bad),
               "--data-root", str(tmp_path)])
    assert rc == 2


def test_unknown_ablation_rejected(data_root):
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct", "--data-root", str(data_root),
              "--ablation", "half"])
    assert exc.value.code == 2


def test_selftest_command(capsys):
    rc = main(["selftest"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "checks passed" in out
