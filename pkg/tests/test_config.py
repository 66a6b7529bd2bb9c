import json

import numpy as np
import pytest

from graspfield.config import (ConfigError, RunConfig, apply_overrides,
                               config_to_dict, default_data_root, load_config,
                               sampler_for_run, save_config)


def write(tmp_path, payload):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(payload))
    return p


def test_defaults_validate():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.resolved_out_dir() == cfg.data_root


def test_roundtrip(tmp_path):
    cfg = RunConfig(seed=7, n_scenes=3, ablation="no-touch",
                    touch_noise_mm=3.0)
    p = tmp_path / "cfg.json"
    save_config(cfg, p)
    back = load_config(p)
    assert config_to_dict(back) == config_to_dict(cfg)


def test_unknown_top_level_key_rejected(tmp_path):
    p = write(tmp_path, {"seed": 1, "n_scene": 4})
    with pytest.raises(ConfigError, match="n_scene"):
        load_config(p)


def test_unknown_section_key_rejected(tmp_path):
    p = write(tmp_path, {"sampler": {"etaa": 0.5}})
    with pytest.raises(ConfigError, match="etaa"):
        load_config(p)


def test_invalid_json_rejected(tmp_path):
    p = tmp_path / "run.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)


def test_non_object_root_rejected(tmp_path):
    p = tmp_path / "run.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(p)


def test_guidance_weight_aliases(tmp_path):
    p = write(tmp_path, {"sampler": {"lambda_ni": 2.5, "lambda_contact": 0.75}})
    cfg = load_config(p)
    assert cfg.sampler.lam_ni == 2.5
    assert cfg.sampler.lam_c == 0.75


def test_lists_become_tuples_and_grids(tmp_path):
    p = write(tmp_path, {
        "scene": {"n_fingers_choices": [3, 4]},
        "sampler": {"time_grid": [1.0, 0.5, 0.01]},
    })
    cfg = load_config(p)
    assert cfg.scene.n_fingers_choices == (3, 4)
    assert isinstance(cfg.sampler.time_grid, np.ndarray)
    assert cfg.sampler.time_grid.dtype == np.float64


def test_bad_values_rejected(tmp_path):
    for payload, frag in [
        ({"seed": -1}, "seed"),
        ({"workers": 0}, "workers"),
        ({"ablation": "half"}, "ablation"),
        ({"touch_noise_mm": -2.0}, "touch_noise"),
    ]:
        with pytest.raises(ConfigError, match=frag):
            load_config(write(tmp_path, payload))


def test_overrides_win_and_validate():
    cfg = RunConfig()
    out = apply_overrides(cfg, seed=11, guidance=False, ablation="vision-only",
                          out_dir="elsewhere")
    assert out.seed == 11 and not out.guidance
    assert str(out.resolved_out_dir()) == "elsewhere"
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ablation="nope")


def test_env_var_data_root(monkeypatch):
    monkeypatch.setenv("GRASPFIELD_DATA_ROOT", "/tmp/gf-root")
    assert str(default_data_root()) == "/tmp/gf-root"
    monkeypatch.delenv("GRASPFIELD_DATA_ROOT")
    assert str(default_data_root()) == "graspfield-data"


def test_sampler_guidance_stamp():
    cfg = apply_overrides(RunConfig(), guidance=False)
    assert sampler_for_run(cfg).guidance_enabled is False
    cfg = apply_overrides(RunConfig(), guidance=True)
    assert sampler_for_run(cfg).guidance_enabled is True
