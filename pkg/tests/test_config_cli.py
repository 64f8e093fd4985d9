from pathlib import Path

import pytest
import yaml

from trailnav.cli import main
from trailnav.config import (ConfigError, GlobalConfig, config_from_dict,
                             config_to_dict, load_config, save_config)

REPO_ROOT = Path(__file__).resolve().parents[1]


def test_shipped_default_config_matches_code_defaults():
    cfg = load_config(REPO_ROOT / "configs" / "default.yaml")
    assert cfg == GlobalConfig()
    reg = cfg.registration
    assert (reg.eta_s, reg.r, reg.n_m, reg.eps) == (0.7, 80.0, 7, 1.0)
    assert (reg.d_max, reg.eta_d, reg.i_max) == (2.0, 0.7, 40)
    assert (reg.eps_theta_min, reg.eps_t_min) == (0.001, 0.01)
    assert reg.bboxes == [(-1.5, 0.5, -1.0, 1.0, -1.0, 0.5),
                          (-10.0, -1.5, -2.5, 2.5, -1.0, 1.0)]
    mp = cfg.mapping
    assert (mp.rho, mp.v_s, mp.n_n, mp.tau_d) == (0.1, 20.0, 15, 0.8)
    pf = cfg.path_following
    assert (pf.k, pf.K_h, pf.omega_m, pf.K_g) == (0.4, 3.0, 1.0, 0.5)
    assert (pf.v_nom, pf.v_min, pf.v_max) == (1.5, 0.5, 1.5)
    assert (pf.tau_g, pf.tau_w) == (0.15, 1.0)
    assert (cfg.prior.beta, cfg.prior.rate_hz) == (0.1, 100.0)
    assert cfg.mission.d_ref == 0.05
    assert cfg.mission.init_overlap_floor == 40.0
    assert cfg.mission.control_rate_hz == 10.0


def test_round_trip_preserves_config(tmp_path):
    cfg = GlobalConfig(seed=7)
    cfg.registration.eta_s = 0.5
    cfg.mapping.rho = 0.2
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="unknown key 'mapping.bogus'"):
        config_from_dict({"mapping": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown key 'sim.lidar.bogus'"):
        config_from_dict({"sim": {"lidar": {"bogus": 1}}})


def test_invalid_value_names_section():
    with pytest.raises(ConfigError, match="registration"):
        config_from_dict({"registration": {"eta_d": 1.3}})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": "zero"})


def test_partial_config_fills_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 3\nmapping:\n  rho: 0.15\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.seed == 3
    assert cfg.mapping.rho == 0.15
    assert cfg.registration == GlobalConfig().registration


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_config_to_dict_is_plain_yaml():
    data = config_to_dict(GlobalConfig())
    text = yaml.safe_dump(data)
    assert config_from_dict(yaml.safe_load(text)) == GlobalConfig()


# -- CLI ----------------------------------------------------------------------


def test_cli_world_gen_exit_zero(tmp_path):
    rc = main(["world", "gen", "--out-dir", str(tmp_path / "w"),
               "--trail-length", "30", "--seed", "5"])
    assert rc == 0
    assert (tmp_path / "w" / "world_spec.txt").exists()
    assert (tmp_path / "w" / "config_used.yaml").exists()


def test_cli_bad_config_exit_two(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mapping:\n  bogus: 1\n")
    rc = main(["world", "gen", "--out-dir", str(tmp_path / "w"),
               "--config", str(bad)])
    assert rc == 2
    rc = main(["world", "gen", "--out-dir", str(tmp_path / "w"),
               "--config", str(tmp_path / "absent.yaml")])
    assert rc == 2


def test_cli_missing_database_exit_four(tmp_path):
    world_dir = tmp_path / "w"
    assert main(["world", "gen", "--out-dir", str(world_dir)]) == 0
    rc = main(["repeat", "--out-dir", str(tmp_path / "r"),
               "--db", str(tmp_path / "no_such_db"),
               "--world", str(world_dir / "world_spec.txt")])
    assert rc == 4


def test_cli_selftest_passes(capsys):
    rc = main(["selftest"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "FAIL" not in out
    assert out.count("PASS") >= 5
