import argparse
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from dpil.cli import build_parser, main, resolve_config
from dpil.demos import collect_demos, save_demos
from dpil.envs import LinearTrack, optimal_policy


def cfg_file(tmp_path, data):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def test_run_writes_report(tiny, tmp_path, capsys):
    out = tmp_path / "cli"
    assert main(["run", "--config", str(cfg_file(tmp_path, tiny)), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "complete" and "sweep" in report["stages"]
    assert "report.json" in capsys.readouterr().out


def test_subcommand_writes_to_its_own_dir(tiny, tmp_path):
    tiny["learner"]["kinds"] = ["bc"]
    p = cfg_file(tmp_path, tiny)
    assert main(["eval-mmd", "--config", str(p)]) == 0
    report = json.loads((Path(tiny["out"]) / "eval-mmd" / "report.json").read_text())
    assert set(report["stages"]) == {"mmd"}


def test_invalid_config_exits_one(tmp_path, capsys):
    p = cfg_file(tmp_path, {"purify": {"t_star": 1.5}, "learner": {"gail": {"gamma": 1.0}}})
    assert main(["run", "--config", str(p)]) == 1
    err = capsys.readouterr().err
    assert "purify.t_star" in err and "learner.gail.gamma" in err


def test_bad_workers_exits_one(tiny, tmp_path):
    assert main(["run", "--config", str(cfg_file(tmp_path, tiny)), "--workers", "0"]) == 1


def test_runtime_failure_exits_two(tiny, tmp_path, capsys):
    env = LinearTrack()
    bad = tmp_path / "bad.jsonl"
    save_demos(collect_demos(optimal_policy(env), env, 10, np.random.default_rng(0)), bad)
    tiny["demos"]["files"] = {"extra": "bad.jsonl"}
    assert main(["gen-demos", "--config", str(cfg_file(tmp_path, tiny))]) == 2
    assert "stage 'demos' failed" in capsys.readouterr().err
    partial = json.loads((Path(tiny["out"]) / "gen-demos" / "report.json").read_text())
    assert partial["status"] == "failed in demos"


def args_for(*argv):
    return build_parser().parse_args(list(argv))


def test_precedence_config_env_flag(tmp_path):
    p = cfg_file(tmp_path, {"seed": 1, "out": "from-file"})
    assert resolve_config(args_for("run", "--config", str(p)), {}).seed == 1
    env = {"DPIL_SEED": "2", "DPIL_OUT": "from-env"}
    cfg = resolve_config(args_for("run", "--config", str(p)), env)
    assert (cfg.seed, cfg.out) == (2, "from-env")
    cfg = resolve_config(args_for("run", "--config", str(p), "--seed", "3", "--out", "from-flag"), env)
    assert (cfg.seed, cfg.out) == (3, "from-flag")


def test_bad_env_seed_is_a_config_error(capsys):
    from dpil.config import ConfigError
    with pytest.raises(ConfigError):
        resolve_config(args_for("run"), {"DPIL_SEED": "abc"})
    with pytest.raises(ConfigError):
        resolve_config(args_for("run", "--seed", "-4"), {})


def test_command_specific_defaults():
    cfg = resolve_config(args_for("sweep-t"), {})
    assert cfg.purify.sweep_grid == [0.005, 0.01, 0.03, 0.05, 0.1, 0.2]
    assert "gail" in resolve_config(args_for("train-gail"), {}).learner.kinds


def test_all_subcommands_registered():
    sub = next(a for a in build_parser()._actions if isinstance(a, argparse._SubParsersAction))
    assert set(sub.choices) == {"gen-demos", "train-diffusion", "purify", "train-bc", "train-gail", "eval-mmd",
                                "sweep-t", "filter-baseline", "ttest", "run"}


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "dpil", "run", "--config", str(tmp_path / "missing.yaml")],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "config not found" in r.stderr
