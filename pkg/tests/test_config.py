import dataclasses

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from dpil.config import (ConfigError, RunConfig, emit_config, filter_label, parse_config, parse_filter,
                         validate_config)


def write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data) if not isinstance(data, str) else data)
    return p


def test_minimal_config_gets_all_defaults(tmp_path):
    cfg = validate_config(write(tmp_path, {"seed": 4}))
    assert cfg == dataclasses.replace(RunConfig(), seed=4)
    assert cfg.learner.gail.gamma == 0.99 and cfg.eval.gamma == 0.995


def test_empty_file_is_all_defaults(tmp_path):
    assert validate_config(write(tmp_path, "")) == RunConfig()


def test_t_star_out_of_range_names_field(tmp_path):
    with pytest.raises(ConfigError) as info:
        validate_config(write(tmp_path, {"purify": {"t_star": 1.5}}))
    assert any(e.startswith("purify.t_star") for e in info.value.errors)


@pytest.mark.parametrize("where", [{"learner": {"gail": {"gamma": 1.0}}}, {"eval": {"gamma": 1.0}}])
def test_discount_of_one_rejected(tmp_path, where):
    with pytest.raises(ConfigError, match="discount"):
        validate_config(write(tmp_path, where))


def test_every_error_is_reported(tmp_path):
    bad = {"seed": -1, "purify": {"t_star": 0.0, "sweep_grid": [0.2, 0.1]}, "diffusion": {"T": 0, "epochs": "many"},
           "eval": {"filters": ["box:3"], "ttest_pairs": [["dp_bc", "nobody"]]}, "bogus": 1,
           "learner": {"kinds": ["bc", "ppo"]}}
    with pytest.raises(ConfigError) as info:
        validate_config(write(tmp_path, bad))
    paths = {e.split(":")[0] for e in info.value.errors}
    assert paths == {"bogus", "diffusion.epochs", "seed", "purify.t_star", "purify.sweep_grid", "diffusion.T",
                     "eval.filters[0]", "eval.ttest_pairs[0]", "learner.kinds[1]"}


def test_type_errors_carry_paths():
    with pytest.raises(ConfigError) as info:
        parse_config({"env": {"goal": [0.5, "x"]}, "demos": {"mixed": "yes"}, "learner": {"bc": {"hidden": 3}}})
    paths = {e.split(":")[0] for e in info.value.errors}
    assert paths == {"env.goal[1]", "demos.mixed", "learner.bc.hidden"}


def test_unknown_dataset_references():
    with pytest.raises(ConfigError) as info:
        parse_config({"demos": {"deltas": [0.3], "mixed": False}})
    paths = {e.split(":")[0] for e in info.value.errors}
    assert paths == {"purify.sweep_datasets[0]", "purify.sweep_datasets[1]", "learner.gail.dataset",
                     "eval.decay_dataset"}


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError, match="config not found"):
        validate_config(tmp_path / "nope.yaml")
    with pytest.raises(ConfigError, match="demos.files.extra"):
        validate_config(write(tmp_path, {"demos": {"files": {"extra": "missing.jsonl"}}}))
    with pytest.raises(ConfigError, match="YAML"):
        validate_config(write(tmp_path, "seed: [1,"))


def test_demo_files_resolve_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "x.jsonl").write_text("")
    cfg = validate_config(write(tmp_path / "sub", {"demos": {"files": {"extra": "x.jsonl"}}}))
    assert cfg.demos.files["extra"] == str((tmp_path / "sub" / "x.jsonl").resolve())
    assert "extra" in cfg.imperfect_names()


def test_round_trip_defaults(tmp_path):
    cfg = RunConfig()
    assert validate_config(write(tmp_path, emit_config(cfg))) == cfg


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.floats(0.001, 1.0), n_seeds=st.integers(1, 9),
       deltas=st.lists(st.sampled_from([0.1, 0.25, 0.4, 0.6, 0.8]), min_size=1, max_size=4, unique=True),
       grid=st.lists(st.floats(0.001, 1.0), max_size=5, unique=True), kinds=st.sampled_from([["bc"], ["bc", "gail"]]))
def test_round_trip_property(tmp_path_factory, seed, t, n_seeds, deltas, grid, kinds):
    names = [f"d{d:g}" for d in deltas]
    cfg = parse_config({"seed": seed, "purify": {"t_star": t, "sweep_grid": sorted(grid), "sweep_datasets": names[:1]},
                        "demos": {"deltas": deltas}, "eval": {"n_seeds": n_seeds, "decay_dataset": names[0]},
                        "learner": {"kinds": kinds, "gail": {"dataset": names[-1]}}})
    p = tmp_path_factory.mktemp("cfg") / "c.yaml"
    emit_config(cfg, p)
    assert validate_config(p) == cfg


def test_digest_ignores_output_dir():
    a = RunConfig()
    assert a.digest() == dataclasses.replace(a, out="elsewhere").digest()
    assert a.digest() != dataclasses.replace(a, seed=1).digest()


def test_filter_helpers():
    assert parse_filter("median:5") == ("median", 5)
    assert parse_filter("gaussian:1.5") == ("gaussian", 1.5)
    assert filter_label("gaussian:1") == "filter_gaussian1"
    assert filter_label("mean:3") == "filter_mean3"


def test_dataset_names():
    cfg = parse_config({"demos": {"checkpoint_fractions": [0.3, 0.6]}})
    assert cfg.imperfect_names() == ["d0.6", "d0.4", "d0.25", "mixed", "ckpt0.3", "ckpt0.6"]
