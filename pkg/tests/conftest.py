import copy

import pytest

TINY = {
    "seed": 7,
    "demos": {"n_optimal": 50, "n_imperfect": 60, "n_reference": 60, "deltas": [0.6, 0.25],
              "checkpoint_fractions": [0.5], "rl_iters": 6},
    "diffusion": {"T": 100, "epochs": 20, "hidden": 32, "n_layers": 3},
    "purify": {"t_star": 0.1, "sweep_grid": [0.05, 0.2], "sweep_datasets": ["d0.6"], "sweep_seeds": 2},
    "learner": {"kinds": ["bc", "gail"], "bc": {"epochs": 5}, "gail": {"n_iters": 3, "episodes_per_iter": 4}},
    "eval": {"n_seeds": 3, "n_eval_episodes": 10, "decay_grid": [0.1, 0.5, 1.0], "decay_samples": 50, "n_perm": 5},
}


@pytest.fixture
def tiny(tmp_path):
    """A complete but seconds-long pipeline config writing under tmp_path."""
    cfg = copy.deepcopy(TINY)
    cfg["out"] = str(tmp_path / "run")
    return cfg


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, after the normal summary."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in rep.nodeid or rep.when != "call" and outcome != "error":
                continue
            props = dict(rep.user_properties)
            if "criterion" not in props:
                continue
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((props["criterion"], f"{verdict}  C{props['criterion']:<2} {props.get('title', '')}"
                                              f" | {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
