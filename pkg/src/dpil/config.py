"""Run configuration: YAML schema, validation with field paths, and round-trip emission.

A config file is a YAML mapping whose top-level keys mirror :class:`RunConfig`.
Any key may be omitted and takes the default shown below; unknown keys are
errors. Example::

    seed: 3
    out: runs/dp-bc
    env: {env: point_reach, goal: [0.5, 0.5], dt: 0.1, k: 5.0, H: 25}
    demos: {n_optimal: 250, n_imperfect: 500, deltas: [0.6, 0.4, 0.25], mixed: true}
    diffusion: {T: 1000, beta_1: 0.0001, beta_T: 0.02, epochs: 1500, ema_decay: 0.999}
    purify: {enabled: true, t_star: 0.1, sweep_grid: []}
    learner: {kinds: [bc], bc: {epochs: 300}}
    eval: {mmd: true, n_eval_episodes: 100, n_seeds: 5, ttest_pairs: [[dp_bc, bc_all]]}

Dataset names used throughout: ``optimal``, ``reference`` (held-out optimal
transitions for distances), ``d<delta>`` (e.g. ``d0.6``), ``mixed`` and
``ckpt<fraction>``. ``demos.files`` maps a dataset name to a pre-recorded demo
file that replaces the generated one.
"""

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

FILTER_KINDS = ("mean", "median", "gaussian")
LEARNER_KINDS = ("bc", "gail")
ENV_NAMES = ("point_reach", "linear_track")


class ConfigError(ValueError):
    """Validation failed; ``errors`` lists every problem as ``"field.path: message"``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


def _items(kind):
    return field(default_factory=list, metadata={"item": kind})


@dataclass
class EnvBlock:
    env: str = "point_reach"
    goal: list = field(default_factory=lambda: [0.5, 0.5], metadata={"item": float})
    dt: float = 0.1
    k: float = 5.0
    H: int = 25
    box: float = 2.0


@dataclass
class DemoBlock:
    n_optimal: int = 250
    n_imperfect: int = 500
    n_reference: int = 500
    deltas: list = field(default_factory=lambda: [0.6, 0.4, 0.25], metadata={"item": float})
    mixed: bool = True
    checkpoint_fractions: list = _items(float)
    rl_iters: int = 300
    files: dict = field(default_factory=dict)


@dataclass
class DiffusionBlock:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    epochs: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 128
    n_layers: int = 5
    dropout: float = 0.0
    batch_norm: bool = False
    ema_decay: float = 0.999


@dataclass
class PurifyBlock:
    enabled: bool = True
    t_star: float = 0.1
    noise_at_last_step: bool = False
    sweep_grid: list = _items(float)
    sweep_datasets: list = field(default_factory=lambda: ["d0.6", "d0.25"], metadata={"item": str})
    sweep_seeds: int = 3


@dataclass
class BCBlock:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    hidden: list = field(default_factory=lambda: [100, 100], metadata={"item": int})


@dataclass
class GailBlock:
    dataset: str = "d0.6"
    n_iters: int = 200
    disc_updates_per_iter: int = 5
    episodes_per_iter: int = 32
    disc_batch: int = 256
    gamma: float = 0.99
    entropy_coef: float = 0.0
    policy_lr: float = 1e-3
    disc_lr: float = 3e-4
    hidden: list = field(default_factory=lambda: [100, 100], metadata={"item": int})


@dataclass
class LearnerBlock:
    kinds: list = field(default_factory=lambda: ["bc"], metadata={"item": str})
    bc: BCBlock = field(default_factory=BCBlock)
    gail: GailBlock = field(default_factory=GailBlock)


@dataclass
class EvalBlock:
    mmd: bool = True
    n_eval_episodes: int = 100
    gamma: float = 0.995
    n_seeds: int = 5
    filters: list = field(default_factory=lambda: ["mean:3", "median:3", "gaussian:1"], metadata={"item": str})
    ttest_pairs: list = field(default_factory=lambda: [["dp_bc", "bc_all"]], metadata={"item": "pair"})
    decay_grid: list = _items(float)
    decay_dataset: str = "d0.6"
    decay_samples: int = 500
    n_perm: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    env: EnvBlock = field(default_factory=EnvBlock)
    demos: DemoBlock = field(default_factory=DemoBlock)
    diffusion: DiffusionBlock = field(default_factory=DiffusionBlock)
    purify: PurifyBlock = field(default_factory=PurifyBlock)
    learner: LearnerBlock = field(default_factory=LearnerBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    def to_dict(self):
        return asdict(self)

    def digest(self, exclude=("out",)):
        """Hash of the settings that determine results (the output dir excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # dataset bookkeeping shared by the pipeline and the validator
    def delta_names(self):
        return [delta_name(d) for d in self.demos.deltas]

    def imperfect_names(self):
        names = self.delta_names()
        if self.demos.mixed and self.demos.deltas:
            names.append("mixed")
        names += [f"ckpt{f:g}" for f in self.demos.checkpoint_fractions]
        names += [n for n in self.demos.files if n not in names and n not in ("optimal", "reference")]
        return names


def delta_name(delta):
    return f"d{float(delta):g}"


def parse_filter(fspec):
    """``"median:5"`` -> ``("median", 5)``; gaussian params stay floats."""
    kind, _, param = str(fspec).partition(":")
    value = float(param)
    return kind, (value if kind == "gaussian" else int(value))


# --- building and validation ---------------------------------------------------------------

def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _coerce(kind, value, path, errors):
    """Check one leaf value; returns ``(ok, value)``."""
    if kind is bool:
        if isinstance(value, bool):
            return True, value
        errors.append(f"{path}: expected true/false, got {value!r}")
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return True, value
        errors.append(f"{path}: expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, float(value)
        errors.append(f"{path}: expected a number, got {value!r}")
    elif kind is str:
        if isinstance(value, str):
            return True, value
        errors.append(f"{path}: expected a string, got {value!r}")
    elif kind == "pair":
        if isinstance(value, list) and len(value) == 2 and all(isinstance(v, str) for v in value):
            return True, list(value)
        errors.append(f"{path}: expected a pair of learner names, got {value!r}")
    return False, None


def _build(cls, data, path, errors):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            errors.append(f"{_join(path, key)}: unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        p, value = _join(path, f.name), data[f.name]
        if is_dataclass(f.type):
            kwargs[f.name] = _build(f.type, value, p, errors)
        elif f.type is list:
            if not isinstance(value, list):
                errors.append(f"{p}: expected a list, got {value!r}")
                continue
            out, good = [], True
            for j, item in enumerate(value):
                ok, v = _coerce(f.metadata["item"], item, f"{p}[{j}]", errors)
                good &= ok
                out.append(v)
            if good:
                kwargs[f.name] = out
        elif f.type is dict:
            if isinstance(value, dict) and all(isinstance(k, str) and isinstance(v, str) for k, v in value.items()):
                kwargs[f.name] = dict(value)
            else:
                errors.append(f"{p}: expected a mapping of dataset name to file path")
        else:
            ok, v = _coerce(f.type, value, p, errors)
            if ok:
                kwargs[f.name] = v
    return cls(**kwargs)


def _check_ranges(cfg, errors, base_dir=None):
    def need(cond, path, msg):
        if not cond:
            errors.append(f"{path}: {msg}")

    need(cfg.seed >= 0, "seed", "must be >= 0")
    e = cfg.env
    need(e.env in ENV_NAMES, "env.env", f"must be one of {list(ENV_NAMES)}")
    need(len(e.goal) == (2 if e.env == "point_reach" else 1), "env.goal", "length must match the state dimension")
    need(all(abs(g) <= e.box for g in e.goal), "env.goal", "must lie inside the state box")
    need(e.dt > 0, "env.dt", "must be > 0")
    need(e.k > 0, "env.k", "must be > 0")
    need(e.H >= 1, "env.H", "must be >= 1")
    need(e.box > 0, "env.box", "must be > 0")

    d = cfg.demos
    need(d.n_optimal >= 2, "demos.n_optimal", "must be >= 2")
    need(d.n_imperfect >= 2, "demos.n_imperfect", "must be >= 2")
    need(d.n_reference >= 2, "demos.n_reference", "must be >= 2")
    need(all(x >= 0 for x in d.deltas), "demos.deltas", "noise levels must be >= 0")
    need(len(set(d.deltas)) == len(d.deltas), "demos.deltas", "must not repeat")
    need(not d.mixed or len(d.deltas) >= 1, "demos.mixed", "needs at least one delta")
    need(not d.mixed or d.n_imperfect >= max(1, len(d.deltas)), "demos.n_imperfect",
         "too small to split across the mixed sources")
    need(all(0 < f <= 1 for f in d.checkpoint_fractions), "demos.checkpoint_fractions", "must lie in (0, 1]")
    need(d.rl_iters >= 1, "demos.rl_iters", "must be >= 1")
    for name, p in d.files.items():
        resolved = Path(p) if Path(p).is_absolute() or base_dir is None else Path(base_dir) / p
        if not resolved.is_file():
            errors.append(f"demos.files.{name}: file not found: {resolved}")
        else:
            d.files[name] = str(resolved.resolve())

    f = cfg.diffusion
    need(f.T >= 1, "diffusion.T", "must be >= 1")
    need(0 < f.beta_1 <= f.beta_T < 1, "diffusion.beta_1", "need 0 < beta_1 <= beta_T < 1")
    for key in ("epochs", "batch_size", "hidden", "n_layers"):
        need(getattr(f, key) >= 1, f"diffusion.{key}", "must be >= 1")
    need(f.lr > 0, "diffusion.lr", "must be > 0")
    need(0 <= f.dropout < 1, "diffusion.dropout", "must lie in [0, 1)")
    need(0 <= f.ema_decay < 1, "diffusion.ema_decay", "must lie in [0, 1)")

    p = cfg.purify
    need(0 < p.t_star <= 1, "purify.t_star", f"must lie in (0, 1], got {p.t_star}")
    g = p.sweep_grid
    need(all(0 < t <= 1 for t in g), "purify.sweep_grid", "values must lie in (0, 1]")
    need(all(b > a for a, b in zip(g, g[1:])), "purify.sweep_grid", "must be strictly increasing")
    need(p.sweep_seeds >= 1, "purify.sweep_seeds", "must be >= 1")
    names = cfg.imperfect_names()
    for j, n in enumerate(p.sweep_datasets):
        need(n in names, f"purify.sweep_datasets[{j}]", f"unknown dataset {n!r}; have {names}")

    ln = cfg.learner
    for j, k in enumerate(ln.kinds):
        need(k in LEARNER_KINDS, f"learner.kinds[{j}]", f"must be one of {list(LEARNER_KINDS)}")
    for key in ("epochs", "batch_size"):
        need(getattr(ln.bc, key) >= 1, f"learner.bc.{key}", "must be >= 1")
    need(ln.bc.lr > 0, "learner.bc.lr", "must be > 0")
    need(all(h >= 1 for h in ln.bc.hidden), "learner.bc.hidden", "widths must be >= 1")
    gl = ln.gail
    need(gl.dataset in names, "learner.gail.dataset", f"unknown dataset {gl.dataset!r}; have {names}")
    for key in ("n_iters", "disc_updates_per_iter", "episodes_per_iter", "disc_batch"):
        need(getattr(gl, key) >= 1, f"learner.gail.{key}", "must be >= 1")
    need(0 <= gl.gamma < 1, "learner.gail.gamma", "discount must lie in [0, 1)")
    need(gl.policy_lr > 0 and gl.disc_lr > 0, "learner.gail.policy_lr", "learning rates must be > 0")
    need(gl.entropy_coef >= 0, "learner.gail.entropy_coef", "must be >= 0")
    need(all(h >= 1 for h in gl.hidden), "learner.gail.hidden", "widths must be >= 1")

    ev = cfg.eval
    need(ev.n_eval_episodes >= 2, "eval.n_eval_episodes", "must be >= 2")
    need(0 <= ev.gamma < 1, "eval.gamma", "discount must lie in [0, 1)")
    need(ev.n_seeds >= 1, "eval.n_seeds", "must be >= 1")
    for j, fspec in enumerate(ev.filters):
        try:
            kind, param = parse_filter(fspec)
            ok = kind in FILTER_KINDS and param > 0 and (kind == "gaussian" or param % 2 == 1)
        except ValueError:
            ok = False
        need(ok, f"eval.filters[{j}]", f"expected 'mean:<odd>', 'median:<odd>' or 'gaussian:<sigma>', got {fspec!r}")
    learners = {"bc_all", "dp_bc", "bc_opt"} | {filter_label(s) for s in ev.filters}
    for j, pair in enumerate(ev.ttest_pairs):
        for side in pair:
            need(side in learners, f"eval.ttest_pairs[{j}]", f"unknown learner {side!r}")
    dg = ev.decay_grid
    need(all(0 < t <= 1 for t in dg), "eval.decay_grid", "values must lie in (0, 1]")
    need(all(b > a for a, b in zip(dg, dg[1:])), "eval.decay_grid", "must be strictly increasing")
    need(ev.decay_dataset in names, "eval.decay_dataset", f"unknown dataset {ev.decay_dataset!r}")
    need(ev.decay_samples >= 2, "eval.decay_samples", "must be >= 2")
    need(ev.n_perm >= 2, "eval.n_perm", "must be >= 2")


def filter_label(fspec):
    try:
        kind, param = parse_filter(fspec)
    except ValueError:
        return str(fspec)
    return f"filter_{kind}{param:g}"


def parse_config(data, base_dir=None):
    """Build and check a RunConfig from a plain mapping; raises ConfigError with every problem."""
    errors = []
    cfg = _build(RunConfig, data, "", errors)
    # fields with type errors fell back to defaults, so range checks on the rest still apply
    _check_ranges(cfg, errors, base_dir)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path):
    """Load a YAML config file; returns a RunConfig or raises ConfigError listing all errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"<file>: config not found: {path}"])
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: YAML parse error: {exc}"]) from exc
    return parse_config(data, base_dir=path.parent)


def emit_config(cfg, path=None):
    """YAML text for ``cfg``; also written to ``path`` when given."""
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text
