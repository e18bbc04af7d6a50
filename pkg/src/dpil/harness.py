"""End-to-end pipeline: demos -> denoiser -> purification -> learners -> evaluation -> report.

Work is split into independent replicates (one per evaluation seed). Replicate
``r`` derives every stage seed from ``derive_seed(root, "replicate", r)`` and a
stage name, so stages can be reordered, resumed or farmed out to worker
processes without changing any number.

Checkpoints live under ``<out>/stages/<config digest>/rep<r>/``:

    demos/<name>.jsonl                  generated (or loaded) demo sets
    diffusion/denoiser.npz              trained noise predictor
    purify/<name>.jsonl, <name>.json    purified set and its run manifest
    bc.json, filters.json, gail.json, mmd.json   learner and distance results

Rerunning with the same config picks up whatever checkpoints exist. Deleting
one reproduces it, and everything downstream, bit for bit.

Files written by :func:`emit_report` (a CSV appears only if it has rows):

    report.json           stages, provenance hashes, wall-clock, config
    returns.csv           replicate,seed,learner,dataset,mean_return,stderr,n_episodes
    mmd.csv               replicate,seed,dataset,mmd_imperfect,mmd_purified
    ttest.csv             learner_a,learner_b,dataset,mean_a,stderr_a,mean_b,stderr_b,n,p_value
    gail.csv              replicate,seed,dataset,final_return,final_stderr,random_return,random_stderr
    gail_curve_rep<r>.csv iteration,env_return_mean,env_return_stderr,disc_loss
    sweep_<dataset>.csv   t_star,mean_return,stderr,seed_count
    decay_<dataset>.csv   t_star,mmd,null_std
"""

import csv
import hashlib
import io
import json
import logging
import multiprocessing
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, delta_name, filter_label, parse_config, parse_filter
from .demos import (collect_checkpoint_demos, collect_demos, filter_denoise, load_demos, mix_demosets,
                    save_demos, wrap_noisy)
from .diffusion import Denoiser, DenoiserTrainConfig, PurifyConfig, make_schedule, purify_dataset, train_denoiser
from .envs import UniformRandomPolicy, evaluate_policy, make_env, optimal_policy
from .evaluation import bc_evaluate, divergence_decay_curve, mmd, t_star_sweep, welch_t_test
from .imitation import BCConfig, GailConfig, gail_train, train_rl_expert
from .seeding import derive_seed

log = logging.getLogger(__name__)

REPLICATE_STAGES = ("demos", "diffusion", "purify", "bc", "filters", "gail", "mmd")
AGGREGATE_STAGES = ("ttest", "sweep", "decay")
ALL_STAGES = REPLICATE_STAGES + AGGREGATE_STAGES

CSV_HEADERS = {
    "returns": ["replicate", "seed", "learner", "dataset", "mean_return", "stderr", "n_episodes"],
    "mmd": ["replicate", "seed", "dataset", "mmd_imperfect", "mmd_purified"],
    "ttest": ["learner_a", "learner_b", "dataset", "mean_a", "stderr_a", "mean_b", "stderr_b", "n", "p_value"],
    "gail": ["replicate", "seed", "dataset", "final_return", "final_stderr", "random_return", "random_stderr"],
    "gail_curve": ["iteration", "env_return_mean", "env_return_stderr", "disc_loss"],
    "sweep": ["t_star", "mean_return", "stderr", "seed_count"],
    "decay": ["t_star", "mmd", "null_std"],
}


class StageError(RuntimeError):
    """A stage failed; carries the stage name, its seed and the partial report."""

    def __init__(self, stage, seed, message, report=None):
        super().__init__(f"stage {stage!r} failed (seed {seed}): {message}")
        self.stage, self.seed, self.report = stage, seed, report


@dataclass
class EvalReport:
    stages: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    status: str = "complete"

    def content(self):
        """Everything except timings; identical configs and seeds give identical content."""
        return {"stages": self.stages, "provenance": self.provenance, "config": self.config,
                "status": self.status}

    def to_json(self, with_timings=True):
        d = self.content()
        if with_timings:
            d["wall_clock"] = self.wall_clock
        return json.dumps(_plain(d), sort_keys=True, indent=2)

    def add_time(self, stage, seconds):
        self.wall_clock[stage] = self.wall_clock.get(stage, 0.0) + seconds

    def tables(self):
        """CSV tables as ``{file stem: (header, rows)}``, only those with rows."""
        st = self.stages
        out = {}
        returns, mmds, gails = [], [], []
        for rep_key in sorted(_rep_keys(st)):
            for stage in ("bc", "filters"):
                block = st.get(stage, {}).get(rep_key)
                if not block:
                    continue
                for key, est in block["results"].items():
                    learner, dataset = key.split("/", 1)
                    returns.append([rep_key, block["seed"], learner, dataset, est["mean_return"], est["stderr"],
                                    est["n_episodes"]])
            block = st.get("mmd", {}).get(rep_key)
            if block:
                for dataset, v in block["results"].items():
                    mmds.append([rep_key, block["seed"], dataset, v["imperfect"], v["purified"]])
            block = st.get("gail", {}).get(rep_key)
            if block:
                gails.append([rep_key, block["seed"], block["dataset"], block["final"]["mean_return"],
                              block["final"]["stderr"], block["random"]["mean_return"], block["random"]["stderr"]])
                out[f"gail_curve_{rep_key}"] = (CSV_HEADERS["gail_curve"], block["curve"])
        for stem, rows in (("returns", returns), ("mmd", mmds), ("gail", gails)):
            if rows:
                out[stem] = (CSV_HEADERS[stem], rows)
        tt = st.get("ttest", [])
        if tt:
            out["ttest"] = (CSV_HEADERS["ttest"], [[r[k] for k in CSV_HEADERS["ttest"]] for r in tt])
        for dataset, sw in sorted(st.get("sweep", {}).items()):
            rows = [[t, m, s, sw["seed_count"]] for t, m, s in zip(sw["t_grid"], sw["mean_return"], sw["stderr"])]
            out[f"sweep_{dataset}"] = (CSV_HEADERS["sweep"], rows)
        for dataset, dc in sorted(st.get("decay", {}).items()):
            out[f"decay_{dataset}"] = (CSV_HEADERS["decay"], [list(r) for r in zip(dc["t"], dc["mmd"], dc["null_std"])])
        return out


def _rep_keys(stages):
    keys = set()
    for stage in REPLICATE_STAGES:
        keys |= set(stages.get(stage, {}))
    return keys


def _plain(x):
    """Recursively turn numpy scalars/arrays and tuples into JSON-native values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in _plain(row)])
    return buf.getvalue()


def emit_report(report, out_dir):
    """Write report.json and one CSV per table; returns the written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "report.json"]
        _atomic_write(written[0], report.to_json() + "\n")
        for stem, (header, rows) in report.tables().items():
            path = out_dir / f"{stem}.csv"
            _atomic_write(path, _csv_text(header, rows))
            written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return written


# --- replicate stages --------------------------------------------------------------------------

def _est(e):
    return e.to_dict()


def _denoiser_digest(den):
    h = hashlib.sha256()
    for p in den.net.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()[:16]


class Replicate:
    """Lazily computed, checkpointed stages of one replicate."""

    def __init__(self, cfg, index):
        self.cfg = cfg
        self.index = index
        self.seed = derive_seed(cfg.seed, "replicate", index)
        self.dir = Path(cfg.out) / "stages" / cfg.digest() / f"rep{index}"
        self.env = _env(cfg)
        self.schedule = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_1, cfg.diffusion.beta_T)
        self.timings = {}
        self.provenance = {}
        self._cache = {}

    def rng(self, *names):
        return np.random.default_rng(derive_seed(self.seed, *names))

    def _timed(self, stage, fn):
        if stage not in self._cache:
            t0 = time.perf_counter()
            self._cache[stage] = fn()
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0
        return self._cache[stage]

    # demos ------------------------------------------------------------------------------------
    def demos(self):
        return self._timed("demos", self._demos)

    def _demos(self):
        cfg = self.cfg.demos
        names = ["optimal", "reference", *self.cfg.imperfect_names()]
        paths = {n: self.dir / "demos" / f"{n}.jsonl" for n in names}
        if all(p.is_file() for p in paths.values()):
            sets = {n: load_demos(p) for n, p in paths.items()}
        else:
            sets = self._generate_demos()
            for n, ds in sets.items():
                save_demos(ds, paths[n])
        for n, ds in sets.items():
            self.provenance[f"demos/{n}"] = ds.digest()
        return sets

    def _generate_demos(self):
        cfg, env = self.cfg.demos, self.env
        expert = optimal_policy(env)
        sets = {
            "optimal": collect_demos(expert, env, cfg.n_optimal, self.rng("demos", "optimal"), "optimal",
                                     {"delta": 0.0}),
            "reference": collect_demos(expert, env, cfg.n_reference, self.rng("demos", "reference"), "reference",
                                       {"delta": 0.0}),
        }
        for d in cfg.deltas:
            n = delta_name(d)
            sets[n] = collect_demos(wrap_noisy(expert, d, env), env, cfg.n_imperfect, self.rng("demos", n), n,
                                    {"delta": d})
        if cfg.mixed and cfg.deltas:
            share = cfg.n_imperfect // len(cfg.deltas)
            parts = [collect_demos(wrap_noisy(expert, d, env), env, share, self.rng("demos", "mixed", d),
                                   delta_name(d), {"delta": d}) for d in cfg.deltas]
            sets["mixed"] = mix_demosets(parts)
        if cfg.checkpoint_fractions:
            history = train_rl_expert(env, cfg.rl_iters, tuple(cfg.checkpoint_fractions),
                                      rng=self.rng("demos", "rl_expert"))
            for f in cfg.checkpoint_fractions:
                n = f"ckpt{f:g}"
                sets[n] = collect_checkpoint_demos(history, f, env, cfg.n_imperfect, self.rng("demos", n))
        for n, p in cfg.files.items():
            sets[n] = load_demos(p)
        for n, ds in sets.items():
            if (ds.state_dim, ds.action_dim) != (env.state_dim, env.action_dim):
                raise ValueError(f"demo set {n!r} has dims ({ds.state_dim}, {ds.action_dim}), "
                                 f"environment needs ({env.state_dim}, {env.action_dim})")
        return sets

    # diffusion --------------------------------------------------------------------------------
    def denoiser(self):
        return self._timed("diffusion", self._denoiser)

    def _denoiser(self):
        path = self.dir / "diffusion" / "denoiser.npz"
        if path.is_file():
            den = Denoiser.load(path)
        else:
            optimal = self.demos()["optimal"]
            f = self.cfg.diffusion
            tcfg = DenoiserTrainConfig(epochs=f.epochs, batch_size=f.batch_size, lr=f.lr, hidden=f.hidden,
                                       n_layers=f.n_layers, dropout=f.dropout, batch_norm=f.batch_norm,
                                       ema_decay=f.ema_decay)
            den = train_denoiser(optimal, self.schedule, tcfg, self.rng("diffusion"))
            den.save(path, self.schedule, {"train_set": optimal.digest()})
        self.provenance["diffusion/denoiser"] = _denoiser_digest(den)
        self.provenance["diffusion/schedule"] = self.schedule.digest()
        return den

    # purification -----------------------------------------------------------------------------
    def purified(self):
        return self._timed("purify", self._purified)

    def _purified(self):
        if not self.cfg.purify.enabled:
            return {}, {}
        sets, out, manifests = self.demos(), {}, {}
        pcfg = PurifyConfig.for_schedule(self.cfg.purify.t_star, self.schedule,
                                         noise_at_last_step=self.cfg.purify.noise_at_last_step)
        for n in self.cfg.imperfect_names():
            path, mpath = self.dir / "purify" / f"{n}.jsonl", self.dir / "purify" / f"{n}.json"
            if path.is_file() and mpath.is_file():
                out[n], manifests[n] = load_demos(path), json.loads(mpath.read_text())
            else:
                seed = derive_seed(self.seed, "purify", n)
                out[n] = purify_dataset(sets[n], pcfg, self.denoiser(), self.schedule, seed)
                manifests[n] = {"seed": seed, "t_star": pcfg.t_star, "i_star": pcfg.i_star,
                                "schedule": self.schedule.digest(), "input": sets[n].digest(),
                                "output": out[n].digest()}
                save_demos(out[n], path)
                _atomic_write(mpath, json.dumps(manifests[n], sort_keys=True, indent=2) + "\n")
            self.provenance[f"purify/{n}"] = out[n].digest()
        return out, manifests

    # learners ---------------------------------------------------------------------------------
    def _bc_cfg(self):
        b = self.cfg.learner.bc
        return BCConfig(epochs=b.epochs, batch_size=b.batch_size, lr=b.lr, hidden=tuple(b.hidden))

    def _cached_json(self, name, fn):
        path = self.dir / f"{name}.json"
        if path.is_file():
            return json.loads(path.read_text())
        result = _plain(fn())
        _atomic_write(path, json.dumps(result, sort_keys=True, indent=2) + "\n")
        return result

    def _evaluate_bc(self, train_set, dataset):
        ev = self.cfg.eval
        # learners trained on variants of one dataset share init and evaluation start states
        _, est = bc_evaluate(train_set, self.env, self._bc_cfg(), derive_seed(self.seed, "bc", dataset),
                             ev.n_eval_episodes, ev.gamma)
        return _est(est)

    def bc(self):
        return self._timed("bc", lambda: self._cached_json("bc", self._bc))

    def _bc(self):
        sets = self.demos()
        purified, _ = self.purified()
        optimal = sets["optimal"]
        res = {"bc_opt/optimal": self._evaluate_bc(optimal, "optimal")}
        for n in self.cfg.imperfect_names():
            res[f"bc_all/{n}"] = self._evaluate_bc(optimal.concat(sets[n]), n)
            if n in purified:
                res[f"dp_bc/{n}"] = self._evaluate_bc(optimal.concat(purified[n]), n)
        return res

    def filters(self):
        return self._timed("filters", lambda: self._cached_json("filters", self._filters))

    def _filters(self):
        sets = self.demos()
        res = {}
        for n in self.cfg.imperfect_names():
            for fspec in self.cfg.eval.filters:
                kind, param = parse_filter(fspec)
                filtered = filter_denoise(sets[n], kind, param)
                res[f"{filter_label(fspec)}/{n}"] = self._evaluate_bc(sets["optimal"].concat(filtered), n)
        return res

    def gail(self):
        return self._timed("gail", lambda: self._cached_json("gail", self._gail))

    def _gail(self):
        g, ev = self.cfg.learner.gail, self.cfg.eval
        sets = self.demos()
        purified, _ = self.purified()
        imperfect = purified.get(g.dataset, sets[g.dataset])
        train = sets["optimal"].concat(imperfect)
        pairs = sets["optimal"].pairs()
        gcfg = GailConfig(n_iters=g.n_iters, disc_updates_per_iter=g.disc_updates_per_iter,
                          episodes_per_iter=g.episodes_per_iter, disc_batch=g.disc_batch, gamma=g.gamma,
                          entropy_coef=g.entropy_coef, policy_lr=g.policy_lr, disc_lr=g.disc_lr,
                          hidden=tuple(g.hidden))
        policy, curve = gail_train(train, self.env, gcfg, self.rng("gail"), pairs.mean(axis=0),
                                   np.maximum(pairs.std(axis=0), 1e-6))
        final = evaluate_policy(policy, self.env, ev.n_eval_episodes, ev.gamma, self.rng("gail", "eval"))
        rand = evaluate_policy(UniformRandomPolicy(self.env), self.env, ev.n_eval_episodes, ev.gamma,
                               self.rng("gail", "eval"))
        return {"dataset": g.dataset, "purified": g.dataset in purified, "final": _est(final),
                "random": _est(rand), "curve": [list(r) for r in curve.rows()]}

    def mmd(self):
        return self._timed("mmd", lambda: self._cached_json("mmd", self._mmd))

    def _mmd(self):
        sets = self.demos()
        purified, _ = self.purified()
        ref = sets["reference"]
        return {n: {"imperfect": mmd(ref, sets[n]), "purified": mmd(ref, purified[n]) if n in purified else None}
                for n in self.cfg.imperfect_names()}


def _env(cfg):
    e = cfg.env
    goal = e.goal if e.env == "point_reach" else e.goal[0]
    return make_env({"env": e.env, "goal": goal, "dt": e.dt, "k": e.k, "H": e.H, "box": e.box})


def _replicate_job(args):
    """Run the requested stages of one replicate; never raises (errors come back as data)."""
    cfg_dict, index, stages = args
    cfg = parse_config(cfg_dict)
    rep = Replicate(cfg, index)
    results, error = {}, None
    current = None
    try:
        for stage in stages:
            current = stage
            if stage == "demos":
                sets = rep.demos()
                results[stage] = {n: {"n": len(ds), "episodes": len(ds.episodes()),
                                      "mean_episode_return": float(np.mean(ds.episode_returns()))}
                                  for n, ds in sets.items()}
            elif stage == "diffusion":
                den = rep.denoiser()
                results[stage] = {"final_loss": den.final_loss, "epochs": len(den.loss_history)}
            elif stage == "purify":
                results[stage] = rep.purified()[1]
            else:
                results[stage] = getattr(rep, stage)()
    except Exception as exc:  # reported to the parent with the stage and seed
        log.debug("replicate %d failed in %s", index, current, exc_info=True)
        error = {"stage": current, "seed": rep.seed, "message": f"{type(exc).__name__}: {exc}",
                 "traceback": traceback.format_exc()}
    return {"index": index, "seed": rep.seed, "results": results, "provenance": rep.provenance,
            "timings": rep.timings, "error": error}


def _pool_map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items))


def _sweep_job(args):
    cfg_dict, dataset = args
    cfg = parse_config(cfg_dict)
    rep = Replicate(cfg, 0)
    t0 = time.perf_counter()
    sets = rep.demos()
    b = cfg.learner.bc
    res = t_star_sweep(sets["optimal"], sets[dataset], rep.env, rep.denoiser(), rep.schedule, cfg.purify.sweep_grid,
                       n_seeds=cfg.purify.sweep_seeds,
                       bc_cfg=BCConfig(epochs=b.epochs, batch_size=b.batch_size, lr=b.lr, hidden=tuple(b.hidden)),
                       n_eval_episodes=cfg.eval.n_eval_episodes, seed=derive_seed(cfg.seed, "sweep", dataset))
    out = {"t_grid": res.t_grid, "mean_return": res.mean_return, "stderr": res.stderr,
           "seed_count": res.seed_count, "argmax": res.argmax, "per_seed": res.per_seed,
           "baseline_mean": res.baseline_mean, "baseline_stderr": res.baseline_stderr}
    return dataset, _plain(out), time.perf_counter() - t0


def _decay(cfg):
    rep = Replicate(cfg, 0)
    sets = rep.demos()
    ev = cfg.eval
    curve = divergence_decay_curve(sets["reference"], sets[ev.decay_dataset], rep.schedule, ev.decay_grid,
                                   ev.decay_samples, np.random.default_rng(derive_seed(cfg.seed, "decay")), ev.n_perm)
    return {ev.decay_dataset: {"t": curve.t, "mmd": curve.mmd, "null_std": curve.null_std,
                               "worst_violation": curve.worst_violation()}}


def _ttest(cfg, stages):
    rows = []
    learners = {}
    for stage in ("bc", "filters"):
        for rep_key, block in stages.get(stage, {}).items():
            for key, est in block["results"].items():
                learners.setdefault(key, {})[rep_key] = est["mean_return"]
    for a, b in cfg.eval.ttest_pairs:
        for n in cfg.imperfect_names():
            va, vb = learners.get(f"{a}/{n}"), learners.get(f"{b}/{n}")
            if not va or not vb:
                continue
            reps = sorted(set(va) & set(vb), key=lambda k: int(k[3:]))
            xa, xb = [va[r] for r in reps], [vb[r] for r in reps]
            p = welch_t_test(xa, xb) if len(reps) >= 2 else None
            rows.append({"learner_a": a, "learner_b": b, "dataset": n, "mean_a": float(np.mean(xa)),
                         "stderr_a": _stderr(xa), "mean_b": float(np.mean(xb)), "stderr_b": _stderr(xb),
                         "n": len(reps), "p_value": p})
    return rows


def _stderr(x):
    return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def _stages_for(cfg, stages):
    if stages is None:
        stages = ["demos", "diffusion", "purify", "bc", "filters", "mmd", "ttest", "sweep", "decay"]
        if "gail" in cfg.learner.kinds:
            stages.insert(5, "gail")
        if not cfg.purify.enabled:
            stages = [s for s in stages if s not in ("diffusion", "purify", "sweep")]
        if not cfg.eval.filters:
            stages.remove("filters")
        if not cfg.eval.mmd:
            stages.remove("mmd")
        if not cfg.purify.sweep_grid and "sweep" in stages:
            stages.remove("sweep")
        if not cfg.eval.decay_grid:
            stages.remove("decay")
    unknown = [s for s in stages if s not in ALL_STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}; valid: {list(ALL_STAGES)}")
    return list(stages)


def run_pipeline(cfg, workers=1, stages=None, out_dir=None):
    """Run the configured stages and write the report to ``out_dir`` (default ``cfg.out``).

    ``stages`` restricts the run to a subset (upstream checkpoints are built
    on demand). ``workers`` only changes how replicates are scheduled, never
    the numbers. On failure a partial report is written and StageError raised.
    """
    if isinstance(cfg, RunConfig):
        cfg_dict = cfg.to_dict()
    else:
        cfg_dict, cfg = cfg, parse_config(cfg)
    stages = _stages_for(cfg, stages)
    out_dir = Path(out_dir or cfg.out)
    report = EvalReport(config=cfg_dict)
    report.provenance["config"] = cfg.digest()
    report.provenance["schedule"] = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_1, cfg.diffusion.beta_T).digest()

    def fail(stage, seed, message):
        report.status = f"failed in {stage}"
        emit_report(report, out_dir)
        raise StageError(stage, seed, message, report)

    rep_stages = [s for s in stages if s in REPLICATE_STAGES]
    first_error = None
    if rep_stages:
        jobs = [(cfg_dict, r, rep_stages) for r in range(cfg.eval.n_seeds)]
        for res in _pool_map(_replicate_job, jobs, workers):
            key = f"rep{res['index']}"
            for stage, value in res["results"].items():
                if stage == "gail":
                    report.stages.setdefault(stage, {})[key] = {"seed": res["seed"], **value}
                else:
                    report.stages.setdefault(stage, {})[key] = {"seed": res["seed"], "results": value}
            for name, digest in res["provenance"].items():
                report.provenance[f"{key}/{name}"] = digest
            for stage, secs in res["timings"].items():
                report.add_time(stage, secs)
            if res["error"] and first_error is None:
                first_error = res["error"]
    if first_error:
        log.error("%s", first_error["traceback"])
        fail(first_error["stage"], first_error["seed"], first_error["message"])

    if "ttest" in stages:
        t0 = time.perf_counter()
        try:
            report.stages["ttest"] = _ttest(cfg, report.stages)
        except Exception as exc:
            fail("ttest", cfg.seed, f"{type(exc).__name__}: {exc}")
        report.add_time("ttest", time.perf_counter() - t0)
    if "sweep" in stages:
        if not cfg.purify.sweep_grid:
            fail("sweep", cfg.seed, "purify.sweep_grid is empty")
        try:
            results = _pool_map(_sweep_job, [(cfg_dict, n) for n in cfg.purify.sweep_datasets], workers)
        except Exception as exc:
            fail("sweep", derive_seed(cfg.seed, "sweep"), f"{type(exc).__name__}: {exc}")
        report.stages["sweep"] = {n: r for n, r, _ in results}
        report.add_time("sweep", sum(t for _, _, t in results))
    if "decay" in stages:
        t0 = time.perf_counter()
        try:
            report.stages["decay"] = _plain(_decay(cfg))
        except Exception as exc:
            fail("decay", derive_seed(cfg.seed, "decay"), f"{type(exc).__name__}: {exc}")
        report.add_time("decay", time.perf_counter() - t0)

    report.stages = _plain(report.stages)
    emit_report(report, out_dir)
    return report
