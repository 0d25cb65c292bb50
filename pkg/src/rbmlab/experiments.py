"""Configuration-driven experiment pipelines with reproducible outputs.

Configs are INI files with [experiment], [model] and [algorithm] sections,
validated strictly against the per-kind schema: unknown sections or keys
abort before any computation.  Each run writes one trace CSV per seed plus a
summary.json carrying per-seed and median metrics, a content hash of the
config, and wall-clock time.  CSV bodies are bitwise reproducible for a fixed
config; only the summary carries timing.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from configparser import ConfigParser
from dataclasses import dataclass

import numpy as np

from . import baselines, gordon
from .amp import AmpConfig, amp_run
from .effective_model import EffectiveModel, HiddenPrior
from .errors import SolverError, ValidationError
from .gd_dmft import GdConfig, dmft_predict, gd_run
from .spiked_data import SpikePrior, sample_spiked
from .state_evolution import (GaussHermiteEngine, SeProblem, bbp_threshold,
                              k1_summary, se_fixed_point, se_init, se_run,
                              se_overlap)

KINDS = ("amp_vs_se", "gd_vs_dmft", "snr_sweep", "threshold_bracket",
         "gordon_rank1", "baselines")

# schema: section -> key -> (type, default); None default means required
_COMMON = {
    "experiment": {"kind": (str, None), "seeds": (str, None)},
    "model": {"alpha": (float, 2.0), "lambdas": (str, "1.4,1.4"),
              "k": (int, 2), "d": (int, 4000), "prior": (str, "rademacher")},
}
_ALGO = {
    "amp_vs_se": {"damping": (float, 0.7), "max_iters": (int, 200),
                  "tol_conv": (float, 1e-10), "init_overlap": (float, 0.3),
                  "se_zeta": (float, 0.7)},
    "gd_vs_dmft": {"learning_rate": (float, 0.2), "steps": (int, 30),
                   "init_overlap": (float, 0.3), "init_scale": (float, 1.0),
                   "dmft_samples": (int, 100_000)},
    "snr_sweep": {"lambda_min": (float, 0.5), "lambda_max": (float, 3.0),
                  "points": (int, 20), "onset_overlap": (float, 0.05)},
    "threshold_bracket": {"rel_width": (float, 0.02), "init_overlap": (float, 1e-3),
                          "grow_steps": (int, 400)},
    "gordon_rank1": {"tol": (float, 1e-9), "gh_nodes": (int, 800)},
    "baselines": {"cd_learning_rate": (float, 25.0), "cd_epochs": (int, 150),
                  "cd_batch": (int, 50), "gd_learning_rate": (float, 0.2),
                  "gd_steps": (int, 60), "gd_init_overlap": (float, 0.3)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seeds: tuple
    model: dict
    algorithm: dict
    raw_text: str

    def content_hash(self) -> str:
        return hashlib.sha256(self.raw_text.encode()).hexdigest()[:16]


def _parse_typed(section, key, raw, typ):
    try:
        return typ(raw)
    except Exception as exc:
        raise ValidationError(f"[{section}] {key}: cannot parse {raw!r} as "
                              f"{typ.__name__}") from exc


def parse_config(text: str, kind_override: str | None = None) -> ExperimentConfig:
    cp = ConfigParser()
    cp.read_string(text)
    allowed_sections = {"experiment", "model", "algorithm"}
    extra = set(cp.sections()) - allowed_sections
    if extra:
        raise ValidationError(f"unknown config sections: {sorted(extra)}")

    values = {"experiment": {}, "model": {}, "algorithm": {}}
    for section in ("experiment", "model"):
        schema = _COMMON[section]
        present = dict(cp[section]) if cp.has_section(section) else {}
        unknown = set(present) - set(schema)
        if unknown:
            raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
        for key, (typ, default) in schema.items():
            if key in present:
                values[section][key] = _parse_typed(section, key, present[key], typ)
            elif default is not None or (section, key) == ("experiment", "kind"):
                values[section][key] = default
            else:
                raise ValidationError(f"[{section}] {key} is required")

    kind = kind_override or values["experiment"].get("kind")
    if kind not in KINDS:
        raise ValidationError(f"unknown experiment kind {kind!r}")
    values["experiment"]["kind"] = kind

    algo_schema = _ALGO[kind]
    present = dict(cp["algorithm"]) if cp.has_section("algorithm") else {}
    unknown = set(present) - set(algo_schema)
    if unknown:
        raise ValidationError(f"unknown keys in [algorithm] for {kind}: {sorted(unknown)}")
    for key, (typ, default) in algo_schema.items():
        values["algorithm"][key] = (_parse_typed("algorithm", key, present[key], typ)
                                    if key in present else default)

    seeds_raw = values["experiment"].get("seeds")
    if seeds_raw is None:
        raise ValidationError("[experiment] seeds is required")
    try:
        seeds = tuple(int(s) for s in str(seeds_raw).split(",") if s.strip() != "")
    except Exception as exc:
        raise ValidationError(f"cannot parse seeds {seeds_raw!r}") from exc
    if not seeds:
        raise ValidationError("seeds list is empty")

    return ExperimentConfig(kind=kind, seeds=seeds, model=values["model"],
                            algorithm=values["algorithm"], raw_text=text)


def load_config(path: str, kind_override: str | None = None) -> ExperimentConfig:
    with open(path, "r") as f:
        return parse_config(f.read(), kind_override)


# --- model construction helpers ----------------------------------------------


def _build(model_params: dict):
    lambdas = np.array([float(s) for s in str(model_params["lambdas"]).split(",")])
    r = lambdas.shape[0]
    k = int(model_params["k"])
    alpha = float(model_params["alpha"])
    if model_params["prior"] == "rademacher":
        prior_u, prior_w = SpikePrior.rademacher(r), SpikePrior.rademacher(r)
    elif model_params["prior"] == "gaussian":
        prior_u, prior_w = SpikePrior.gaussian(r), SpikePrior.gaussian(r)
    else:
        raise ValidationError(f"unknown prior {model_params['prior']!r}")
    model = EffectiveModel(hidden_prior=HiddenPrior.rademacher(k), alpha=alpha)
    problem = SeProblem(model=model, prior_u=prior_u, prior_w=prior_w, Lambda=lambdas)
    return lambdas, r, k, alpha, prior_u, prior_w, model, problem


def _dataset(model_params, lambdas, prior_u, prior_w, seed):
    d = int(model_params["d"])
    n = int(round(float(model_params["alpha"]) * d))
    return sample_spiked(n, d, prior_u, prior_w, lambdas, seed)


# --- per-seed pipelines --------------------------------------------------------


def _run_amp_vs_se(config: ExperimentConfig, seed: int):
    lambdas, r, k, alpha, pu, pw, model, problem = _build(config.model)
    algo = config.algorithm
    data = _dataset(config.model, lambdas, pu, pw, seed)
    amp = amp_run(data, model, AmpConfig(damping=algo["damping"],
                                         max_iters=algo["max_iters"],
                                         tol_conv=algo["tol_conv"],
                                         init="informed",
                                         init_overlap=algo["init_overlap"],
                                         seed=seed))
    trace = se_run(problem, se_init(problem, m0=algo["init_overlap"]),
                   GaussHermiteEngine(), T=amp.n_iters, tol=0.0,
                   zeta=algo["se_zeta"])
    T = amp.n_iters
    se_ov = trace.overlaps[:T]
    gap = float(np.max(np.abs(amp.overlaps - se_ov)))
    rows = []
    for t in range(T):
        row = {"t": t + 1}
        for i in range(k):
            for j in range(r):
                row[f"overlap_emp_{i}{j}"] = amp.overlaps[t, i, j]
                row[f"overlap_se_{i}{j}"] = se_ov[t, i, j]
        row["residual"] = amp.residuals[t]
        row["objective"] = amp.objectives[t]
        rows.append(row)
    metrics = {"max_gap": gap, "stationarity": amp.stationarity,
               "iters": amp.n_iters, "converged": bool(amp.converged)}
    return rows, metrics


def _run_gd_vs_dmft(config: ExperimentConfig, seed: int):
    lambdas, r, k, alpha, pu, pw, model, problem = _build(config.model)
    algo = config.algorithm
    data = _dataset(config.model, lambdas, pu, pw, seed)
    cfg = GdConfig(learning_rate=algo["learning_rate"], steps=algo["steps"],
                   init="informed", init_overlap=algo["init_overlap"],
                   init_scale=algo["init_scale"], seed=seed)
    gd = gd_run(data, model, cfg)
    dm = dmft_predict(problem, kappa=algo["learning_rate"], steps=algo["steps"],
                      n_samples=algo["dmft_samples"], seed=seed,
                      init_overlap=algo["init_overlap"],
                      init_scale=algo["init_scale"])
    gap = float(np.max(np.abs(gd.overlaps - dm.overlaps)))
    rows = []
    for t in range(algo["steps"] + 1):
        row = {"t": t}
        for i in range(k):
            for j in range(r):
                row[f"overlap_gd_{i}{j}"] = gd.overlaps[t, i, j]
                row[f"overlap_dmft_{i}{j}"] = dm.overlaps[t, i, j]
        rows.append(row)
    return rows, {"max_gap": gap, "psd_repairs": dm.psd_repairs}


def _tiny_init_growth(alpha: float, lam: float, nodes: int = 400) -> float:
    """Per-sweep growth of the signal-to-noise invariant M^2/Sigma from a
    doubly small start; equals the linearized gain alpha*lam^4 while the
    state is small, so its crossing of 1 locates the recovery threshold."""
    pu1, pw1 = SpikePrior.rademacher(1), SpikePrior.rademacher(1)
    model1 = EffectiveModel(hidden_prior=HiddenPrior.rademacher(1), alpha=alpha)
    prob = SeProblem(model=model1, prior_u=pu1, prior_w=pw1, Lambda=np.array([lam]))
    trace = se_run(prob, se_init(prob, m0=1e-7, sigma0=1e-4),
                   GaussHermiteEngine(nodes=nodes), T=3, tol=0.0)
    S = [s.M[0, 0] ** 2 / s.Sigma[0, 0] for s in trace.states[:3]]
    return float(np.sqrt(S[2] / S[0]))


def _se_branch_overlap(alpha: float, lam: float):
    """Informed-branch fixed point overlap, or None where the damped sweep
    fails to settle (the replicon-unstable window near the threshold)."""
    pu1, pw1 = SpikePrior.rademacher(1), SpikePrior.rademacher(1)
    model1 = EffectiveModel(hidden_prior=HiddenPrior.rademacher(1), alpha=alpha)
    prob = SeProblem(model=model1, prior_u=pu1, prior_w=pw1, Lambda=np.array([lam]))
    try:
        trace = se_fixed_point(prob, GaussHermiteEngine(), m0=2.0, T=3000)
    except SolverError:
        return None
    return float(se_overlap(prob, trace.final)[0, 0])


def _run_snr_sweep(config: ExperimentConfig, seed: int):
    _, _, _, alpha, _, _, _, _ = _build(config.model)
    algo = config.algorithm
    grid = np.linspace(algo["lambda_min"], algo["lambda_max"], algo["points"])
    rows = []
    onset = None
    for lam in grid:
        growth = _tiny_init_growth(alpha, float(lam))
        ov = _se_branch_overlap(alpha, float(lam))
        rows.append({"lambda": lam, "growth": growth,
                     "overlap_se": np.nan if ov is None else ov})
        if onset is None and growth > 1.0:
            onset = float(lam)
    metrics = {"onset_lambda": onset, "bbp": bbp_threshold(alpha),
               "onset_rel_error": (None if onset is None
                                   else abs(onset - bbp_threshold(alpha))
                                   / bbp_threshold(alpha))}
    return rows, metrics


def _run_threshold_bracket(config: ExperimentConfig, seed: int):
    _, _, _, alpha, _, _, _, _ = _build(config.model)
    algo = config.algorithm

    def grows(lam):
        return _tiny_init_growth(alpha, lam) > 1.0

    lo, hi = 0.5 * bbp_threshold(alpha), 2.0 * bbp_threshold(alpha)
    if grows(lo) or not grows(hi):
        raise ValidationError("threshold bracket endpoints are not separating")
    while (hi - lo) / hi > algo["rel_width"]:
        mid = 0.5 * (lo + hi)
        if grows(mid):
            hi = mid
        else:
            lo = mid
    rows = [{"lambda_lo": lo, "lambda_hi": hi}]
    return rows, {"bracket_lo": lo, "bracket_hi": hi, "bbp": bbp_threshold(alpha),
                  "contains_bbp": bool(lo <= bbp_threshold(alpha) <= hi)}


def _run_gordon_rank1(config: ExperimentConfig, seed: int):
    lambdas, r, k, alpha, pu, pw, model, problem = _build(config.model)
    algo = config.algorithm
    pu1, pw1 = SpikePrior.rademacher(1), SpikePrior.rademacher(1)
    model1 = EffectiveModel(hidden_prior=HiddenPrior.rademacher(1), alpha=alpha)
    pair = gordon.rbm_pair(alpha)
    rows = []
    for lam in np.atleast_1d(lambdas):
        prob = SeProblem(model=model1, prior_u=pu1, prior_w=pw1,
                         Lambda=np.array([lam]))
        fp = k1_summary(prob, se_fixed_point(prob, GaussHermiteEngine(), m0=2.0).final)
        init = gordon.warm_start_from_se(fp["m"], fp["sigma"], fp["omega"], alpha)
        point, info = gordon.solve_saddle(pair, alpha, lam, pu1, pw1, init=init,
                                          tol=algo["tol"], gh=algo["gh_nodes"])
        stab = gordon.replicon_stability(point, pair, alpha, lam, pu1, pw1,
                                         gh=algo["gh_nodes"])
        rows.append({"lambda": float(lam), "overlap_se": fp["overlap"],
                     "overlap_saddle": point.overlap(pw1.second_moment()),
                     "gap": abs(fp["overlap"] - point.overlap()),
                     "replicon": stab,
                     "potential": gordon.potential(point, pair, alpha, lam, pu1, pw1),
                     "max_residual": float(np.max(np.abs(info["residuals"])))})
    worst = max(row["gap"] for row in rows)
    return rows, {"max_gap": worst,
                  "max_replicon": max(row["replicon"] for row in rows)}


def _run_baselines(config: ExperimentConfig, seed: int):
    lambdas, r, k, alpha, pu, pw, model, problem = _build(config.model)
    algo = config.algorithm
    data = _dataset(config.model, lambdas, pu, pw, seed)
    V = baselines.svd_baseline(data, k)
    zeta = baselines.overlap_matrix(V, data.W_star)
    svd_matched = baselines.matched_overlap(zeta)
    theory = (baselines.svd_theory_overlap_degenerate_r2(alpha, float(lambdas[0]))
              if (r == 2 and np.allclose(lambdas, lambdas[0])) else None)
    gd = gd_run(data, model, GdConfig(learning_rate=algo["gd_learning_rate"],
                                      steps=algo["gd_steps"], init="informed",
                                      init_overlap=algo["gd_init_overlap"],
                                      seed=seed))
    gd_matched = baselines.matched_overlap(gd.overlaps[-1])
    cd = baselines.cd_train(data, k, learning_rate=algo["cd_learning_rate"],
                            epochs=algo["cd_epochs"], batch_size=algo["cd_batch"],
                            seed=seed)
    rows = [{"svd_matched": svd_matched,
             "svd_theory": np.nan if theory is None else theory,
             "gd_matched": gd_matched, "cd_matched": float(cd.matched[-1])}]
    return rows, {"svd_matched": svd_matched, "svd_theory": theory,
                  "gd_matched": gd_matched, "cd_matched": float(cd.matched[-1]),
                  "cd_gd_gap": abs(gd_matched - float(cd.matched[-1]))}


_PIPELINES = {"amp_vs_se": _run_amp_vs_se, "gd_vs_dmft": _run_gd_vs_dmft,
              "snr_sweep": _run_snr_sweep, "threshold_bracket": _run_threshold_bracket,
              "gordon_rank1": _run_gordon_rank1, "baselines": _run_baselines}


# --- output plumbing -------------------------------------------------------------


def _atomic_write(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _rows_to_csv(rows) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return "nan"
    return repr(float(v))


def _seed_job(args):
    config, seed = args
    return seed, _PIPELINES[config.kind](config, seed)


def run_experiment(config: ExperimentConfig, out_dir: str, threads: int = 1,
                   quiet: bool = False) -> dict:
    """Execute the configured pipeline for every seed and write the bundle.

    Seeds are independent jobs; with threads > 1 they run in separate
    processes (each pinned to one BLAS thread), which leaves every per-seed
    output byte-identical to a single-threaded run.
    """
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(config, seed) for seed in config.seeds]
    results = {}
    try:
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for seed, payload in pool.map(_seed_job, jobs):
                    results[seed] = payload
        else:
            for job in jobs:
                seed, payload = _seed_job(job)
                results[seed] = payload
    except Exception:
        _atomic_write(os.path.join(out_dir, "FAILED"),
                      f"experiment {config.kind} failed; partial outputs retained\n")
        for seed, (rows, _) in results.items():
            _atomic_write(os.path.join(out_dir, f"{config.kind}_seed{seed}.csv"),
                          _rows_to_csv(rows))
        raise

    metric_names = sorted({k for _, m in results.values() for k in m
                           if isinstance(m[k], (int, float, np.floating)) and m[k] is not None})
    summary = {
        "kind": config.kind,
        "config_hash": config.content_hash(),
        "seeds": list(config.seeds),
        "per_seed": {str(s): _jsonable(m) for s, (_, m) in results.items()},
        "median": {name: float(np.median([results[s][1][name] for s in config.seeds
                                          if results[s][1].get(name) is not None]))
                   for name in metric_names},
        "wall_clock_sec": time.time() - t0,
    }
    for seed, (rows, _) in results.items():
        _atomic_write(os.path.join(out_dir, f"{config.kind}_seed{seed}.csv"),
                      _rows_to_csv(rows))
    _atomic_write(os.path.join(out_dir, "summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not quiet:
        print(f"{config.kind}: {len(config.seeds)} seed(s) -> {out_dir} "
              f"({summary['wall_clock_sec']:.1f}s)")
    return summary


SWEEPABLE = {"lambda", "d", "alpha"}


def sweep(config: ExperimentConfig, axis: str, values, out_dir: str,
          threads: int = 1, quiet: bool = False) -> dict:
    """Re-run the configured pipeline along one numeric axis.

    Emits a long-format CSV with one row per (value, seed, metric).
    """
    if axis not in SWEEPABLE:
        raise ValidationError(f"axis {axis!r} is not sweepable (allowed: {sorted(SWEEPABLE)})")
    values = [float(v) for v in values]
    if len(set(values)) != len(values):
        raise ValidationError("sweep values contain duplicates")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in values:
        model = dict(config.model)
        if axis == "lambda":
            reps = len(str(model["lambdas"]).split(","))
            model["lambdas"] = ",".join([repr(value)] * reps)
        elif axis == "d":
            model["d"] = int(value)
        else:
            model["alpha"] = value
        sub = ExperimentConfig(kind=config.kind, seeds=config.seeds, model=model,
                               algorithm=config.algorithm,
                               raw_text=config.raw_text + f"\n# sweep {axis}={value}")
        for seed in config.seeds:
            _, metrics = _PIPELINES[sub.kind](sub, seed)
            for name, val in metrics.items():
                if isinstance(val, (int, float, np.floating)) and val is not None:
                    rows.append({"value": value, "seed": seed, "metric": name,
                                 "metric_value": float(val)})
    _atomic_write(os.path.join(out_dir, f"sweep_{axis}.csv"), _rows_to_csv(rows))
    if not quiet:
        print(f"sweep over {axis}: {len(values)} values -> {out_dir}")
    return {"rows": len(rows), "axis": axis}


def _jsonable(metrics: dict) -> dict:
    out = {}
    for key, val in metrics.items():
        if isinstance(val, (np.floating, np.integer)):
            out[key] = float(val)
        else:
            out[key] = val
    return out
