"""Experiment configuration, seeded replication, and output serialization.

A config document (YAML/JSON) picks a task, a solver, a conditioning scheme,
and the replication plan. Validation is strict: unknown keys are rejected and
every defaulted value is materialized into the config echo written next to
the run outputs, so each run directory is a complete audit trail.
"""

import csv
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from jsonschema import Draft202012Validator

from . import baselines, cartpole, conditioning, diffusion, tasks
from .errors import ConfigError, UsageError
from .evolution import EvoConfig, run_evolution

CSV_COLUMNS = ("generation", "f_max", "f_mean", "f_std", "entropy_bits",
               "peaks_cum", "condition_target", "condition_mean")

TASK_DEFAULTS = {
    "double_peak": {"sigma": 0.1, "omega": 0.0, "phi": 0.0},
    "rastrigin": {"amplitude": 10.0, "bound": 4.0, "twist": 0.0},
    "cartpole": {
        "agent": {"kind": "rnn", "hidden_layers": 1, "hidden_units": 8},
        "episodes": 16, "max_steps": 500, "resting_window": 100,
    },
}

DM_SOLVER_DEFAULTS = {
    "N_p": 256, "sigma_I": 1.0, "N_B_ratio": 1.0, "N_e_ratio": 0.15,
    "N_c_ratio": 0.0, "N_mu_ratio": 0.0, "t_mu_over_T": 0.0, "t_a": 0,
    "s": 10.0, "weight_mode": "w_N", "retrain_mode": "warm_start",
    "denoiser": {"hidden_layers": 3, "hidden_units": 24,
                 "activation": "leaky_relu", "time_features": 1},
    "diffusion": {"steps": 100, "sigma_rule": "paper_default"},
    "train": {"lr": 1e-3, "epochs": 100, "batch_size": 256,
              "weight_decay": 1e-5},
    "guidance": {"guidance_weight": 0.0, "cond_dropout_prob": 0.1},
}

SOLVER_DEFAULTS = {
    "hades": DM_SOLVER_DEFAULTS,
    "charles": DM_SOLVER_DEFAULTS,
    "simplega": {"N_p": 256, "sigma_I": 1.0, "elite_frac": 0.1,
                 "sigma_m": 0.1, "elitism": True},
    "cmaes": {"N_p": 256, "sigma_I": 1.0},
}

CONDITION_DEFAULTS = {
    "none": {},
    "quadrant": {},
    "fitness_fisher": {},
    "fitness_greedy": {},
    "novelty": {"k": 128, "beta": 10.0, "pad": 1e-8},
    "phenotype_cartpole": {"target_position": 0.0, "target_velocity": 0.0,
                           "target_fitness": 500.0},
    "composite": {},
}

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}

_SEGMENT_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["from", "to", "target"],
    "properties": {"from": _posint, "to": _posint,
                   "target": {"type": ["number", "array"],
                              "items": _num}},
}

_CONDITION_PROPS = {
    "none": {},
    "quadrant": {"target": _num, "schedule": {"type": "array", "minItems": 1,
                                              "items": _SEGMENT_SCHEMA}},
    "fitness_fisher": {},
    "fitness_greedy": {},
    "novelty": {"k": _posint, "beta": _num, "pad": _num},
    "phenotype_cartpole": {"target_position": _num, "target_velocity": _num,
                           "target_fitness": _num},
}
_CONDITION_PROPS["composite"] = {
    "parts": {"type": "array", "minItems": 1,
              "items": {"type": "object"}},
}

_TASK_PROPS = {
    "double_peak": {"sigma": _num, "omega": _num, "phi": _num},
    "rastrigin": {"amplitude": _num, "bound": _num, "twist": _num},
    "cartpole": {
        "agent": {"type": "object", "additionalProperties": False,
                  "properties": {"kind": {"enum": ["ff", "rnn"]},
                                 "hidden_layers": _posint,
                                 "hidden_units": _posint}},
        "episodes": _posint, "max_steps": _posint, "resting_window": _posint,
    },
}

_DM_SOLVER_PROPS = {
    "N_p": _posint, "sigma_I": _num, "N_B_ratio": _num, "N_e_ratio": _num,
    "N_c_ratio": _num, "N_mu_ratio": _num, "t_mu_over_T": _num, "t_a": _int,
    "s": _num, "weight_mode": {"enum": ["w_N", "w_f"]},
    "retrain_mode": {"enum": ["warm_start", "reinit"]},
    "denoiser": {"type": "object", "additionalProperties": False,
                 "properties": {"hidden_layers": _posint,
                                "hidden_units": _posint,
                                "activation": {"enum": ["relu", "leaky_relu",
                                                        "elu"]},
                                "time_features": _posint}},
    "diffusion": {"type": "object", "additionalProperties": False,
                  "properties": {"steps": {"type": "integer", "minimum": 2},
                                 "sigma_rule": {"enum": ["paper_default",
                                                         "deterministic"]}}},
    "train": {"type": "object", "additionalProperties": False,
              "properties": {"lr": _num, "epochs": _int,
                             "batch_size": _posint, "weight_decay": _num}},
    "guidance": {"type": "object", "additionalProperties": False,
                 "properties": {"guidance_weight": _num,
                                "cond_dropout_prob": _num}},
}

_SOLVER_PROPS = {
    "hades": _DM_SOLVER_PROPS,
    "charles": _DM_SOLVER_PROPS,
    "simplega": {"N_p": _posint, "sigma_I": _num, "elite_frac": _num,
                 "sigma_m": _num, "elitism": {"type": "boolean"}},
    "cmaes": {"N_p": _posint, "sigma_I": _num},
}

_TOP_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["name", "task", "solver", "generations"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "task": {"type": "object"},
        "solver": {"type": "object"},
        "condition": {"type": "object"},
        "generations": _int,
        "replicates": _posint,
        "seed": {"type": "integer"},
        "solve_threshold": {"type": ["number", "null"]},
        "stop_on_solve": {"type": "boolean"},
        "out_dir": {"type": ["string", "null"]},
    },
}


def _kinded_schema(props):
    return {"type": "object", "additionalProperties": False,
            "required": ["kind"],
            "properties": {"kind": {"type": "string"}, **props}}


def _validate(doc, schema, where):
    validator = Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        path = where + "".join(f"[{p!r}]" for p in err.path)
        raise ConfigError(f"{path}: {err.message}", path=path)


def _merge_defaults(doc, defaults):
    out = dict(defaults)
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(value, out[key])
        else:
            out[key] = value
    return out


def _check_kind(section, kinds, where):
    kind = section.get("kind")
    if kind not in kinds:
        raise ConfigError(f"{where}['kind']: must be one of {sorted(kinds)}, "
                          f"got {kind!r}", path=f"{where}['kind']")
    return kind


def normalize_config(doc):
    """Validate a raw config document and materialize every default."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping", path="")
    _validate(doc, _TOP_SCHEMA, "config")

    task_kind = _check_kind(doc["task"], TASK_DEFAULTS, "config['task']")
    _validate(doc["task"], _kinded_schema(_TASK_PROPS[task_kind]),
              "config['task']")
    task = _merge_defaults(doc["task"], {"kind": task_kind,
                                         **TASK_DEFAULTS[task_kind]})

    solver_kind = _check_kind(doc["solver"], SOLVER_DEFAULTS, "config['solver']")
    _validate(doc["solver"], _kinded_schema(_SOLVER_PROPS[solver_kind]),
              "config['solver']")
    solver = _merge_defaults(doc["solver"], {"kind": solver_kind,
                                             **SOLVER_DEFAULTS[solver_kind]})

    condition = doc.get("condition", {"kind": "none"})
    condition = _normalize_condition(condition, "config['condition']")
    if solver_kind == "hades" and condition["kind"] != "none":
        raise ConfigError("hades runs are unconditional; use solver kind "
                          "'charles' for conditioning", path="config['solver']")
    if solver_kind == "charles" and condition["kind"] == "none":
        raise ConfigError("charles needs a condition scheme",
                          path="config['condition']")

    return {
        "name": doc["name"],
        "description": doc.get("description", ""),
        "task": task,
        "solver": solver,
        "condition": condition,
        "generations": doc["generations"],
        "replicates": doc.get("replicates", 1),
        "seed": doc.get("seed", 0),
        "solve_threshold": doc.get("solve_threshold"),
        "stop_on_solve": doc.get("stop_on_solve", False),
        "out_dir": doc.get("out_dir"),
    }


def _normalize_condition(section, where):
    kind = _check_kind(section, CONDITION_DEFAULTS, where)
    _validate(section, _kinded_schema(_CONDITION_PROPS[kind]), where)
    merged = _merge_defaults(section, {"kind": kind,
                                       **CONDITION_DEFAULTS[kind]})
    if kind == "quadrant":
        if ("target" in merged) == ("schedule" in merged):
            raise ConfigError(f"{where}: quadrant conditioning needs exactly "
                              "one of 'target' or 'schedule'", path=where)
    if kind == "composite":
        merged["parts"] = [_normalize_condition(p, f"{where}['parts'][{i}]")
                           for i, p in enumerate(section.get("parts", []))]
    return merged


def build_task(task_doc):
    kind = task_doc["kind"]
    if kind == "double_peak":
        return tasks.DoublePeakTask(tasks.DoublePeakParams(
            sigma=task_doc["sigma"], omega=task_doc["omega"],
            phi=task_doc["phi"]))
    if kind == "rastrigin":
        return tasks.RastriginTask(tasks.RastriginParams(
            amplitude=task_doc["amplitude"], bound=task_doc["bound"],
            twist=task_doc["twist"]))
    if kind == "cartpole":
        agent = task_doc["agent"]
        spec = cartpole.agent_spec(agent["kind"], agent["hidden_layers"],
                                   agent["hidden_units"])
        params = cartpole.CartPoleParams(
            max_steps=task_doc["max_steps"],
            resting_window=task_doc["resting_window"],
            episodes=task_doc["episodes"])
        return cartpole.CartPoleTask(spec, params)
    raise ConfigError(f"unknown task kind {kind!r}", path="task.kind")


def build_scheme(cond_doc):
    kind = cond_doc["kind"]
    if kind == "none":
        return conditioning.ConditionScheme()
    if kind == "quadrant":
        if "schedule" in cond_doc:
            segments = tuple(
                (seg["from"], seg["to"],
                 seg["target"] if isinstance(seg["target"], list)
                 else [seg["target"]])
                for seg in cond_doc["schedule"])
            return conditioning.QuadrantScheme(
                schedule=conditioning.ConditionSchedule(segments))
        return conditioning.QuadrantScheme(target=cond_doc["target"])
    if kind == "fitness_fisher":
        return conditioning.FitnessScheme("fisher")
    if kind == "fitness_greedy":
        return conditioning.FitnessScheme("greedy")
    if kind == "novelty":
        return conditioning.NoveltyScheme(k=cond_doc["k"], beta=cond_doc["beta"],
                                          pad=cond_doc["pad"])
    if kind == "phenotype_cartpole":
        return conditioning.PhenotypeCartpoleScheme(
            cond_doc["target_position"], cond_doc["target_velocity"],
            cond_doc["target_fitness"])
    if kind == "composite":
        return conditioning.CompositeScheme(
            [build_scheme(p) for p in cond_doc["parts"]])
    raise ConfigError(f"unknown condition kind {kind!r}", path="condition.kind")


def build_evo_config(solver_doc) -> EvoConfig:
    d = solver_doc
    return EvoConfig(
        N_p=d["N_p"], sigma_I=d["sigma_I"], N_B_ratio=d["N_B_ratio"],
        N_e_ratio=d["N_e_ratio"], N_c_ratio=d["N_c_ratio"],
        N_mu_ratio=d["N_mu_ratio"], t_mu_over_T=d["t_mu_over_T"], t_a=d["t_a"],
        s=d["s"], weight_mode=d["weight_mode"], retrain_mode=d["retrain_mode"],
        hidden_layers=d["denoiser"]["hidden_layers"],
        hidden_units=d["denoiser"]["hidden_units"],
        activation=d["denoiser"]["activation"],
        time_features=d["denoiser"]["time_features"],
        steps=d["diffusion"]["steps"], sigma_rule=d["diffusion"]["sigma_rule"],
        lr=d["train"]["lr"], epochs=d["train"]["epochs"],
        batch_size=d["train"]["batch_size"],
        weight_decay=d["train"]["weight_decay"],
        guidance_weight=d["guidance"]["guidance_weight"],
        cond_dropout_prob=d["guidance"]["cond_dropout_prob"])


def run_replicate(config, replicate_index):
    """One seeded run; returns (history, seed)."""
    seed = config["seed"] + replicate_index
    task = build_task(config["task"])
    kind = config["solver"]["kind"]
    common = dict(solve_threshold=config["solve_threshold"],
                  stop_on_solve=config["stop_on_solve"])
    if kind in ("hades", "charles"):
        scheme = build_scheme(config["condition"])
        cfg = build_evo_config(config["solver"])
        history = run_evolution(cfg, task, scheme, config["generations"], seed,
                                **common)
    elif kind == "simplega":
        d = config["solver"]
        cfg = baselines.SimpleGaConfig(d["N_p"], d["sigma_I"], d["elite_frac"],
                                       d["sigma_m"], d["elitism"])
        history = baselines.run_simplega(cfg, task, config["generations"], seed,
                                         **common)
    elif kind == "cmaes":
        d = config["solver"]
        cfg = baselines.CmaConfig(d["N_p"], d["sigma_I"])
        history = baselines.run_cmaes(cfg, task, config["generations"], seed,
                                      **common)
    else:
        raise ConfigError(f"unknown solver kind {kind!r}", path="solver.kind")
    return history, seed


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (np.ndarray, list, tuple)):
        return ";".join(repr(float(v)) for v in np.atleast_1d(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                str(r.generation), _fmt(r.f_max), _fmt(r.f_mean), _fmt(r.f_std),
                _fmt(r.entropy_bits), _fmt(r.peaks_cum),
                _fmt(r.condition_target), _fmt(r.condition_mean),
            ])


def _replicate_job(config, out_dir, replicate_index):
    history, seed = run_replicate(config, replicate_index)
    stem = Path(out_dir) / f"rep{replicate_index:03d}"
    write_records_csv(history.records, stem.with_suffix(".csv"))
    if history.final_model is not None:
        diffusion.save_denoiser(
            history.final_model, history.noise_schedule,
            f"{stem}_model.json", sigma_init=config["solver"]["sigma_I"],
            extra={"config_name": config["name"], "seed": seed})
    return str(stem.with_suffix(".csv"))


def run_experiment(config, out_dir=None, replicates=None, base_seed=None,
                   workers=1):
    """Run all replicates, writing CSVs, model snapshots, and the config echo.

    Replicate r uses seed = base seed + r. A failing replicate is recorded and
    the others continue. Returns a dict with paths and per-replicate status.
    """
    config = dict(config)
    if replicates is not None:
        config["replicates"] = replicates
    if base_seed is not None:
        config["seed"] = base_seed
    if out_dir is not None:
        config["out_dir"] = str(out_dir)
    if config.get("out_dir") in (None, ""):
        config["out_dir"] = str(Path("runs") / config["name"])

    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo_path = out / "config_echo.json"
    with open(echo_path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")

    n = config["replicates"]
    results = {"out_dir": str(out), "config_echo": str(echo_path),
               "replicates": [], "failures": []}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {r: pool.submit(_replicate_job, config, str(out), r)
                       for r in range(n)}
            for r, fut in futures.items():
                try:
                    results["replicates"].append(fut.result())
                except Exception:
                    results["failures"].append((r, traceback.format_exc()))
    else:
        for r in range(n):
            try:
                results["replicates"].append(_replicate_job(config, str(out), r))
            except Exception:
                results["failures"].append((r, traceback.format_exc()))
    return results


def _parse_cell(text):
    if text == "":
        return None
    if ";" in text:
        return np.array([float(v) for v in text.split(";")])
    return float(text)


def read_records_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise UsageError(f"{path}: unexpected CSV columns {header}")
        for raw in reader:
            rows.append({k: (int(raw[0]) if k == "generation"
                             else _parse_cell(v))
                         for k, v in zip(CSV_COLUMNS, raw)})
    return rows


TASK_PEAK_COUNTS = {"double_peak": 2, "rastrigin": 4}


def aggregate(run_dir):
    """Summarize a run directory into summary.csv and summary.json.

    Per-generation mean and std across replicates (population convention, so
    a single replicate gives std 0), the peaks-found distribution, and
    time-to-solve when the config declares a solve threshold.
    """
    run_dir = Path(run_dir)
    echo_path = run_dir / "config_echo.json"
    if not echo_path.exists():
        raise UsageError(f"{run_dir} has no config_echo.json")
    config = json.loads(echo_path.read_text())
    rep_paths = sorted(run_dir.glob("rep*.csv"))
    if not rep_paths:
        raise UsageError(f"{run_dir} has no replicate CSVs")

    reps = [read_records_csv(p) for p in rep_paths]
    threshold = config.get("solve_threshold")

    by_gen = {}
    for rows in reps:
        for row in rows:
            by_gen.setdefault(row["generation"], []).append(row)

    summary_rows = []
    for gen in sorted(by_gen):
        rows = by_gen[gen]
        def col(name):
            vals = [r[name] for r in rows if r[name] is not None]
            return np.array(vals) if vals else None
        entry = {"generation": gen, "n": len(rows)}
        for name in ("f_max", "f_mean", "entropy_bits", "peaks_cum"):
            vals = col(name)
            entry[f"{name}_mean"] = float(vals.mean()) if vals is not None else None
            entry[f"{name}_std"] = float(vals.std()) if vals is not None else None
        summary_rows.append(entry)

    csv_path = run_dir / "summary.csv"
    fields = ["generation", "n", "f_max_mean", "f_max_std", "f_mean_mean",
              "f_mean_std", "entropy_bits_mean", "entropy_bits_std",
              "peaks_cum_mean", "peaks_cum_std"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for entry in summary_rows:
            writer.writerow([_fmt(entry.get(f)) if entry.get(f) is not None
                             else "" for f in fields])

    per_rep = []
    for path, rows in zip(rep_paths, reps):
        final = rows[-1]
        rep_info = {
            "csv": path.name,
            "generations": final["generation"],
            "final_f_max": final["f_max"],
            "best_f_max": max(r["f_max"] for r in rows),
            "final_peaks_cum": final["peaks_cum"],
        }
        if threshold is not None:
            solved = [r["generation"] for r in rows
                      if r["f_max"] is not None and r["f_max"] >= threshold]
            rep_info["time_to_solve"] = solved[0] if solved else None
        per_rep.append(rep_info)

    doc = {"config_name": config["name"], "replicates": len(reps),
           "per_replicate": per_rep}
    n_peaks = TASK_PEAK_COUNTS.get(config["task"]["kind"])
    if n_peaks is not None and any(r["final_peaks_cum"] is not None
                                   for r in per_rep):
        finals = [r["final_peaks_cum"] or 0 for r in per_rep]
        doc["peaks"] = {
            "task_peaks": n_peaks,
            "final_counts": finals,
            "mean_final": float(np.mean(finals)),
            "fraction_all_found": float(np.mean(
                [c >= n_peaks for c in finals])),
        }
    if threshold is not None:
        times = [r["time_to_solve"] for r in per_rep]
        solved = [t for t in times if t is not None]
        doc["time_to_solve"] = {
            "threshold": threshold,
            "per_replicate": times,
            "solved_fraction": len(solved) / len(times),
            "median_solved": float(np.median(solved)) if solved else None,
        }
    json_path = run_dir / "summary.json"
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def recipe_names():
    root = resources.files("hades") / "recipes"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_recipe(name):
    path = resources.files("hades") / "recipes" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown recipe {name!r}; available: "
                          f"{', '.join(recipe_names())}", path="recipe")
    return normalize_config(yaml.safe_load(path.read_text()))


def load_config(path_or_name):
    """Load a config from a file path, or fall back to a shipped recipe name."""
    p = Path(path_or_name)
    if p.exists():
        with open(p) as fh:
            doc = yaml.safe_load(fh)
        return normalize_config(doc)
    return load_recipe(str(path_or_name))
