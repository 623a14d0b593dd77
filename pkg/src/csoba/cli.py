"""Command line runner: ``run``, ``grid`` and ``compare``.

Configs are YAML documents::

    problem: {kind: quadratic, n: 10, d_x: 50, d_y: 10, sigma: 0.1, seed: 7}
    algos:
      - {label: nc, algo: NcSoba, alpha: 0.1, beta: 0.1, gamma: 0.1}
      - {label: c, algo: CSoba, alpha: 0.1, beta: 0.1, gamma: 0.1, budget_fraction: 0.1}
    rounds: 2000
    seeds: [0, 1]
    output_dir: out
    sweep: {axis: workers, values: [1, 2, 4, 8]}      # optional
    grid: {alpha: [0.01, 0.1], rounds: 200}           # optional, used by `grid`
    message_log: true                                 # optional, <stem>.msg.bin per run

Exit codes: 0 ok, 2 invalid config or input, 3 divergence, 4 search failure.
"""

import argparse
import glob
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from sklearn.model_selection import ParameterGrid

from .algorithms import DEFAULT_STEPSIZE_GRID, AlgoConfig, run
from .compressors import CompressorSpec, Kind, recommended_k_pair
from .exceptions import (
    ConfigError,
    DivergenceError,
    InfeasibleError,
    InputError,
    InvalidSpecError,
    SearchFailure,
)
from .metrics import averaged_stationarity, first_hit, read_csv, write_csv
from .problems import QuadraticBilevelSpec, make_logistic_hpo, make_quadratic
from .simnet import dump_log

OUTPUT_ROOT_ENV = "CSOBA_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SEARCH = 0, 2, 3, 4
SWEEP_AXES = ("workers", "k_upper", "k_lower", "R", "hetero")
_ALGO_FIELDS = {"label", "algo", "alpha", "beta", "gamma", "theta", "rho", "delta_u", "delta_l",
                "R", "upper_comp", "lower_comp", "budget", "budget_fraction"}
_TOP_FIELDS = {"problem", "algos", "rounds", "seeds", "output_dir", "sweep", "grid", "record_every",
               "message_log"}
_LOGISTIC_FIELDS = {"n", "p", "samples", "noise", "seed", "batch_size", "rho"}


@dataclass
class AlgoBlock:
    label: str
    config: AlgoConfig
    budget: int = None  # total rand-K coordinates, split by recommended_k_pair


@dataclass
class ExperimentConfig:
    problem: dict
    algos: list
    rounds: int
    seeds: list
    output_dir: str
    sweep: dict = None
    grid: dict = None
    record_every: int = 1
    message_log: bool = False
    source: dict = field(default_factory=dict, repr=False)

    def output_path(self):
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            out = Path(root) / (out.name if out.is_absolute() else out)
        return out


def _field_of(message, prefix, names):
    head = str(message).split(" ", 1)[0].rstrip(":")
    return f"{prefix}.{head}" if head in names else prefix


def _require_int(value, path, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(path, f"expected an integer >= {minimum}, got {value!r}")
    return value


def _validate_problem(block):
    if not isinstance(block, dict):
        raise ConfigError("problem", "must be a mapping")
    block = dict(block)
    kind = block.pop("kind", None)
    if kind == "quadratic":
        names = {f.name for f in fields(QuadraticBilevelSpec)}
        unknown = set(block) - names
        if unknown:
            raise ConfigError(f"problem.{sorted(unknown)[0]}", "unknown field")
        try:
            QuadraticBilevelSpec(**block)
        except InvalidSpecError as exc:
            raise ConfigError(_field_of(exc, "problem", names), str(exc)) from None
    elif kind == "logistic":
        unknown = set(block) - _LOGISTIC_FIELDS
        if unknown:
            raise ConfigError(f"problem.{sorted(unknown)[0]}", "unknown field")
    else:
        raise ConfigError("problem.kind", f"expected 'quadratic' or 'logistic', got {kind!r}")
    return {"kind": kind, **block}


def build_problem(block):
    block = dict(block)
    kind = block.pop("kind")
    try:
        if kind == "quadratic":
            return make_quadratic(QuadraticBilevelSpec(**block))
        return make_logistic_hpo(**block)
    except (InvalidSpecError, TypeError) as exc:
        raise ConfigError("problem", str(exc)) from None


def _problem_dims(block):
    if block["kind"] == "quadratic":
        spec = QuadraticBilevelSpec(**{k: v for k, v in block.items() if k != "kind"})
        return spec.d_x, spec.d_y
    p = block.get("p", 100)
    return p, p


def _validate_algo(i, block, dims):
    path = f"algos[{i}]"
    if not isinstance(block, dict):
        raise ConfigError(path, "must be a mapping")
    unknown = set(block) - _ALGO_FIELDS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    for key in ("label", "algo", "alpha", "beta", "gamma"):
        if key not in block:
            raise ConfigError(f"{path}.{key}", "missing")
    label = block["label"]
    if not isinstance(label, str) or not label or any(c in label for c in "/\\ "):
        raise ConfigError(f"{path}.label", f"must be a plain non-empty string, got {label!r}")
    kw = {k: v for k, v in block.items() if k not in ("label", "budget", "budget_fraction")}
    for comp in ("upper_comp", "lower_comp"):
        if comp in kw:
            try:
                kw[comp] = CompressorSpec.from_dict(kw[comp])
            except (InvalidSpecError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{comp}", str(exc)) from None
    budget = None
    if "budget" in block and "budget_fraction" in block:
        raise ConfigError(f"{path}.budget", "give budget or budget_fraction, not both")
    if "budget_fraction" in block:
        frac = block["budget_fraction"]
        if not isinstance(frac, (int, float)) or not 0 < frac <= 1:
            raise ConfigError(f"{path}.budget_fraction", f"must be in (0, 1], got {frac!r}")
        budget = max(2, int(round(frac * (dims[0] + dims[1]))))
    elif "budget" in block:
        budget = _require_int(block["budget"], f"{path}.budget", minimum=2)
    if budget is not None:
        for comp in ("upper_comp", "lower_comp"):
            if comp in block:
                raise ConfigError(f"{path}.{comp}", "a budget already fixes the compressors")
        try:
            ku, kl = recommended_k_pair(dims[0], dims[1], budget)
        except InfeasibleError as exc:
            raise ConfigError(f"{path}.budget", str(exc)) from None
        kw["upper_comp"] = CompressorSpec.rand_k(ku)
        kw["lower_comp"] = CompressorSpec.rand_k(kl)
    try:
        cfg = AlgoConfig(**kw)
        cfg.upper_comp.validate_for(dims[0])
        cfg.lower_comp.validate_for(dims[1])
    except (InvalidSpecError, TypeError) as exc:
        raise ConfigError(_field_of(exc, path, _ALGO_FIELDS | {"k", "dim"}), str(exc)) from None
    return AlgoBlock(label, cfg, budget)


def _validate_sweep(block):
    if block is None:
        return None
    if not isinstance(block, dict) or set(block) != {"axis", "values"}:
        raise ConfigError("sweep", "needs exactly 'axis' and 'values'")
    if block["axis"] not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"must be one of {SWEEP_AXES}, got {block['axis']!r}")
    values = block["values"]
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep.values", "must be a non-empty list")
    for j, v in enumerate(values):
        if block["axis"] == "hetero":
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"sweep.values[{j}]", f"hetero must be >= 0, got {v!r}")
        else:
            _require_int(v, f"sweep.values[{j}]")
    if len(set(values)) != len(values):
        raise ConfigError("sweep.values", "values must be distinct")
    return dict(block)


def _validate_grid(block):
    if block is None:
        return None
    if not isinstance(block, dict):
        raise ConfigError("grid", "must be a mapping")
    unknown = set(block) - {"alpha", "beta", "gamma", "rounds", "labels"}
    if unknown:
        raise ConfigError(f"grid.{sorted(unknown)[0]}", "unknown field")
    for key in ("alpha", "beta", "gamma"):
        vals = block.get(key)
        if vals is None:
            continue
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{key}", "must be a non-empty list")
        for j, v in enumerate(vals):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"grid.{key}[{j}]", f"stepsizes must be positive, got {v!r}")
    if "rounds" in block:
        _require_int(block["rounds"], "grid.rounds")
    return dict(block)


def parse_config(data):
    """Validate a config mapping; errors name the offending field."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(data) - _TOP_FIELDS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    for key in ("problem", "algos", "rounds", "seeds", "output_dir"):
        if key not in data:
            raise ConfigError(key, "missing")
    problem = _validate_problem(data["problem"])
    dims = _problem_dims(problem)
    algos = data["algos"]
    if not isinstance(algos, list) or not algos:
        raise ConfigError("algos", "need at least one algorithm block")
    blocks = [_validate_algo(i, b, dims) for i, b in enumerate(algos)]
    labels = [b.label for b in blocks]
    for i, lab in enumerate(labels):
        if labels.index(lab) != i:
            raise ConfigError(f"algos[{i}].label", f"duplicate label {lab!r}")
    rounds = _require_int(data["rounds"], "rounds", minimum=0)
    seeds = data["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "must be a non-empty list")
    for j, s in enumerate(seeds):
        _require_int(s, f"seeds[{j}]", minimum=0)
    if not isinstance(data["output_dir"], str) or not data["output_dir"]:
        raise ConfigError("output_dir", "must be a non-empty string")
    record_every = _require_int(data.get("record_every", 1), "record_every")
    sweep = _validate_sweep(data.get("sweep"))
    if sweep and sweep["axis"] == "hetero" and problem["kind"] != "quadratic":
        raise ConfigError("sweep.axis", "hetero sweeps need the quadratic suite")
    message_log = data.get("message_log", False)
    if not isinstance(message_log, bool):
        raise ConfigError("message_log", "must be true or false")
    grid = _validate_grid(data.get("grid"))
    if grid and "labels" in grid:
        for j, lab in enumerate(grid["labels"]):
            if lab not in labels:
                raise ConfigError(f"grid.labels[{j}]", f"no algo labelled {lab!r}")
    return ExperimentConfig(problem, blocks, rounds, list(seeds), data["output_dir"],
                            sweep, grid, record_every, message_log, data)


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path} is not valid YAML: {exc}") from None
    return parse_config(data)


def _apply_sweep(exp, block, axis, value):
    """(problem block, AlgoConfig) for one sweep value."""
    problem, cfg = dict(exp.problem), block.config
    if axis == "workers":
        problem["n"] = value
    elif axis == "hetero":
        problem["hetero"] = value
    elif axis in ("k_upper", "k_lower") and cfg.algo.value != "NcSoba":
        name = "upper_comp" if axis == "k_upper" else "lower_comp"
        cfg = replace(cfg, **{name: CompressorSpec.rand_k(value)})
    elif axis == "R" and cfg.algo.uses_msc:
        cfg = replace(cfg, R=value)
    return problem, cfg


def _run_points(exp):
    """Yield (file stem, label, seed, sweep value, problem block, cfg)."""
    values = [None] if exp.sweep is None else exp.sweep["values"]
    axis = None if exp.sweep is None else exp.sweep["axis"]
    for block in exp.algos:
        for seed in exp.seeds:
            for v in values:
                stem = f"{block.label}_seed{seed}" + ("" if v is None else f"_{axis}{v}")
                if v is None:
                    yield stem, block.label, seed, v, dict(exp.problem), block.config
                else:
                    problem, cfg = _apply_sweep(exp, block, axis, v)
                    yield stem, block.label, seed, v, problem, cfg


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, payload, name="manifest.json"):
    path = out / name
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def run_experiment(exp, out=None):
    """Run every (algo, seed, sweep value) point; returns (exit code, output dir)."""
    out = Path(out) if out is not None else exp.output_path()
    out.mkdir(parents=True, exist_ok=True)
    problems, runs, status = {}, [], EXIT_OK
    for stem, label, seed, value, pblock, cfg in _run_points(exp):
        key = json.dumps(pblock, sort_keys=True)
        if key not in problems:
            problems[key] = build_problem(pblock)
        problem = problems[key]
        try:
            cfg = cfg.resolve(problem)
        except InvalidSpecError as exc:
            raise ConfigError(f"algos[{label}]", str(exc)) from None
        entry = {"file": f"{stem}.csv", "label": label, "seed": seed, "config": cfg.to_dict(),
                 "cfg_digest": cfg.digest(), "problem_digest": problem.digest()}
        if value is not None:
            entry[exp.sweep["axis"]] = value
        try:
            trace = run(cfg, problem, exp.rounds, seed, log_messages=exp.message_log,
                        record_every=exp.record_every)
            entry["status"] = "ok"
        except DivergenceError as err:
            trace = err.trace
            entry["status"] = f"diverged at round {err.round}"
            status = EXIT_DIVERGED
            print(f"{stem}: diverged at round {err.round}", file=sys.stderr)
        trace.header["label"] = label
        write_csv(trace, out / entry["file"])
        if exp.message_log and trace.messages is not None:
            dump_log(trace.messages, out / f"{stem}.msg.bin")
            entry["message_log"] = f"{stem}.msg.bin"
        entry["sha256"] = _sha256(out / entry["file"])
        runs.append(entry)
    _write_manifest(out, {"problem": exp.problem, "rounds": exp.rounds, "seeds": exp.seeds,
                          "sweep": exp.sweep, "runs": runs})
    return status, out


def search_stepsizes(cfg, problem, grid, rounds, seed=0):
    """Exhaustive stepsize search; returns (best cfg, best score, table of all points).

    Scores are averaged stationarity over ``rounds``; diverged points score inf.
    Ties go to the smaller alpha, then beta, then gamma.
    """
    table = []
    for point in ParameterGrid({k: list(v) for k, v in grid.items()}):
        trial = replace(cfg, alpha=point["alpha"], beta=point["beta"], gamma=point["gamma"])
        try:
            score = averaged_stationarity(run(trial, problem, rounds, seed))
        except DivergenceError:
            score = math.inf
        if not math.isfinite(score):
            score = math.inf
        table.append((score, point["alpha"], point["beta"], point["gamma"]))
    finite = [t for t in table if math.isfinite(t[0])]
    if not finite:
        raise SearchFailure(f"every stepsize combination diverged for {cfg.algo.value}")
    best = min(finite)
    return replace(cfg, alpha=best[1], beta=best[2], gamma=best[3]), best[0], table


def grid_search(exp, grid=None, out=None):
    """Pick stepsizes per algorithm block; writes grid_manifest.json."""
    grid = dict(exp.grid or {}) if grid is None else dict(grid)
    axes = {k: grid.get(k, list(DEFAULT_STEPSIZE_GRID)) for k in ("alpha", "beta", "gamma")}
    k_search = grid.get("rounds", max(1, exp.rounds // 10))
    labels = grid.get("labels", [b.label for b in exp.algos])
    problem = build_problem(exp.problem)
    seed = exp.seeds[0]
    chosen, report = {}, {}
    for block in exp.algos:
        if block.label not in labels:
            continue
        best, score, table = search_stepsizes(block.config, problem, axes, k_search, seed)
        chosen[block.label] = best
        report[block.label] = {"alpha": best.alpha, "beta": best.beta, "gamma": best.gamma,
                               "score": score, "points": len(table),
                               "diverged": sum(1 for t in table if math.isinf(t[0]))}
    out = Path(out) if out is not None else exp.output_path()
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, {"k_search": k_search, "seed": seed, "grid": axes, "selection": report},
                    name="grid_manifest.json")
    return chosen


def _traces(path, pattern="*.csv"):
    p = Path(path)
    if p.is_file():
        return [p]
    if p.is_dir():
        files = sorted(Path(f) for f in glob.glob(str(p / pattern)))
        if files:
            return files
    raise InputError(f"no trace CSVs found at {path}")


def _side(path, target, pattern):
    hits, best = [], math.inf
    for f in _traces(path, pattern):
        trace = read_csv(f)
        vals = [r.grad_norm_sq for r in trace.rows if r.grad_norm_sq is not None]
        if vals:
            best = min(best, min(vals))
        row = first_hit(trace, target)
        hits.append(None if row is None else row.uplink_bits)
    reached = all(h is not None for h in hits)
    return {"path": str(path), "reached": reached, "runs": len(hits),
            "bits": float(np.mean(hits)) if reached else None, "best": best}


def compare_bits(dir_a, dir_b, target, pattern="*.csv"):
    """Uplink bits at which each side first reaches grad_norm_sq <= target."""
    a, b = _side(dir_a, target, pattern), _side(dir_b, target, pattern)
    ratio = a["bits"] / b["bits"] if a["reached"] and b["reached"] and b["bits"] > 0 else None
    return {"target": target, "a": a, "b": b, "ratio": ratio}


def _format_side(name, side):
    if side["reached"]:
        return f"{name}: {side['bits']:.17g} uplink bits ({side['runs']} run(s)) {side['path']}"
    return f"{name}: unreached (best grad_norm_sq {side['best']:.6g}) {side['path']}"


def main(argv=None):
    parser = argparse.ArgumentParser(prog="csoba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run every algorithm/seed/sweep point of a config")
    p_run.add_argument("config")
    p_grid = sub.add_parser("grid", help="grid-search stepsizes for each algorithm")
    p_grid.add_argument("config")
    p_cmp = sub.add_parser("compare", help="compare uplink bits to reach a target")
    p_cmp.add_argument("a")
    p_cmp.add_argument("b")
    p_cmp.add_argument("--target", type=float, required=True)
    p_cmp.add_argument("--pattern", default="*.csv", help="glob for trace files inside directories")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            code, out = run_experiment(load_config(args.config))
            print(f"wrote {out}")
            return code
        if args.command == "grid":
            exp = load_config(args.config)
            for label, cfg in grid_search(exp).items():
                print(f"{label}: alpha={cfg.alpha:g} beta={cfg.beta:g} gamma={cfg.gamma:g}")
            return EXIT_OK
        report = compare_bits(args.a, args.b, args.target, args.pattern)
        print(f"target grad_norm_sq <= {args.target:g}")
        print(_format_side("A", report["a"]))
        print(_format_side("B", report["b"]))
        print("ratio A/B: " + ("n/a" if report["ratio"] is None else f"{report['ratio']:.6g}"))
        return EXIT_OK
    except (ConfigError, InvalidSpecError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SearchFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEARCH
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
