"""Command line entry point: fit-env, check-env, simulate, report.

Exit codes: 0 success, 1 input or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__
from .bandit import MHConfig
from .distributions import MODEL_CLASS_ORDER, UserEnvModel
from .effects import SIGN_MODES, class_effects, fill_missing_classes
from .env_check import MOMENT_KEYS, MOMENT_NAMES, moment_report, variance_capture
from .features import Corpus, IntegrityError, SchemaError, load_corpus
from .fitting import FitConfig, FitError, SelectionError, fit_corpus
from .harness import CHECKPOINTS, ExperimentConfig, run_experiment
from .io import file_digest, read_effects, read_params, read_table, write_effects, write_json, write_params, write_table
from .simulator import VARIANT_IDS, Environment
from .synthetic import synthetic_models

log = logging.getLogger("brushsim")


class InputError(Exception):
    """Bad configuration or missing/invalid input file (exit code 1)."""


@dataclass
class RunConfig:
    corpus: str | None = None
    column_map: dict = field(default_factory=dict)
    delimiter: str = ","
    output_dir: str = "runs"
    params: str | None = None
    load_published: str | None = None
    effects: str | None = None
    synthetic: bool = False
    variants: list = field(default_factory=lambda: ["S_Het", "NS_Het", "S_Pop", "NS_Pop"])
    algorithms: list = field(default_factory=lambda: ["ZIP", "BLR"])
    cluster_sizes: list = field(default_factory=lambda: [1, 4, "N"])
    trials: int = 100
    n_users: int = 72
    seed: int = 0
    eta2: float | None = None
    effect_sign: str = "beneficial"
    common_random_numbers: bool = True
    random_clusters: bool = False
    weekend_offset: int = 0
    check_trials: int = 100
    percentile_method: str = "linear"
    workers: int = 0
    fit: dict = field(default_factory=dict)
    mh: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        config = cls(**data)
        config.validate()
        return config

    def validate(self) -> None:
        bad = [v for v in self.variants if v not in VARIANT_IDS]
        if bad or not self.variants:
            raise InputError(f"invalid variant list {self.variants}")
        if not self.algorithms or any(a not in ("BLR", "ZIP") for a in self.algorithms):
            raise InputError(f"invalid algorithm list {self.algorithms}")
        if not self.cluster_sizes or any(k not in (1, 4, "N") for k in self.cluster_sizes):
            raise InputError(f"cluster sizes must be drawn from 1, 4, N; got {self.cluster_sizes}")
        if self.effect_sign not in SIGN_MODES:
            raise InputError(f"effect_sign must be one of {SIGN_MODES}")
        if self.percentile_method not in ("linear", "lower", "higher", "nearest", "midpoint"):
            raise InputError(f"unsupported percentile_method {self.percentile_method!r}")
        if self.workers < 0:
            raise InputError("workers must be >= 0 (0 means all cores)")
        if self.trials < 1:
            raise InputError("trials must be >= 1")
        for name in ("corpus", "params", "load_published", "effects"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise InputError(f"{name} file not found: {path}")
        unknown_fit = set(self.fit) - {f.name for f in fields(FitConfig)}
        unknown_mh = set(self.mh) - {f.name for f in fields(MHConfig)}
        if unknown_fit or unknown_mh:
            raise InputError(f"unknown fit/mh keys: {sorted(unknown_fit | unknown_mh)}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise InputError("config file must hold a mapping")
    overrides = {
        "corpus": args.corpus,
        "output_dir": args.output_dir,
        "params": args.params,
        "load_published": getattr(args, "load_published", None),
        "seed": args.seed,
        "trials": getattr(args, "trials", None),
        "workers": args.workers,
        "effect_sign": getattr(args, "effect_sign", None),
        "eta2": getattr(args, "eta2", None),
        "check_trials": getattr(args, "check_trials", None),
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if getattr(args, "variants", None):
        data["variants"] = args.variants.split(",")
    if getattr(args, "algorithms", None):
        data["algorithms"] = args.algorithms.split(",")
    if getattr(args, "cluster_sizes", None):
        data["cluster_sizes"] = [k if k == "N" else int(k) for k in args.cluster_sizes.split(",")]
    if getattr(args, "synthetic", False):
        data["synthetic"] = True
    if getattr(args, "no_crn", False):
        data["common_random_numbers"] = False
    return RunConfig.from_mapping(data)


def _corpus(config: RunConfig) -> Corpus:
    if config.corpus is None:
        raise InputError("this command needs a corpus file (config key 'corpus' or --corpus)")
    try:
        return load_corpus(config.corpus, config.column_map, config.delimiter)
    except (SchemaError, IntegrityError) as exc:
        raise InputError(str(exc)) from exc


def _manifest(config: RunConfig, command: str, inputs: list[str | None], extra=None) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
        "inputs": {str(p): file_digest(p) for p in inputs if p},
        **(extra or {}),
    }


def _workers(config: RunConfig) -> int:
    return config.workers or os.cpu_count() or 1


def _params_path(config: RunConfig) -> str | None:
    if config.load_published:
        return config.load_published
    if config.params:
        return config.params
    default = Path(config.output_dir) / "fitted_params.csv"
    return str(default) if default.exists() else None


def _load_models(config: RunConfig) -> dict[str, list[UserEnvModel]]:
    """Fitted models keyed by base variant ('S', 'NS')."""
    if config.synthetic:
        return {"S": synthetic_models(32, "S", config.seed), "NS": synthetic_models(32, "NS", config.seed)}
    path = _params_path(config)
    if path is None:
        raise InputError("no fitted parameter file; run fit-env first or pass --params")
    try:
        models = read_params(path)
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    out: dict[str, list[UserEnvModel]] = {"S": [], "NS": []}
    for model in models:
        out[model.variant].append(model)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_fit_env(config: RunConfig) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.load_published:
        models = _load_models(config)
        records = models["S"] + models["NS"]
        write_params(out / "fitted_params.csv", records)
        write_effects(out / "effects.csv", class_effects(models["S"]))
        write_json(out / "manifest_fit.json", _manifest(config, "fit-env", [config.load_published], {"fitted": False}))
        print(f"loaded {len(records)} published records; fitting skipped")
        return 0

    corpus = _corpus(config)
    fit_config = FitConfig(**{**config.fit, "weekend_offset": config.weekend_offset})
    chosen_models = []
    selection = []
    failures = []
    for variant in ("S", "NS"):
        results = fit_corpus(corpus, variant, fit_config, config.seed, _workers(config))
        for uid in corpus.user_ids:
            chosen, fits = results[uid]
            chosen_models.append(fits[chosen].model)
            row = {"user_id": uid, "variant": variant, "model_class": chosen.value}
            for cls in MODEL_CLASS_ORDER:
                if cls in fits:
                    row[f"rmse_{cls.value}"] = fits[cls].rmse
                else:
                    row[f"rmse_{cls.value}"] = None
                    failures.append(f"{uid}/{variant}/{cls.value}")
            selection.append(row)
    write_params(out / "fitted_params.csv", chosen_models)
    write_table(out / "selection_report.csv", selection)
    stationary = [m for m in chosen_models if m.variant == "S"]
    write_effects(out / "effects.csv", class_effects(stationary))
    counts = {}
    for row in selection:
        key = f"{row['variant']}:{row['model_class']}"
        counts[key] = counts.get(key, 0) + 1
    write_json(out / "manifest_fit.json", _manifest(config, "fit-env", [config.corpus], {"class_counts": counts}))
    print(f"fitted {len(corpus)} users x 2 variants; class counts {counts}")
    if failures:
        print(f"runtime failure: {len(failures)} class fits failed: {', '.join(failures)}", file=sys.stderr)
        return 2
    return 0


def cmd_check_env(config: RunConfig) -> int:
    corpus = _corpus(config)
    models = _load_models(config)
    columns = {}
    capture_rows = []
    observed = None
    for base, label in (("S", "Stationary"), ("NS", "Non-Stationary")):
        by_user = {m.user_id: m for m in models[base]}
        if not by_user:
            continue
        try:
            report = moment_report(by_user, corpus, config.check_trials, config.seed, config.weekend_offset)
        except KeyError as exc:
            raise InputError(str(exc)) from exc
        observed = report.observed
        columns[label] = report.simulated
        bern, nonzero = variance_capture(by_user, corpus, config.weekend_offset)
        capture_rows.append({"variant": label, "statistic": "bernoulli", **bern.to_dict()})
        capture_rows.append({"variant": label, "statistic": "nonzero", **nonzero.to_dict()})
    rows = []
    for name, key in zip(MOMENT_NAMES, MOMENT_KEYS):
        row = {"metric": name, "observed": observed[key]}
        row.update({label: col[key] for label, col in columns.items()})
        rows.append(row)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "moments.csv", rows)
    for row in capture_rows:
        row["excluded_users"] = ";".join(row["excluded_users"])
    write_table(out / "variance_capture.csv", capture_rows)
    write_json(out / "manifest_check.json", _manifest(config, "check-env", [config.corpus, _params_path(config)]))
    _print_table(rows)
    _print_table(capture_rows)
    return 0


def build_environments(config: RunConfig) -> dict[str, Environment]:
    models = _load_models(config)
    if config.effects:
        effects = read_effects(config.effects)
    elif not config.synthetic and (Path(config.output_dir) / "effects.csv").exists() and not config.load_published:
        effects = read_effects(Path(config.output_dir) / "effects.csv")
    else:
        effects = class_effects(models["S"])
    envs = {}
    for variant in config.variants:
        pool = models[variant.split("_")[0]]
        if not pool:
            raise InputError(f"no fitted models for variant {variant}")
        pool_effects = fill_missing_classes(effects, pool)
        for cls in sorted(set(pool_effects) - set(effects), key=lambda c: c.value):
            log.warning("no stationary %s users; %s effects derived from the %s fits", cls.value, cls.value, variant)
        envs[variant] = Environment(variant, pool, pool_effects, config.effect_sign, config.weekend_offset)
    return envs


def _eta2(config: RunConfig) -> float:
    if config.eta2 is not None:
        return float(config.eta2)
    if config.corpus is None:
        raise InputError("eta2 is derived from the corpus reward variance; give a corpus or an explicit eta2")
    return _corpus(config).reward_variance()


def cmd_simulate(config: RunConfig) -> int:
    envs = build_environments(config)
    eta2 = _eta2(config)
    mh = MHConfig(**config.mh)
    grid = [
        ExperimentConfig(
            variant=variant,
            algorithm=alg,
            cluster_size=k,
            n_users=config.n_users,
            eta2=eta2,
            mh=mh,
            common_random_numbers=config.common_random_numbers,
            random_clusters=config.random_clusters,
            percentile_method=config.percentile_method,
        )
        for variant in config.variants
        for alg in config.algorithms
        for k in config.cluster_sizes
    ]

    def progress(cell):
        state = "failed: " + cell.error if cell.error else f"{cell.seconds:.1f}s"
        print(f"  {cell.config.variant:7s} {cell.config.cell_label:10s} {state}", file=sys.stderr)

    cells = run_experiment(grid, envs, config.trials, config.seed, _workers(config), progress)
    rows = [cell.row() for cell in cells]
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "results.csv", rows)
    series = []
    for cell in cells:
        if cell.report is None:
            continue
        for t0 in CHECKPOINTS:
            stat = cell.report.get(f"avg_t{t0}")
            if stat:
                series.append({
                    "variant": cell.config.variant,
                    "candidate": cell.config.cell_label,
                    "t0": t0,
                    "mean": stat["mean"],
                    "sem": stat["sem"],
                })
    write_table(out / "checkpoints.csv", series)
    write_json(out / "results.json", rows)
    inputs = [config.corpus, None if config.synthetic else _params_path(config), config.effects]
    write_json(out / "manifest_simulate.json", _manifest(config, "simulate", inputs, {"eta2": eta2}))
    print_results(rows)
    failed = [cell for cell in cells if cell.error]
    return 2 if failed else 0


def print_results(rows: list[dict]) -> None:
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    candidates = list(dict.fromkeys(f"{r['algorithm']} k={r['k']}" for r in rows))
    for metric, title in (("average", "Average Rewards"), ("p25", "25th Percentile Rewards")):
        print(f"\n{title}")
        print(f"{'candidate':12s}" + "".join(f"{v:>20s}" for v in variants))
        for cand in candidates:
            line = f"{cand:12s}"
            for v in variants:
                row = next((r for r in rows if r["variant"] == v and f"{r['algorithm']} k={r['k']}" == cand), None)
                if row is None or f"{metric}_mean" not in row:
                    line += f"{'-':>20s}"
                    continue
                mean, sem = float(row[f"{metric}_mean"]), row.get(f"{metric}_sem")
                sem_txt = f"({float(sem):.3f})" if sem not in (None, "") else "(n/a)"
                line += f"{mean:>12.3f} {sem_txt:>7s}"
            print(line)


def _print_table(rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    print("\t".join(keys))
    for row in rows:
        print("\t".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k]) for k in keys))


def cmd_report(config: RunConfig, results_path: str | None) -> int:
    path = Path(results_path) if results_path else Path(config.output_dir) / "results.csv"
    if not path.exists():
        raise InputError(f"results file not found: {path}")
    print_results(read_table(path))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brushsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--corpus", help="session-level CSV corpus")
        p.add_argument("--params", help="fitted parameter CSV")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=None, help="worker processes; 0 uses all cores (the default)")
        p.add_argument("--synthetic", action="store_true", help="use synthetic users instead of fitted ones")
        p.add_argument("-v", "--verbose", action="store_true")

    p_fit = sub.add_parser("fit-env", help="fit per-user base models and select model classes")
    common(p_fit)
    p_fit.add_argument("--load-published", dest="load_published", help="skip fitting and pass through this parameter file")

    p_check = sub.add_parser("check-env", help="moment and variance-capture diagnostics")
    common(p_check)
    p_check.add_argument("--load-published", dest="load_published")
    p_check.add_argument("--check-trials", dest="check_trials", type=int)

    p_sim = sub.add_parser("simulate", help="run the Monte Carlo experiment grid")
    common(p_sim)
    p_sim.add_argument("--load-published", dest="load_published")
    p_sim.add_argument("--trials", type=int)
    p_sim.add_argument("--variants", help="comma separated, e.g. S_Pop,NS_Het")
    p_sim.add_argument("--algorithms", help="comma separated subset of BLR,ZIP")
    p_sim.add_argument("--cluster-sizes", dest="cluster_sizes", help="comma separated subset of 1,4,N")
    p_sim.add_argument("--effect-sign", dest="effect_sign", choices=SIGN_MODES)
    p_sim.add_argument("--eta2", type=float)
    p_sim.add_argument("--no-crn", dest="no_crn", action="store_true", help="independent random numbers per cell")

    p_rep = sub.add_parser("report", help="print average and 25th-percentile reward tables from a results file")
    common(p_rep)
    p_rep.add_argument("results", nargs="?", help="results.csv (default: <output-dir>/results.csv)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        started = time.perf_counter()
        if args.command == "fit-env":
            code = cmd_fit_env(config)
        elif args.command == "check-env":
            code = cmd_check_env(config)
        elif args.command == "simulate":
            code = cmd_simulate(config)
        else:
            code = cmd_report(config, args.results)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
        return code
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FitError, SelectionError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
