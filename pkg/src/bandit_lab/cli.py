"""``bandit-lab`` command line: ``run``, ``aggregate`` and ``trace``.

Exit codes: 0 success, 2 usage or configuration error, 3 data ingestion
error, 4 numeric failure, 5 filesystem failure while writing results.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import envs
from .agents import AGENT_IDS, LOCAL_AGENT_IDS, make_agent
from .envs import DataError
from .harness import (
    ConfigError,
    TrialResult,
    TrialSummary,
    aggregate,
    histogram_trace,
    read_trials_csv,
    regret_curve_csv,
    run_trial,
    trial_seeds,
    trials_csv,
)
from .ndcore import ContractError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
DATA_ENV_VAR = "BANDIT_LAB_DATA"


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # mushroom | classification | table | wheel
    files: tuple[tuple[str, str], ...] = ()  # (file name, packaged schema) candidates, in order


DATASETS = {
    "mushroom": DatasetSpec("mushroom", (("agaricus-lepiota.data", "mushroom.schema"),
                                         ("mushroom.dat", "mushroom-keel.schema"))),
    "statlog": DatasetSpec("classification", (("shuttle.trn", "statlog.schema"), ("shuttle.tst", "statlog.schema"))),
    "covertype": DatasetSpec("classification", (("covtype.data", "covertype.schema"),)),
    "adult": DatasetSpec("classification", (("adult.data", "adult.schema"),)),
    "census": DatasetSpec("classification"),
    "jester": DatasetSpec("table", (("jester.csv", "jester.schema"),)),
    "financial": DatasetSpec("table", (("financial.csv", "financial.schema"),)),
    "wheel": DatasetSpec("wheel"),
}


def packaged_schema(name: str) -> Path:
    return Path(str(resources.files("bandit_lab") / "schemas" / name))


def resolve_data(dataset: str, data_path: str = "", schema_path: str = "") -> tuple[Path, Path]:
    """Locate the data file and its schema for a table-backed dataset."""
    spec = DATASETS[dataset]
    root = Path(data_path) if data_path else (Path(os.environ[DATA_ENV_VAR]) if os.environ.get(DATA_ENV_VAR) else None)
    if root is None:
        raise DataError(f"no data path for {dataset!r}: set data_path or ${DATA_ENV_VAR}")
    if root.is_file():
        if schema_path:
            return root, Path(schema_path)
        for fname, schema in spec.files:
            if root.name == fname:
                return root, packaged_schema(schema)
        if spec.files:
            return root, packaged_schema(spec.files[0][1])
        raise DataError(f"dataset {dataset!r} has no packaged schema; pass schema_path")
    for fname, schema in spec.files:
        if (root / fname).is_file():
            return root / fname, Path(schema_path) if schema_path else packaged_schema(schema)
    expected = ", ".join(f for f, _ in spec.files) or "a file given by data_path"
    raise DataError(f"dataset {dataset!r}: none of [{expected}] found under {root}")


@lru_cache(maxsize=8)
def _load_table(path: str, schema: str) -> envs.DatasetTable:
    return envs.load_dataset(path, schema)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "wheel"
    agent: str = "uniform"
    data_path: str = ""
    schema_path: str = ""
    horizon: int = 2000
    trials: int = 50
    seed: int = 0
    out_dir: str = "results"
    jobs: int = 1
    delta: float = 0.5
    restandardize: bool = False
    latent_dim: int = 50
    num_mixture: int = 50
    prior_sigma: float = 1.25
    train_every: int = 20
    train_steps: int = 40
    batch_size: int = 512
    lr: float = 1e-3
    a0: float = 6.0
    b0: float = 6.0
    lam: float = 0.25

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: unknown {self.dataset!r}; choose from {', '.join(DATASETS)}")
        if self.agent not in AGENT_IDS:
            raise ConfigError(f"agent: unknown {self.agent!r}; choose from {', '.join(AGENT_IDS)}")
        for key in ("horizon", "trials", "jobs", "latent_dim", "num_mixture", "train_every", "train_steps",
                    "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        for key in ("prior_sigma", "lr", "a0", "b0", "lam"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be > 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta: must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        for key in ("data_path", "schema_path"):
            value = getattr(self, key)
            if value and not Path(value).exists():
                raise ConfigError(f"{key}: {value} does not exist")
        return self

    def agent_params(self) -> dict:
        keys = ("latent_dim", "num_mixture", "prior_sigma", "train_every", "train_steps", "batch_size", "lr",
                "a0", "b0", "lam")
        return {k: getattr(self, k) for k in keys}


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from exc
    return value.strip()


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` comments; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key = value")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown config key (line {lineno})")
        values[key] = _coerce(key, value.strip())
    return replace(base or ExperimentConfig(), **values)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment plumbing


def make_env(cfg: ExperimentConfig, env_seed: int) -> envs.BanditEnvironment:
    spec = DATASETS[cfg.dataset]
    if spec.kind == "wheel":
        return envs.wheel_env(cfg.delta, cfg.horizon, env_seed)
    path, schema = resolve_data(cfg.dataset, cfg.data_path, cfg.schema_path)
    table = _load_table(str(path), str(schema))
    if spec.kind == "mushroom":
        return envs.mushroom_env(table, cfg.horizon, env_seed, restandardize=cfg.restandardize)
    if spec.kind == "classification":
        return envs.classification_env(table, cfg.horizon, env_seed, restandardize=cfg.restandardize,
                                       name=cfg.dataset)
    return envs.table_reward_env(table, cfg.horizon, env_seed, restandardize=cfg.restandardize, name=cfg.dataset)


def run_one(cfg: ExperimentConfig, trial: int, env_seed: int, agent_seed: int) -> TrialResult:
    env = make_env(cfg, env_seed)
    agent = make_agent(cfg.agent, env.context_dim, env.num_actions, agent_seed, cfg.agent_params())
    result = run_trial(env, agent, cfg.horizon, dataset=cfg.dataset, trial=trial, env_seed=env_seed,
                       agent_seed=agent_seed)
    result.agent = cfg.agent
    return result


def run_experiment(cfg: ExperimentConfig) -> list[TrialResult]:
    seeds = trial_seeds(cfg.seed, cfg.trials)
    args = [(cfg, s.trial, s.env_seed, s.agent_seed) for s in seeds]
    if cfg.jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(args))) as pool:
            return list(pool.map(run_one, *zip(*args)))
    return [run_one(*a) for a in args]


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _versions() -> dict:
    return {"bandit_lab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_manifest(cfg: ExperimentConfig, results: list[TrialResult]) -> dict:
    env = make_env(replace(cfg, horizon=1), results[0].env_seed)
    agent = make_agent(cfg.agent, env.context_dim, env.num_actions, 0, cfg.agent_params())
    manifest = {
        "config": asdict(cfg),
        "agent_config": agent.config(),
        "dataset": {"id": cfg.dataset, "context_dim": env.context_dim, "num_actions": env.num_actions},
        "seeds": [{"trial": r.trial, "env_seed": r.env_seed, "agent_seed": r.agent_seed} for r in results],
        "regret": "expected reward of the chosen action",
        "wall_time_seconds": [round(r.wall_time, 3) for r in results],
        "versions": _versions(),
    }
    if DATASETS[cfg.dataset].kind != "wheel":
        path, schema = resolve_data(cfg.dataset, cfg.data_path, cfg.schema_path)
        manifest["dataset"].update({"path": str(path), "schema": str(schema), "sha256": _file_digest(path)})
    return manifest


# ---------------------------------------------------------------------------
# commands


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
        cfg = parse_config(text, cfg)
    overrides = {k: getattr(args, k) for k in _FIELD_TYPES if getattr(args, k, None) is not None}
    return replace(cfg, **overrides).validate()


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    results = run_experiment(cfg)
    out = Path(cfg.out_dir)
    summaries = [TrialSummary.from_result(r) for r in results]
    manifest = build_manifest(cfg, results)
    try:
        atomic_write(out / "trials.csv", trials_csv(summaries))
        atomic_write(out / "regret_curve.csv", regret_curve_csv(results))
        atomic_write(out / "config.txt", serialize_config(cfg))
        atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    print(f"{cfg.agent} on {cfg.dataset}: {len(results)} trials -> {out}")
    return EXIT_OK


def cmd_aggregate(args: argparse.Namespace) -> int:
    rows: list[TrialSummary] = []
    horizons: dict[str, tuple[int, str]] = {}
    for d in args.result_dirs:
        d = Path(d)
        try:
            text = (d / "trials.csv").read_text()
            manifest = json.loads((d / "manifest.json").read_text())
        except OSError as exc:
            raise ConfigError(f"{d}: needs trials.csv and manifest.json ({exc})") from exc
        dataset, horizon = manifest["config"]["dataset"], manifest["config"]["horizon"]
        if dataset in horizons and horizons[dataset][0] != horizon:
            raise ConfigError(f"incompatible manifests: {dataset} has horizon {horizons[dataset][0]} in "
                              f"{horizons[dataset][1]} but {horizon} in {d}")
        horizons.setdefault(dataset, (horizon, str(d)))
        rows.extend(read_trials_csv(text))
    report = aggregate(rows)
    out = Path(args.out)
    try:
        atomic_write(out / "report.json", report.to_json() + "\n")
        atomic_write(out / "report.csv", report.to_csv())
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    for agent in report.agents:
        print(f"{agent:22s} mean rank {report.mean_rank[agent]:6.3f}  mean value {report.mean_value[agent]:8.2f}")
    return EXIT_OK


def _trace_contexts(cfg: ExperimentConfig, args: argparse.Namespace, env: envs.BanditEnvironment) -> np.ndarray:
    if args.context is not None:
        try:
            x = np.array([float(v) for v in args.context.split(",")])
        except ValueError as exc:
            raise ConfigError(f"context: cannot parse {args.context!r}") from exc
        if x.size != env.context_dim:
            raise ConfigError(f"context: expected {env.context_dim} values, got {x.size}")
        return x[None, :]
    if DATASETS[cfg.dataset].kind == "wheel":
        if args.context_label is not None or args.context_row is not None:
            raise ConfigError("wheel traces take --context x,y")
        return env.contexts[:1]
    path, schema = resolve_data(cfg.dataset, cfg.data_path, cfg.schema_path)
    table = _load_table(str(path), str(schema))
    if args.context_label is not None:
        if args.context_label not in table.label_names:
            raise ConfigError(f"context-label: {args.context_label!r} not in {table.label_names}")
        rows = table.features[table.labels == table.label_names.index(args.context_label)]
        return rows if args.mode == "per-context" else rows[:1]
    row = args.context_row or 0
    if not 0 <= row < table.n_rows:
        raise ConfigError(f"context-row: {row} outside [0, {table.n_rows})")
    return table.features[row:row + 1]


def cmd_trace(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if cfg.agent not in LOCAL_AGENT_IDS:
        raise ConfigError(f"agent: trace needs one of {', '.join(LOCAL_AGENT_IDS)}, got {cfg.agent!r}")
    seeds = trial_seeds(cfg.seed, 1)[0]
    env = make_env(cfg, seeds.env_seed)
    agent = make_agent(cfg.agent, env.context_dim, env.num_actions, seeds.agent_seed, cfg.agent_params())
    try:
        steps = [int(s) for s in args.steps.split(",")]
    except ValueError as exc:
        raise ConfigError(f"steps: cannot parse {args.steps!r}") from exc
    contexts = _trace_contexts(cfg, args, env)
    trace = histogram_trace(agent, env, contexts, args.action, steps, num_samples=args.samples, mode=args.mode,
                            bins=args.bins, seed=cfg.seed)
    out = Path(cfg.out_dir)
    try:
        atomic_write(out / "trace.csv", trace.to_csv())
        atomic_write(out / "trace_manifest.json", json.dumps(
            {"config": asdict(cfg), "agent_config": agent.config(), "action": args.action, "samples": int(trace.samples.shape[1]),
             "mode": args.mode, "steps": trace.steps, "versions": _versions()}, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    print(f"trace of {cfg.agent} on {cfg.dataset}: {len(trace.steps)} steps -> {out / 'trace.csv'}")
    return EXIT_OK


class _IOFailure(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, type=lambda v, k=f.name: _coerce(k, v), metavar="BOOL", default=None)
        else:
            conv = {"int": int, "float": float}.get(f.type, str)
            p.add_argument(flag, dest=f.name, type=conv, default=None)
    p.add_argument("--out", dest="out_dir", default=None, help="alias of --out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bandit-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run seeded trials of one agent on one dataset")
    _add_config_flags(run)
    run.set_defaults(func=cmd_run)

    agg = sub.add_parser("aggregate", help="normalize, rank and average results from run directories")
    agg.add_argument("result_dirs", nargs="+")
    agg.add_argument("--out", default=".")
    agg.set_defaults(func=cmd_aggregate)

    tr = sub.add_parser("trace", help="export mean-reward histograms over training steps")
    _add_config_flags(tr)
    sel = tr.add_mutually_exclusive_group()
    sel.add_argument("--context", help="comma-separated context vector")
    sel.add_argument("--context-row", type=int, help="row index of the loaded table")
    sel.add_argument("--context-label", help="label value; per-context mode uses every matching row")
    tr.add_argument("--action", type=int, default=1)
    tr.add_argument("--samples", type=int, default=2000)
    tr.add_argument("--steps", default="0,500,1000,1500,2000", help="comma-separated observation counts")
    tr.add_argument("--mode", choices=("repeat", "per-context"), default="repeat")
    tr.add_argument("--bins", type=int, default=50)
    tr.set_defaults(func=cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _IOFailure as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
