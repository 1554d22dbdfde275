"""Seeded trial runner, regret metrics, cross-dataset aggregation and histogram traces."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .envs import BanditEnvironment

SIMPLE_REGRET_WINDOW = 500
NORMALIZATION = "100 * CR / mean(CR of uniform over trials)"


class ConfigError(ValueError):
    """Inconsistent experiment setup (dimensions, coverage, missing baselines)."""


# ---------------------------------------------------------------------------
# seeds


@dataclass(frozen=True)
class TrialSeeds:
    trial: int
    env_seed: int
    agent_seed: int


def trial_seeds(master_seed: int, trials: int) -> list[TrialSeeds]:
    """Per-trial env and agent seeds derived only from ``master_seed`` and the trial index.

    Every agent run with the same master seed therefore sees the same context
    sequences. The agent seed is further split into init, act and train streams.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    out = []
    for i, child in enumerate(np.random.SeedSequence(master_seed).spawn(trials)):
        env_ss, agent_ss = child.spawn(2)
        out.append(TrialSeeds(i, int(env_ss.generate_state(1, np.uint64)[0]),
                              int(agent_ss.generate_state(1, np.uint64)[0])))
    return out


# ---------------------------------------------------------------------------
# single trial


@dataclass
class TrialResult:
    dataset: str
    agent: str
    trial: int
    env_seed: int
    agent_seed: int
    regrets: np.ndarray  # per-step expected regret
    actions: np.ndarray
    wall_time: float = 0.0

    @property
    def horizon(self) -> int:
        return len(self.regrets)

    @property
    def cumulative_regret(self) -> float:
        return float(self.regrets.sum())

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.regrets)


def run_trial(env: BanditEnvironment, agent, horizon: int | None = None, *, dataset: str | None = None,
              trial: int = 0, env_seed: int = 0, agent_seed: int = 0,
              callback: Callable[[int, object], None] | None = None) -> TrialResult:
    """Thompson-sampling loop over the environment's pre-drawn rounds.

    Regret at step t is ``optimal_expected[t] - expected_rewards[t, a_t]``; the
    agent learns from the realized reward. ``callback(t, agent)`` runs before
    the agent acts at step t (so step 0 sees the untrained agent).
    """
    if agent.context_dim != env.context_dim or agent.num_actions != env.num_actions:
        raise ConfigError(f"agent expects d={agent.context_dim}, C={agent.num_actions}; "
                          f"environment has d={env.context_dim}, C={env.num_actions}")
    T = env.horizon if horizon is None else horizon
    if not 1 <= T <= env.horizon:
        raise ConfigError(f"horizon {T} outside [1, {env.horizon}]")
    regrets = np.empty(T)
    actions = np.empty(T, dtype=np.int64)
    start = time.perf_counter()
    for t in range(T):
        if callback is not None:
            callback(t, agent)
        x = env.contexts[t]
        a = agent.act(x)
        if not 0 <= a < env.num_actions:
            raise ConfigError(f"agent returned action {a} outside [0, {env.num_actions})")
        agent.observe(x, a, float(env.rewards[t, a]))
        actions[t] = a
        regrets[t] = env.optimal_expected[t] - env.expected_rewards[t, a]
    if callback is not None:
        callback(T, agent)
    return TrialResult(dataset or env.name, getattr(agent, "name", type(agent).__name__), trial,
                       env_seed, agent_seed, regrets, actions, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# metrics


def simple_regret(result: TrialResult | np.ndarray, window: int = SIMPLE_REGRET_WINDOW) -> float:
    regrets = result.regrets if isinstance(result, TrialResult) else np.asarray(result)
    if window < 1 or len(regrets) < window:
        raise ConfigError(f"horizon {len(regrets)} shorter than simple-regret window {window}")
    return float(regrets[-window:].mean())


def normalized_cr(results: Sequence[TrialResult | float], uniform_results: Sequence[TrialResult | float]) -> np.ndarray:
    """``100 * CR_i / mean(CR_uniform)`` for each trial i."""
    cr = np.array([r.cumulative_regret if isinstance(r, TrialResult) else float(r) for r in results])
    base = np.array([r.cumulative_regret if isinstance(r, TrialResult) else float(r) for r in uniform_results])
    if base.size == 0:
        raise ConfigError("normalization baseline absent")
    denom = base.mean()
    if not denom > 0:
        raise ConfigError("uniform cumulative regret is zero; normalized regret undefined")
    return 100.0 * cr / denom


def standard_error(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.size))


def regret_curve(results: Sequence[TrialResult]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Steps 1..T with the mean and standard error of cumulative regret across trials."""
    if not results:
        raise ConfigError("no trials")
    T = {r.horizon for r in results}
    if len(T) != 1:
        raise ConfigError(f"trials have different horizons: {sorted(T)}")
    cum = np.stack([r.cumulative() for r in results])
    n = len(results)
    se = cum.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(cum.shape[1])
    return np.arange(1, cum.shape[1] + 1), cum.mean(axis=0), se


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class TrialSummary:
    """What aggregation needs from one trial; also the trials.csv row."""

    dataset: str
    agent: str
    trial: int
    env_seed: int
    agent_seed: int
    horizon: int
    cumulative_regret: float
    simple_regret: float  # NaN when horizon < window

    @classmethod
    def from_result(cls, r: TrialResult, window: int = SIMPLE_REGRET_WINDOW) -> "TrialSummary":
        sr = simple_regret(r, window) if r.horizon >= window else float("nan")
        return cls(r.dataset, r.agent, r.trial, r.env_seed, r.agent_seed, r.horizon, r.cumulative_regret, sr)


@dataclass
class CellSummary:
    dataset: str
    agent: str
    trials: int
    normalized_mean: float
    normalized_se: float
    cr_mean: float
    simple_regret_mean: float
    simple_regret_se: float
    rank: float = float("nan")


@dataclass
class AggregateReport:
    cells: list[CellSummary]
    mean_rank: dict[str, float]
    mean_value: dict[str, float]
    datasets: list[str]
    agents: list[str]
    metadata: dict = field(default_factory=lambda: {"normalization": NORMALIZATION, "rank_ties": "average"})

    def cell(self, dataset: str, agent: str) -> CellSummary:
        for c in self.cells:
            if c.dataset == dataset and c.agent == agent:
                return c
        raise KeyError((dataset, agent))

    def to_json(self) -> str:
        return json.dumps({
            "datasets": self.datasets,
            "agents": self.agents,
            "mean_rank": self.mean_rank,
            "mean_value": self.mean_value,
            "cells": [{k: _json_float(v) for k, v in asdict(c).items()} for c in self.cells],
            "metadata": self.metadata,
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in CellSummary.__dataclass_fields__.values()]
        w.writerow(names + ["mean_rank", "mean_value"])
        for c in self.cells:
            row = asdict(c)
            w.writerow([_fmt(row[n]) for n in names] + [_fmt(self.mean_rank[c.agent]), _fmt(self.mean_value[c.agent])])
        return buf.getvalue()


def _json_float(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def rank_agents(means: dict[str, dict[str, float]]) -> tuple[dict[str, dict[str, float]], dict[str, float], dict[str, float]]:
    """Per-dataset average ranks (1 = lowest regret), Mean Rank and Mean Value.

    ``means`` maps dataset -> agent -> mean normalized CR; every dataset must
    cover the same agents.
    """
    if not means:
        raise ConfigError("nothing to aggregate")
    datasets = sorted(means)
    agents = sorted({a for d in datasets for a in means[d]})
    missing = [(d, a) for d in datasets for a in agents if a not in means[d]]
    if missing:
        raise ConfigError("ragged coverage; missing cells: " + ", ".join(f"{d}/{a}" for d, a in missing))
    ranks = {}
    for d in datasets:
        r = rankdata([means[d][a] for a in agents], method="average")
        ranks[d] = {a: float(x) for a, x in zip(agents, r)}
    mean_rank = {a: float(np.mean([ranks[d][a] for d in datasets])) for a in agents}
    mean_value = {a: float(np.mean([means[d][a] for d in datasets])) for a in agents}
    return ranks, mean_rank, mean_value


def aggregate(rows: Iterable[TrialSummary | TrialResult], baseline: str = "uniform") -> AggregateReport:
    """Normalize each dataset's CRs by the baseline's mean CR, then rank and average."""
    groups: dict[tuple[str, str], list[TrialSummary]] = defaultdict(list)
    for r in rows:
        s = TrialSummary.from_result(r) if isinstance(r, TrialResult) else r
        groups[(s.dataset, s.agent)].append(s)
    if not groups:
        raise ConfigError("nothing to aggregate")
    datasets = sorted({d for d, _ in groups})
    absent = [d for d in datasets if (d, baseline) not in groups]
    if absent:
        raise ConfigError(f"normalization baseline absent ({baseline!r}) for: {', '.join(absent)}")
    for d in datasets:
        horizons = {s.horizon for (dd, _), ss in groups.items() if dd == d for s in ss}
        if len(horizons) != 1:
            raise ConfigError(f"dataset {d!r} mixes horizons {sorted(horizons)}")
    cells, means = [], defaultdict(dict)
    for (d, a), ss in sorted(groups.items()):
        ss = sorted(ss, key=lambda s: s.trial)
        cr = np.array([s.cumulative_regret for s in ss])
        base = [s.cumulative_regret for s in groups[(d, baseline)]]
        norm = normalized_cr(cr, base)
        # ratio of means, so the baseline cell is exactly 100 rather than 100 +- 1 ulp
        value = 100.0 * (cr.mean() / np.mean(base))
        sr = np.array([s.simple_regret for s in ss])
        cells.append(CellSummary(d, a, len(ss), float(value), standard_error(norm), float(cr.mean()),
                                 float(sr.mean()), standard_error(sr)))
        means[d][a] = float(value)
    ranks, mean_rank, mean_value = rank_agents(means)
    for c in cells:
        c.rank = ranks[c.dataset][c.agent]
    return AggregateReport(cells, mean_rank, mean_value, datasets, sorted(mean_rank))


# ---------------------------------------------------------------------------
# histogram traces


@dataclass
class HistogramTrace:
    steps: list[int]
    samples: np.ndarray  # len(steps) x S
    bin_edges: np.ndarray
    counts: np.ndarray  # len(steps) x bins
    action: int
    mode: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "bin_left", "bin_right", "count"])
        for step, row in zip(self.steps, self.counts):
            for left, right, c in zip(self.bin_edges[:-1], self.bin_edges[1:], row):
                w.writerow([step, _fmt(float(left)), _fmt(float(right)), int(c)])
        return buf.getvalue()


# spreads narrower than this (relative to the values) are drawn as a single spike
SPIKE_RESOLUTION = 1e-4


def shared_bins(samples: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(samples.min()), float(samples.max())
    if hi - lo <= SPIKE_RESOLUTION * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 0.5, mid + 0.5
        bins += 1 - bins % 2  # odd count so the spike sits inside the centre bin
    return np.linspace(lo, hi, bins + 1)


def histogram_trace(agent, env: BanditEnvironment, contexts: np.ndarray, action: int, steps: Iterable[int],
                    num_samples: int = 2000, mode: str = "repeat", bins: int = 50, seed: int = 0,
                    horizon: int | None = None) -> HistogramTrace:
    """Mean-reward samples for fixed contexts, recorded while the agent plays ``env``.

    ``mode="repeat"`` draws ``num_samples`` samples for the single context;
    ``mode="per-context"`` takes one sample for each row of ``contexts``.
    Step t means "after t observations". Bins are shared by all steps.
    """
    if not hasattr(agent, "sample_mean_rewards"):
        raise ConfigError(f"agent {getattr(agent, 'name', agent)!r} has no mean-reward sampler; "
                          "histogram traces need a local-uncertainty agent")
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    if mode == "repeat":
        if len(contexts) != 1:
            raise ConfigError("repeat mode takes exactly one context")
        if num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        query = np.repeat(contexts, num_samples, axis=0)
    elif mode == "per-context":
        query = contexts
    else:
        raise ConfigError(f"unknown trace mode {mode!r}")
    if not 0 <= action < agent.num_actions:
        raise ConfigError(f"action {action} outside [0, {agent.num_actions})")
    wanted = sorted(set(int(s) for s in steps))
    T = env.horizon if horizon is None else horizon
    if not wanted or wanted[0] < 0 or wanted[-1] > T:
        raise ConfigError(f"trace steps must lie in [0, {T}]")
    rng = np.random.default_rng(seed)
    recorded: dict[int, np.ndarray] = {}

    def record(t, ag):
        if t in wanted and t not in recorded:
            recorded[t] = ag.sample_mean_rewards(query, rng)[:, action]

    if wanted[-1] == 0:
        record(0, agent)
    else:
        run_trial(env, agent, wanted[-1], callback=record)
    samples = np.stack([recorded[t] for t in wanted])
    edges = shared_bins(samples, bins)
    counts = np.stack([np.histogram(s, bins=edges)[0] for s in samples])
    return HistogramTrace(wanted, samples, edges, counts, action, mode)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


TRIAL_COLUMNS = [f for f in TrialSummary.__dataclass_fields__]


def trials_csv(rows: Iterable[TrialSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for s in sorted(rows, key=lambda s: (s.dataset, s.agent, s.trial)):
        w.writerow([_fmt(getattr(s, c)) for c in TRIAL_COLUMNS])
    return buf.getvalue()


def read_trials_csv(text: str) -> list[TrialSummary]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        try:
            out.append(TrialSummary(row["dataset"], row["agent"], int(row["trial"]), int(row["env_seed"]),
                                    int(row["agent_seed"]), int(row["horizon"]), float(row["cumulative_regret"]),
                                    float(row["simple_regret"])))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"malformed trials.csv row {row}: {exc}") from exc
    return out


def regret_curve_csv(results: Sequence[TrialResult]) -> str:
    steps, mean, se = regret_curve(results)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "mean", "se"])
    for s, m, e in zip(steps, mean, se):
        w.writerow([int(s), _fmt(m), _fmt(e)])
    return buf.getvalue()
