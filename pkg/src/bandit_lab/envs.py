"""Benchmark contextual-bandit environments and the tabular loader behind them.

An environment is a pre-drawn, seeded sequence of rounds. Each round carries
the context, the realized reward of every action (the agent only ever sees
the one it picks), the expected reward of every action under the generating
rule, and the best of those expectations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np


class DataError(ValueError):
    """Raised for unreadable, malformed or schema-inconsistent data."""


COLUMN_KINDS = ("categorical", "ordinal", "numeric", "label", "reward", "ignore")


@dataclass(frozen=True)
class Round:
    context: np.ndarray
    rewards: np.ndarray
    expected_rewards: np.ndarray
    optimal_expected: float


class BanditEnvironment:
    """Seeded, replayable stream of :class:`Round` records."""

    def __init__(self, name: str, contexts: np.ndarray, rewards: np.ndarray,
                 expected_rewards: np.ndarray, metadata: Mapping | None = None):
        contexts = np.ascontiguousarray(contexts, dtype=np.float64)
        rewards = np.ascontiguousarray(rewards, dtype=np.float64)
        expected_rewards = np.ascontiguousarray(expected_rewards, dtype=np.float64)
        if contexts.ndim != 2 or rewards.ndim != 2 or rewards.shape != expected_rewards.shape:
            raise DataError("contexts must be T x d and both reward arrays T x C")
        if len(contexts) != len(rewards):
            raise DataError("contexts and rewards disagree on the horizon")
        for arr in (contexts, rewards, expected_rewards):
            if not np.isfinite(arr).all():
                raise DataError(f"{name}: non-finite values in the round stream")
        self.name = name
        self.contexts = contexts
        self.rewards = rewards
        self.expected_rewards = expected_rewards
        self.optimal_expected = expected_rewards.max(axis=1)
        self.metadata = dict(metadata or {})

    @property
    def horizon(self) -> int:
        return len(self.contexts)

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[1]

    def __len__(self) -> int:
        return self.horizon

    def __getitem__(self, t: int) -> Round:
        return Round(self.contexts[t], self.rewards[t], self.expected_rewards[t],
                     float(self.optimal_expected[t]))

    def __iter__(self) -> Iterator[Round]:
        for t in range(self.horizon):
            yield self[t]


# ---------------------------------------------------------------------------
# tabular data


@dataclass
class DatasetTable:
    features: np.ndarray
    feature_names: list[str]
    labels: np.ndarray | None = None
    label_names: list[str] = field(default_factory=list)
    rewards: np.ndarray | None = None
    reward_names: list[str] = field(default_factory=list)
    raw_features: np.ndarray | None = None
    numeric_columns: list[int] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(self.features)

    @property
    def context_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Schema:
    """Column kinds plus parsing options.

    File format: one ``name: kind`` line per column in file order; lines
    starting with ``@`` set options (``@delimiter``, ``@header``,
    ``@label_values``, ``@missing``); ``#`` starts a comment. Rows holding
    the ``@missing`` token in a used column are dropped.
    """

    columns: list[tuple[str, str]]
    delimiter: str = ","
    header: bool = False
    label_values: list[str] | None = None
    options: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "Schema":
        columns: list[tuple[str, str]] = []
        opts: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("@"):
                key, _, value = line[1:].partition(":")
                opts[key.strip()] = value.strip()
                continue
            name, sep, kind = line.partition(":")
            kind = kind.strip()
            if not sep or kind not in COLUMN_KINDS:
                raise DataError(f"schema line {lineno}: expected 'name: kind' with kind in {COLUMN_KINDS}")
            columns.append((name.strip(), kind))
        if not columns:
            raise DataError("schema declares no columns")
        delim = opts.pop("delimiter", ",")
        delim = {"comma": ",", "tab": "\t", "whitespace": " ", "space": " ", "semicolon": ";"}.get(delim, delim)
        header = opts.pop("header", "false").lower() in ("true", "yes", "1")
        labels = opts.pop("label_values", None)
        label_values = [v.strip() for v in labels.split(",")] if labels else None
        return cls(columns, delim, header, label_values, opts)

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        try:
            return cls.parse(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read schema {path}: {exc}") from exc


def _read_rows(path: Path, schema: Schema) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            if schema.delimiter == " ":
                rows = [line.split() for line in fh]
            else:
                rows = [[c.strip() for c in r] for r in csv.reader(fh, delimiter=schema.delimiter)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(c for c in r)]
    if schema.header and rows:
        rows = rows[1:]
    width = len(schema.columns)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i + 1} has {len(r)} cells, schema expects {width}")
    missing = schema.options.get("missing")
    if missing:
        used = [j for j, (_, kind) in enumerate(schema.columns) if kind != "ignore"]
        rows = [r for r in rows if all(r[j] != missing for j in used)]
    return rows


def _standardize(block: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = block.mean(axis=0)
    std = block.std(axis=0)  # population convention (ddof=0)
    safe = np.where(std > 0, std, 1.0)
    return (block - mean) / safe, mean, safe


def load_dataset(path: str | Path, schema: Schema | str | Path) -> DatasetTable:
    """Parse a delimited file into standardized features plus labels or rewards.

    Categorical columns become one-hot groups (categories in sorted order),
    ordinal columns become their sorted-category index, numeric and ordinal
    columns are standardized with population statistics of the loaded rows.
    """
    if not isinstance(schema, Schema):
        schema = Schema.load(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    rows = _read_rows(path, schema)
    if not rows:
        raise DataError(f"{path}: no data rows")
    cols = list(zip(*rows))

    blocks: list[np.ndarray] = []
    names: list[str] = []
    numeric_idx: list[int] = []
    labels = None
    label_names: list[str] = []
    reward_cols: list[np.ndarray] = []
    reward_names: list[str] = []
    categories: dict[str, list[str]] = {}
    for (name, kind), values in zip(schema.columns, cols):
        if kind == "ignore":
            continue
        if kind in ("numeric", "reward"):
            try:
                arr = np.array([float(v) for v in values])
            except ValueError as exc:
                raise DataError(f"column {name!r}: unparseable cell ({exc})") from exc
            if not np.isfinite(arr).all():
                raise DataError(f"column {name!r}: non-finite value")
            if kind == "reward":
                reward_cols.append(arr)
                reward_names.append(name)
            else:
                numeric_idx.append(len(names))
                blocks.append(arr[:, None])
                names.append(name)
        elif kind == "categorical":
            cats = sorted(set(values))
            categories[name] = cats
            index = {c: i for i, c in enumerate(cats)}
            onehot = np.zeros((len(values), len(cats)))
            onehot[np.arange(len(values)), [index[v] for v in values]] = 1.0
            blocks.append(onehot)
            names.extend(f"{name}={c}" for c in cats)
        elif kind == "ordinal":
            cats = sorted(set(values))
            categories[name] = cats
            index = {c: i for i, c in enumerate(cats)}
            numeric_idx.append(len(names))
            blocks.append(np.array([index[v] for v in values], dtype=np.float64)[:, None])
            names.append(name)
        elif kind == "label":
            if labels is not None:
                raise DataError("schema declares more than one label column")
            label_names = schema.label_values or sorted(set(values))
            index = {c: i for i, c in enumerate(label_names)}
            try:
                labels = np.array([index[v] for v in values], dtype=np.int64)
            except KeyError as exc:
                raise DataError(f"label {exc} not among declared label values {label_names}") from exc

    raw = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    features = raw.copy()
    stats: dict = {"standardization": "population (ddof=0), over loaded rows", "categories": categories}
    if numeric_idx:
        features[:, numeric_idx], mean, std = _standardize(raw[:, numeric_idx])
        stats["mean"] = dict(zip([names[i] for i in numeric_idx], mean.tolist()))
        stats["std"] = dict(zip([names[i] for i in numeric_idx], std.tolist()))
    return DatasetTable(
        features=features,
        feature_names=names,
        labels=labels,
        label_names=list(label_names),
        rewards=np.column_stack(reward_cols) if reward_cols else None,
        reward_names=reward_names,
        raw_features=raw,
        numeric_columns=numeric_idx,
        stats=stats,
    )


def _sample_rows(table: DatasetTable, horizon: int, seed, restandardize: bool):
    if table.n_rows == 0:
        raise DataError("empty table")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, table.n_rows, size=horizon)
    contexts = table.features[idx]
    if restandardize and table.numeric_columns and table.raw_features is not None:
        contexts = contexts.copy()
        contexts[:, table.numeric_columns], _, _ = _standardize(table.raw_features[idx][:, table.numeric_columns])
    return rng, idx, contexts


# ---------------------------------------------------------------------------
# environments

MUSHROOM_SAFE = 5.0
MUSHROOM_POISON_BAD = -35.0
MUSHROOM_POISON_BAD_PROB = 0.5


def mushroom_env(table: DatasetTable, horizon: int, seed, poisonous_label: str = "p",
                 restandardize: bool = False) -> BanditEnvironment:
    """Action 0 = do not eat (reward 0), action 1 = eat.

    Eating pays +5 on safe rows; on poisonous rows +5 or -35 with equal odds.
    """
    if table.labels is None:
        raise DataError("mushroom table has no label column")
    if poisonous_label not in table.label_names:
        raise DataError(f"poisonous label {poisonous_label!r} not in {table.label_names}")
    rng, idx, contexts = _sample_rows(table, horizon, seed, restandardize)
    poisonous = table.labels[idx] == table.label_names.index(poisonous_label)
    bad = rng.random(horizon) < MUSHROOM_POISON_BAD_PROB
    eat = np.where(poisonous & bad, MUSHROOM_POISON_BAD, MUSHROOM_SAFE)
    eat_mean = np.where(
        poisonous,
        MUSHROOM_POISON_BAD_PROB * MUSHROOM_POISON_BAD + (1 - MUSHROOM_POISON_BAD_PROB) * MUSHROOM_SAFE,
        MUSHROOM_SAFE,
    )
    rewards = np.column_stack([np.zeros(horizon), eat])
    expected = np.column_stack([np.zeros(horizon), eat_mean])
    return BanditEnvironment("mushroom", contexts, rewards, expected,
                             {"rows": idx.tolist(), "poisonous": poisonous.tolist()})


WHEEL_LOW_MEAN = 1.2
WHEEL_DEFAULT_MEAN = 1.0
WHEEL_HIGH_MEAN = 50.0
WHEEL_STD = 0.01
WHEEL_ACTIONS = 5


def wheel_quadrant_action(x: np.ndarray) -> np.ndarray:
    """Index (1-4) of the action that pays big outside the inner disk.

    Quadrants are numbered counter-clockwise from (+, +); points on an axis
    belong to the quadrant on their counter-clockwise side.
    """
    x = np.atleast_2d(x)
    right, up = x[:, 0] >= 0, x[:, 1] >= 0
    return np.select([right & up, ~right & up, ~right & ~up], [1, 2, 3], default=4)


def wheel_expected_rewards(x: np.ndarray, delta: float) -> np.ndarray:
    x = np.atleast_2d(x)
    expected = np.full((len(x), WHEEL_ACTIONS), WHEEL_DEFAULT_MEAN)
    expected[:, 0] = WHEEL_LOW_MEAN
    outside = np.linalg.norm(x, axis=1) > delta
    rows = np.flatnonzero(outside)
    expected[rows, wheel_quadrant_action(x)[rows]] = WHEEL_HIGH_MEAN
    return expected


def wheel_env(delta: float, horizon: int, seed) -> BanditEnvironment:
    """Contexts uniform on the unit disk; see :func:`wheel_expected_rewards`."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"wheel delta must lie in (0, 1), got {delta}")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    radius = np.sqrt(rng.random(horizon))
    angle = rng.uniform(0.0, 2.0 * math.pi, horizon)
    contexts = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    expected = wheel_expected_rewards(contexts, delta)
    rewards = expected + WHEEL_STD * rng.standard_normal(expected.shape)
    return BanditEnvironment("wheel", contexts, rewards, expected, {"delta": delta})


def classification_env(table: DatasetTable, horizon: int, seed, num_actions: int | None = None,
                       restandardize: bool = False, name: str = "classification") -> BanditEnvironment:
    """Reward 1 for naming the row's class, 0 otherwise."""
    if table.labels is None:
        raise DataError("classification table has no label column")
    C = num_actions or len(table.label_names) or int(table.labels.max()) + 1
    if table.labels.min() < 0 or table.labels.max() >= C:
        raise DataError(f"labels must lie in [0, {C})")
    _, idx, contexts = _sample_rows(table, horizon, seed, restandardize)
    rewards = np.zeros((horizon, C))
    rewards[np.arange(horizon), table.labels[idx]] = 1.0
    return BanditEnvironment(name, contexts, rewards, rewards.copy(), {"rows": idx.tolist()})


def table_reward_env(table: DatasetTable, horizon: int, seed, restandardize: bool = False,
                     name: str = "table") -> BanditEnvironment:
    """Rewards are read straight from the row's reward columns."""
    if table.rewards is None or table.rewards.shape[1] == 0:
        raise DataError("table has no reward columns")
    _, idx, contexts = _sample_rows(table, horizon, seed, restandardize)
    rewards = table.rewards[idx]
    return BanditEnvironment(name, contexts, rewards, rewards.copy(), {"rows": idx.tolist()})
