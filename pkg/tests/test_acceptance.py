"""Acceptance criteria 1-13.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts. Criteria 8-13 share cached desk-scale runs: 2000 steps, 5
trials, master seed 0, driven through the same code path as ``bandit-lab run``.
"""

from __future__ import annotations

import math
import time
from functools import lru_cache

import numpy as np
from conftest import data_root

from bandit_lab import cli
from bandit_lab import ndcore as nd
from bandit_lab.agents import (
    LocalConfig,
    LocalUncertaintyAgent,
    NigPosterior,
    UniformAgent,
    local_objective,
    nig_update,
)
from bandit_lab.agents.base import MaskedBatch
from bandit_lab.agents.local import LuSiviModel
from bandit_lab.dists import DiagGaussian, kl_diag, logpdf
from bandit_lab.envs import DataError, DatasetTable, classification_env
from bandit_lab.harness import TrialSummary, aggregate, run_trial, simple_regret, standard_error, trial_seeds

DESK = {"horizon": 2000, "trials": 5, "seed": 0}
SYNTHETIC = {"wheel"}
LU_AGENTS = ("lu-gauss", "lu-sivi", "lu-gauss-ablation", "lu-sivi-ablation")
WALL: dict[tuple[str, str], float] = {}


def record(log: dict, n: int, ok: bool, detail: str) -> None:
    log[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------------------
# desk-scale runs


class DatasetUnavailable(Exception):
    pass


def desk_data_path(dataset: str) -> str:
    if dataset in SYNTHETIC:
        return ""
    root = data_root()
    if root is None:
        raise DatasetUnavailable(f"{dataset}: no data directory (set $BANDIT_LAB_DATA)")
    try:
        cli.resolve_data(dataset, str(root))
    except DataError as exc:
        raise DatasetUnavailable(str(exc)) from exc
    return str(root)


@lru_cache(maxsize=None)
def desk_run(dataset: str, agent: str) -> tuple[TrialSummary, ...]:
    cfg = cli.ExperimentConfig(dataset=dataset, agent=agent, data_path=desk_data_path(dataset), **DESK).validate()
    start = time.perf_counter()
    rows = tuple(TrialSummary.from_result(r) for r in cli.run_experiment(cfg))
    WALL[dataset, agent] = time.perf_counter() - start
    return rows


def desk_report(datasets, agents):
    rows = []
    for d in datasets:
        for a in ("uniform", *agents):
            rows.extend(desk_run(d, a))
    return aggregate(rows)


def cell_text(report, dataset: str, agent: str) -> str:
    c = report.cell(dataset, agent)
    return f"{agent} {c.normalized_mean:.2f}+-{c.normalized_se:.2f} ({WALL.get((dataset, agent), 0.0) / 60:.1f} min)"


# ---------------------------------------------------------------------------
# property-based criteria


def relu_pattern(params, x: np.ndarray) -> np.ndarray:
    h, pats = x, []
    for k in range(0, len(params) - 2, 2):
        pre = h @ params[k].data + params[k + 1].data
        pats.append((pre > 0).ravel())
        h = np.maximum(pre, 0.0)
    return np.concatenate(pats) if pats else np.zeros(0, bool)


def test_criterion_01_autodiff_matches_finite_differences(acceptance_log):
    h, worst, straddled, total = 1e-5, 0.0, 0, 0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        widths = tuple(int(w) for w in rng.integers(1, 6, size=rng.integers(2, 5)))
        net = nd.Mlp(nd.MlpSpec(widths, output_link=("identity", "exp")[i % 2]), rng)
        x, y = rng.standard_normal((6, widths[0])), rng.standard_normal((6, widths[-1]))

        def loss():
            return nd.tmean(nd.square(net(x) - y))

        grads = nd.backward(loss(), net.params)
        for p, g in zip(net.params, grads):
            for j in np.ndindex(p.shape):
                old = p.data[j]
                p.data[j] = old + h
                up, pat_up = float(loss().data), relu_pattern(net.params, x)
                p.data[j] = old - h
                down, pat_down = float(loss().data), relu_pattern(net.params, x)
                p.data[j] = old
                total += 1
                # a stencil across a ReLU kink is not a derivative oracle
                if not np.array_equal(pat_up, pat_down):
                    straddled += 1
                    continue
                fd = (up - down) / (2 * h)
                scale = max(abs(g[j]), abs(fd))
                if scale > 0:
                    worst = max(worst, abs(g[j] - fd) / scale)
    ok = worst < 1e-5 and straddled <= 0.05 * total
    record(acceptance_log, 1, ok, f"max rel err {worst:.2e} < 1e-5 over 100 MLPs "
                                  f"({total} coords, {straddled} kink-straddling stencils excluded)")


def test_criterion_02_kl_matches_monte_carlo(acceptance_log):
    rng = np.random.default_rng(2)
    worst, M = 0.0, 20_000
    for _ in range(50):
        k = int(rng.integers(1, 6))
        q = DiagGaussian(rng.normal(0, 1, k), rng.uniform(0.3, 2.0, k))
        p = DiagGaussian(rng.normal(0, 1, k), rng.uniform(0.3, 2.0, k))
        z = q.mean.data + q.std.data * rng.standard_normal((M, k))
        ratio = (logpdf(q, z).data - logpdf(p, z).data).sum(axis=1)
        worst = max(worst, abs(ratio.mean() - kl_diag(q, p)) / (ratio.std(ddof=1) / math.sqrt(M)))
    record(acceptance_log, 2, worst < 3, f"worst |MC - closed form| = {worst:.2f} SE < 3 over 50 pairs")


def set_linear_decoder(model, a, b: float, reward_std: float, prior_sigma: float) -> None:
    """Make T_theta([x, z]) = a . z + b exactly, via relu(z) - relu(-z) unit pairs."""
    w0, b0, w1, b1 = model.theta.params
    for p in (w0, b0, w1, b1):
        p.data[...] = 0.0
    d = model.context_dim
    for j, aj in enumerate(a):
        w0.data[d + j, 2 * j], w0.data[d + j, 2 * j + 1] = 1.0, -1.0
        w1.data[2 * j, 0], w1.data[2 * j + 1, 0] = aj, -aj
    b1.data[0] = b
    model.log_reward_std.data[...] = math.log(reward_std)
    model.log_prior_sigma.data[...] = math.log(prior_sigma)


def per_row_bound(model, x, r, rng, rows: int, chunk: int, num_mixture=None) -> np.ndarray:
    """``rows`` independent single-sample estimates of the objective at one point."""
    out = []
    for _ in range(rows // chunk):
        xs, rs = np.repeat(x[None], chunk, 0), np.full((chunk, 1), r)
        kw = {} if num_mixture is None else {"num_mixture": num_mixture}
        recon, log_ratio = model.objective_terms(xs, rs, np.ones((chunk, 1)), rng, **kw)
        out.append(recon.data + log_ratio.data)
    return np.concatenate(out)


def test_criterion_03_bounds_never_exceed_log_evidence(acceptance_log):
    a, b, s, sigma = np.array([0.8, -1.5]), 0.3, 0.6, 1.25
    xs = np.array([[-1.0], [-0.3], [0.4], [1.2]])
    rs = np.array([0.3, 2.5, -1.7, 4.0])
    evidence = -0.5 * np.log(2 * np.pi * (s**2 + sigma**2 * a @ a)) - 0.5 * (rs - b) ** 2 / (s**2 + sigma**2 * a @ a)
    worst, gaps = -np.inf, []
    for variant in ("gauss", "sivi"):
        agent = LocalUncertaintyAgent(1, 1, LocalConfig(variant=variant, latent_dim=2), seed=3)
        m = agent.model
        set_linear_decoder(m, a, b, s, sigma)
        q_params = [p for _, net in m.networks() for p in net.params]
        adam = nd.Adam(q_params, lr=1e-2)
        batch = MaskedBatch(xs, rs[:, None], np.ones((4, 1)))
        rng = np.random.default_rng(4)
        for trained in (False, True):
            if trained:
                for _ in range(400):
                    adam.step(nd.backward(-local_objective(m, batch, rng), q_params))
            for i in range(4):
                est = per_row_bound(m, xs[i], rs[i], rng, rows=20_000, chunk=2000)
                se = est.std(ddof=1) / math.sqrt(est.size)
                worst = max(worst, (est.mean() - evidence[i]) / se)
                if trained:
                    gaps.append(f"{variant}:{evidence[i] - est.mean():.3f}")
    record(acceptance_log, 3, worst <= 3,
           f"max (bound - log evidence) = {worst:.2f} SE <= 3; trained gaps {' '.join(gaps)}")


def bimodal_sivi(mode: float = 3.0, latent_std: float = 0.5) -> LuSiviModel:
    agent = LocalUncertaintyAgent(1, 1, LocalConfig(variant="sivi", latent_dim=1), seed=5)
    m = agent.model
    set_linear_decoder(m, [1.0], 0.0, 1.0, 1.25)
    w0, b0, w1, b1 = m.phi1.params
    for p in (w0, b0, w1, b1):
        p.data[...] = 0.0
    # psi = mode * (clip(10 eps + 1, 0, 2) - 1), close to +-mode
    w0.data[1, 0], w0.data[1, 1] = 10.0, 10.0
    b0.data[0], b0.data[1] = 1.0, -1.0
    w1.data[0, 0], w1.data[1, 0], b1.data[0] = mode, -mode, -mode
    v0, c0, v1, c1 = m.phi2.params
    v1.data[...] = 0.0
    c1.data[...] = math.log(latent_std)
    return m


def test_criterion_04_surrogate_bound_tightens_with_k(acceptance_log):
    m = bimodal_sivi()
    rng = np.random.default_rng(6)
    stats = {}
    for K in (1, 5, 50):
        est = per_row_bound(m, np.zeros(1), 0.5, rng, rows=100_000, chunk=2000, num_mixture=K)
        stats[K] = (est.mean(), est.std(ddof=1) / math.sqrt(est.size))
    ok = all(stats[k1][0] <= stats[k2][0] + 3 * math.hypot(stats[k1][1], stats[k2][1])
             for k1, k2 in ((1, 5), (5, 50)))
    text = ", ".join(f"K={k}: {mu:.4f}+-{se:.4f}" for k, (mu, se) in stats.items())
    record(acceptance_log, 4, ok, f"mean bound non-decreasing in K over 1e5 estimates ({text})")


def test_criterion_05_nig_batch_sequential_and_slope(acceptance_log):
    rng = np.random.default_rng(7)
    X, y = rng.standard_normal((200, 5)), rng.standard_normal(200)
    batch = NigPosterior(5).update_batch(X, y)
    seq = NigPosterior(5)
    for xi, yi in zip(X, y):
        nig_update(seq, xi, yi)
    diff = max(np.abs(seq.precision - batch.precision).max(), np.abs(seq.mean - batch.mean).max(),
               abs(seq.a - batch.a), abs(seq.b - batch.b))
    x = rng.uniform(-1, 1, (500, 1))
    slope = NigPosterior(1).update_batch(x, 2.0 * x[:, 0] + 0.5).mean[0]
    ok = diff < 1e-10 and abs(slope - 2.0) <= 0.05
    record(acceptance_log, 5, ok, f"batch vs sequential max diff {diff:.1e} < 1e-10; slope {slope:.4f} vs 2 +- 0.05")


def test_criterion_06_cli_rerun_is_byte_identical(acceptance_log, tmp_path):
    configs = [("wheel", "uniform", "300"), ("wheel", "linfullpost", "300"), ("wheel", "lu-gauss", "60"),
               ("wheel", "lu-sivi-ablation", "40")]
    same = []
    for dataset, agent, horizon in configs:
        outs = []
        for rep in range(2):
            out = tmp_path / f"{agent}-{rep}"
            argv = ["run", "--dataset", dataset, "--agent", agent, "--trials", "2", "--horizon", horizon,
                    "--seed", "11", "--out", str(out)]
            assert cli.main(argv) == cli.EXIT_OK
            outs.append((out / "trials.csv").read_bytes())
        same.append(outs[0] == outs[1])
    record(acceptance_log, 6, all(same), f"{sum(same)}/{len(same)} repeated runs byte-identical")


def test_criterion_07_never_selected_outputs_get_zero_gradient(acceptance_log):
    rng = np.random.default_rng(8)
    X = rng.standard_normal((40, 3))
    batch = MaskedBatch(X, np.c_[rng.standard_normal(40), np.zeros((40, 2))], np.c_[np.ones(40), np.zeros((40, 2))])
    checked = []
    for variant in ("gauss", "sivi"):
        for ablation in (False, True):
            m = LocalUncertaintyAgent(3, 3, LocalConfig(variant=variant, ablation=ablation), seed=0).model
            w_out, b_out = m.theta.params[-2:]
            loss = -local_objective(m, batch, np.random.default_rng(0), buffer_size=40)
            gw, gb, gs = nd.backward(loss, [w_out, b_out, m.log_reward_std])
            checked.append(bool(np.all(gw[:, 1:] == 0) and np.all(gb[1:] == 0) and np.all(gs[1:] == 0)
                                and np.any(gw[:, 0] != 0)))
    record(acceptance_log, 7, all(checked), f"exact zeros for unselected actions in {sum(checked)}/4 LU models")


# ---------------------------------------------------------------------------
# desk-scale criteria


def synthetic_classification(C: int, rows: int = 1000, seed: int = 0) -> DatasetTable:
    rng = np.random.default_rng(seed)
    return DatasetTable(rng.standard_normal((rows, 3)), ["f0", "f1", "f2"], rng.integers(0, C, rows),
                        [str(c) for c in range(C)])


def test_criterion_08_uniform_normalizes_to_100(acceptance_log):
    checked, absent = [], []
    rows = []
    for dataset in cli.DATASETS:
        try:
            rows.extend(desk_run(dataset, "uniform"))
            checked.append(dataset)
        except DatasetUnavailable:
            absent.append(dataset)
    table = synthetic_classification(7)
    for s in trial_seeds(DESK["seed"], DESK["trials"]):
        env = classification_env(table, DESK["horizon"], s.env_seed, name="synthetic")
        res = run_trial(env, UniformAgent(3, 7, seed=s.agent_seed), dataset="synthetic", trial=s.trial)
        rows.append(TrialSummary.from_result(res))
    checked.append("synthetic")
    report = aggregate(rows)
    values = {d: report.cell(d, "uniform").normalized_mean for d in checked}
    ok = all(v == 100.0 for v in values.values())
    record(acceptance_log, 8, ok, f"uniform == 100 exactly on {', '.join(checked)}"
                                  + (f"; no data for {', '.join(absent)}" if absent else ""))


def test_criterion_09_mushroom_bands(acceptance_log):
    try:
        rep = desk_report(["mushroom"], ["linfullpost", "lu-gauss", "lu-sivi"])
    except DatasetUnavailable as exc:
        record(acceptance_log, 9, False, f"mushroom unavailable: {exc}")
    lin, gauss, sivi = (rep.cell("mushroom", a).normalized_mean for a in ("linfullpost", "lu-gauss", "lu-sivi"))
    ok = lin < 30 and sivi < 35 and sivi < gauss
    record(acceptance_log, 9, ok, "need linfullpost < 30, lu-sivi < 35, lu-sivi < lu-gauss: "
                                  + "; ".join(cell_text(rep, "mushroom", a) for a in ("linfullpost", "lu-gauss",
                                                                                       "lu-sivi")))


def test_criterion_10_statlog_bands(acceptance_log):
    try:
        rep = desk_report(["statlog"], ["lu-gauss", "lu-sivi"])
    except DatasetUnavailable as exc:
        record(acceptance_log, 10, False, f"statlog unavailable: {exc}")
    gauss, sivi = (rep.cell("statlog", a).normalized_mean for a in ("lu-gauss", "lu-sivi"))
    record(acceptance_log, 10, gauss < 25 and sivi < 25, "need both < 25: "
           + "; ".join(cell_text(rep, "statlog", a) for a in ("lu-gauss", "lu-sivi")))


def test_criterion_11_wheel_bands(acceptance_log):
    rep = desk_report(["wheel"], ["linfullpost", *LU_AGENTS])
    lin = rep.cell("wheel", "linfullpost").normalized_mean
    ok = lin < 70 and all(rep.cell("wheel", a).normalized_mean < 100 for a in LU_AGENTS)
    record(acceptance_log, 11, ok, "need linfullpost < 70, every LU agent < 100: "
           + "; ".join(cell_text(rep, "wheel", a) for a in ("linfullpost", *LU_AGENTS)))


def test_criterion_12_ablation_direction(acceptance_log):
    agents = LU_AGENTS
    parts = []
    try:
        mush = desk_report(["mushroom"], agents)
        parts.append("mushroom: " + "; ".join(cell_text(mush, "mushroom", a) for a in agents))
        rep = desk_report(["mushroom", "statlog"], agents)
    except DatasetUnavailable as exc:
        record(acceptance_log, 12, False, f"needs mushroom + statlog; {exc}. " + " ".join(parts))
    mv = rep.mean_value
    ok = mv["lu-gauss"] <= mv["lu-gauss-ablation"] + 10 and mv["lu-sivi"] <= mv["lu-sivi-ablation"] + 10
    record(acceptance_log, 12, ok, "Mean Value " + ", ".join(f"{a} {mv[a]:.2f}" for a in agents))


def test_criterion_13_simple_regret(acceptance_log):
    C = 7
    table = synthetic_classification(C)
    srs = []
    for s in trial_seeds(DESK["seed"], DESK["trials"]):
        env = classification_env(table, DESK["horizon"], s.env_seed)
        srs.append(simple_regret(run_trial(env, UniformAgent(3, C, seed=s.agent_seed))))
    mean, se = float(np.mean(srs)), standard_error(srs)
    uniform_ok = abs(mean - (1 - 1 / C)) <= 3 * se
    text = f"uniform simple regret {mean:.4f}+-{se:.4f} vs 1-1/C = {1 - 1 / C:.4f}"
    try:
        rep = desk_report(["statlog"], ["lu-gauss", "lu-sivi"])
    except DatasetUnavailable as exc:
        record(acceptance_log, 13, False, f"{text}; statlog part unavailable: {exc}")
    sr = {a: rep.cell("statlog", a).simple_regret_mean for a in ("uniform", "lu-gauss", "lu-sivi")}
    ok = uniform_ok and sr["lu-gauss"] < sr["uniform"] and sr["lu-sivi"] < sr["uniform"]
    record(acceptance_log, 13, ok, f"{text}; statlog " + ", ".join(f"{a} {v:.4f}" for a, v in sr.items()))

