"""Thompson sampling through a context-conditioned latent variable.

Both models share a decoder ``mu_r = T_theta([x, z])`` and a Gaussian reward
likelihood with a learned per-action std. They differ in how ``q(z | x)`` is
built:

* ``LuGaussModel``: ``h = T_phi0(x)``, ``z ~ N(T_phi1(h), T_phi2(h))``.
* ``LuSiviModel``: ``psi = T_phi1([x, eps])`` with ``eps ~ N(0, 4 I)``, then
  ``z ~ N(psi, T_phi2(x))``. The marginal of ``z`` is a continuous mixture,
  trained through the (K+1)-component surrogate bound.

With ``ablation=True`` the q-networks see a vector of ones instead of ``x``,
so ``q`` no longer depends on the context, and the prior/posterior log-ratio
is divided by the buffer size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import ndcore as nd
from ..dists import LOG_2PI, STD_FLOOR, DiagGaussian, log_mean_exp, logpdf
from ..ndcore import ContractError, ShapeError, Tensor
from .base import AgentRngs, MaskedBatch, ReplayBuffer, argmax_first

VARIANTS = ("gauss", "sivi")


@dataclass(frozen=True)
class LocalConfig:
    variant: str = "gauss"
    latent_dim: int = 50
    num_mixture: int = 50  # K, SIVI only
    noise_std: float = 2.0  # SIVI only
    prior_sigma: float = 1.25
    reward_std: float = 1.0
    train_every: int = 20
    train_steps: int = 40
    batch_size: int = 512
    lr: float = 1e-3
    ablation: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for key in ("latent_dim", "num_mixture", "train_every", "train_steps", "batch_size"):
            if getattr(self, key) < 1:
                raise ContractError(f"{key} must be >= 1")
        for key in ("noise_std", "prior_sigma", "reward_std", "lr"):
            if not getattr(self, key) > 0:
                raise ContractError(f"{key} must be > 0")


def _std(t: Tensor) -> Tensor:
    return t + STD_FLOOR


class _LocalModel:
    """Parts shared by both variants: decoder, reward std and prior std."""

    def __init__(self, context_dim: int, num_actions: int, cfg: LocalConfig, rng: np.random.Generator):
        self.context_dim = context_dim
        self.num_actions = num_actions
        self.cfg = cfg
        H = cfg.latent_dim
        self.theta = nd.Mlp(nd.MlpSpec((context_dim + H, 50, num_actions)), rng)
        self.log_reward_std = nd.parameter(np.full(num_actions, math.log(cfg.reward_std)))
        self.log_prior_sigma = nd.parameter(np.full(1, math.log(cfg.prior_sigma)))

    # -- shared pieces ----------------------------------------------------

    def q_input(self, x: np.ndarray) -> np.ndarray:
        return np.ones_like(x) if self.cfg.ablation else x

    def decode(self, x, z) -> Tensor:
        x = nd.as_tensor(x)
        if x.ndim != z.ndim:
            x = nd.Tensor(np.broadcast_to(x.data[..., None, :], z.shape[:-1] + (x.shape[-1],)))
        return self.theta(nd.concat([x, z], axis=-1))

    def prior(self) -> DiagGaussian:
        return DiagGaussian(np.zeros(self.cfg.latent_dim), nd.exp(self.log_prior_sigma))

    def reward_std(self) -> Tensor:
        return nd.exp(self.log_reward_std)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"theta.{i}", p) for i, p in enumerate(self.theta.params)]
        for name, net in self.networks():
            out += [(f"{name}.{i}", p) for i, p in enumerate(net.params)]
        out += [("log_reward_std", self.log_reward_std), ("log_prior_sigma", self.log_prior_sigma)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def networks(self) -> list[tuple[str, nd.Mlp]]:
        raise NotImplementedError

    def sample_latent(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def objective_terms(self, x: np.ndarray, r: np.ndarray, mask: np.ndarray,
                        rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    # -- acting -----------------------------------------------------------

    def sample_mean_rewards(self, contexts, rng: np.random.Generator) -> np.ndarray:
        """One draw of ``mu_r`` per context row; returns ``n x C``."""
        x = np.atleast_2d(np.asarray(contexts, dtype=nd.DTYPE))
        if x.shape[1] != self.context_dim:
            raise ShapeError(f"context dim {x.shape[1]} != {self.context_dim}")
        z = self.sample_latent(x, rng)
        mu = self.decode(x, nd.Tensor(z)).data
        if not np.isfinite(mu).all():
            raise nd.NumericError("sampled mean rewards are not finite")
        return mu

    def reconstruction(self, x, z: Tensor, r: np.ndarray, mask: np.ndarray) -> Tensor:
        """Masked reward log-likelihood, rescaled by the number of actions."""
        mu = self.decode(x, z)
        lp = logpdf(DiagGaussian(mu, self.reward_std()), r)
        return (lp * mask).sum(axis=-1) * float(self.num_actions)


class LuGaussModel(_LocalModel):
    def __init__(self, context_dim: int, num_actions: int, cfg: LocalConfig, rng: np.random.Generator):
        super().__init__(context_dim, num_actions, cfg, rng)
        H = cfg.latent_dim
        self.phi0 = nd.Mlp(nd.MlpSpec((context_dim, 100, 50)), rng)
        self.phi1 = nd.Mlp(nd.MlpSpec((50, 50, H)), rng)
        self.phi2 = nd.Mlp(nd.MlpSpec((50, 50, H), output_link="exp"), rng)

    def networks(self):
        return [("phi0", self.phi0), ("phi1", self.phi1), ("phi2", self.phi2)]

    def posterior(self, x: np.ndarray) -> DiagGaussian:
        h = self.phi0(self.q_input(x))
        return DiagGaussian(self.phi1(h), _std(self.phi2(h)))

    def sample_latent(self, x, rng):
        q = self.posterior(x)
        return q.mean.data + q.std.data * rng.standard_normal(q.mean.shape)

    def objective_terms(self, x, r, mask, rng):
        q = self.posterior(x)
        z = q.mean + q.std * rng.standard_normal(q.mean.shape)
        log_ratio = logpdf(self.prior(), z).sum(axis=-1) - logpdf(q, z).sum(axis=-1)
        return self.reconstruction(x, z, r, mask), log_ratio


class LuSiviModel(_LocalModel):
    def __init__(self, context_dim: int, num_actions: int, cfg: LocalConfig, rng: np.random.Generator):
        super().__init__(context_dim, num_actions, cfg, rng)
        H = cfg.latent_dim
        self.phi1 = nd.Mlp(nd.MlpSpec((2 * context_dim, 100, H)), rng)
        self.phi2 = nd.Mlp(nd.MlpSpec((context_dim, 50, H), output_link="exp"), rng)

    def networks(self):
        return [("phi1", self.phi1), ("phi2", self.phi2)]

    def noise(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        eps = rng.standard_normal(shape + (self.context_dim,))
        eps *= self.cfg.noise_std
        return eps

    def psi(self, x: np.ndarray, eps: np.ndarray) -> Tensor:
        """``T_phi1([x, eps])`` for ``x: n x d`` and ``eps: n x m x d``; returns ``n x m x H``.

        The first layer is split so the ``x`` half is computed once per row.
        """
        d = self.context_dim
        w0, b0, w1, b1 = self.phi1.params
        hx = nd.linear(self.q_input(x), w0[:d], b0)
        out = nd.linear(_broadcast_hidden(hx, eps, w0[d:]), w1, b1)
        if not np.isfinite(out.data).all():
            raise nd.NumericError("mixing network output is not finite")
        return out

    def latent_std(self, x: np.ndarray) -> Tensor:
        return _std(self.phi2(self.q_input(x)))

    def sample_latent(self, x, rng):
        eps = self.noise(rng, (len(x), 1))
        mean = self.psi(x, eps).data[:, 0]
        std = self.latent_std(x).data
        return mean + std * rng.standard_normal(mean.shape)

    def objective_terms(self, x, r, mask, rng, num_mixture: int | None = None):
        K = self.cfg.num_mixture if num_mixture is None else num_mixture
        if K < 1:
            raise ContractError("the surrogate bound needs K >= 1")
        n, H = len(x), self.cfg.latent_dim
        psi = self.psi(x, self.noise(rng, (n, K + 1)))
        std = self.latent_std(x)
        z = psi[:, 0] + std * rng.standard_normal((n, H))
        # log q under each of the K+1 components; gradients flow through all of them
        log_q = _component_logpdf(z, psi, std)
        log_ratio = logpdf(self.prior(), z).sum(axis=-1) - log_mean_exp(log_q, axis=-1)
        return self.reconstruction(x, z, r, mask), log_ratio


def _broadcast_hidden(hx: Tensor, eps: np.ndarray, w_eps: Tensor) -> Tensor:
    """Fused ``relu(hx[:, None, :] + eps @ w_eps)`` for ``hx: n x m``, ``eps: n x k x d``."""
    out = eps @ w_eps.data
    out += hx.data[:, None, :]
    np.maximum(out, 0.0, out=out)

    def backward(g):
        g = np.multiply(g, out > 0)
        gw = eps.reshape(-1, eps.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if w_eps.requires_grad else None
        return g.sum(axis=1), gw

    return nd._node(out, (hx, w_eps), backward)


def _component_logpdf(z: Tensor, means: Tensor, std: Tensor) -> Tensor:
    """``log N(z_i; means_ik, diag(std_i^2))`` summed over the last axis; returns ``n x k``.

    Same value as stacking :func:`logpdf` calls, computed as one graph node.
    """
    n, H = std.shape
    zd, sd = z.data[:, None, :], std.data[:, None, :]
    u = zd - means.data
    u /= sd
    out = -0.5 * H * LOG_2PI - np.log(std.data).sum(axis=-1)[:, None] - 0.5 * np.einsum("nkh,nkh->nk", u, u)

    def backward(g):
        gu = u * (g[:, :, None] / sd)  # d/d means
        g_z = -gu.sum(axis=1)
        g_std = np.einsum("nkh,nkh->nh", gu, u) - g.sum(axis=1)[:, None] / std.data
        return g_z, gu, g_std

    return nd._node(out, (z, means, std), backward)


MODELS = {"gauss": LuGaussModel, "sivi": LuSiviModel}


def build_model(context_dim: int, num_actions: int, cfg: LocalConfig, rng: np.random.Generator) -> _LocalModel:
    return MODELS[cfg.variant](context_dim, num_actions, cfg, rng)


def local_objective(model: _LocalModel, batch: MaskedBatch, rng: np.random.Generator,
                    buffer_size: int | None = None) -> Tensor:
    """Minibatch mean of reconstruction plus (possibly rescaled) log-ratio; to be maximized."""
    recon, log_ratio = model.objective_terms(batch.contexts, batch.reward_vectors, batch.masks, rng)
    if model.cfg.ablation:
        if not buffer_size:
            raise ContractError("the ablation objective needs the buffer size")
        log_ratio = log_ratio * (1.0 / buffer_size)
    return (recon + log_ratio).mean()


class LocalUncertaintyAgent:
    """LU-Gauss / LU-SIVI Thompson sampling agent (and their global-z ablations)."""

    def __init__(self, context_dim: int, num_actions: int, config: LocalConfig = LocalConfig(), seed=None):
        self.context_dim = context_dim
        self.num_actions = num_actions
        self.cfg = config
        self.rngs = AgentRngs.from_seed(seed)
        self.model = build_model(context_dim, num_actions, config, self.rngs.init)
        self.optimizer = nd.Adam(self.model.parameters(), lr=config.lr)
        self.buffer = ReplayBuffer(context_dim, num_actions)
        self.train_calls = 0

    @property
    def name(self) -> str:
        return f"lu-{self.cfg.variant}" + ("-ablation" if self.cfg.ablation else "")

    def act_with_sample(self, context) -> tuple[int, np.ndarray]:
        mu = self.model.sample_mean_rewards(context, self.rngs.act)[0]
        return argmax_first(mu), mu

    def act(self, context) -> int:
        return self.act_with_sample(context)[0]

    def sample_mean_rewards(self, contexts, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.model.sample_mean_rewards(contexts, self.rngs.act if rng is None else rng)

    def observe(self, context, action: int, reward: float) -> None:
        self.buffer.append(context, action, reward)
        if len(self.buffer) % self.cfg.train_every == 0:
            self.train(self.cfg.train_steps)

    def train(self, steps: int) -> None:
        params = self.optimizer.params
        for _ in range(steps):
            idx = self.buffer.sample_indices(self.cfg.batch_size, self.rngs.train)
            batch = self.buffer.masked_batch(idx)
            loss = -local_objective(self.model, batch, self.rngs.train, len(self.buffer))
            self.optimizer.step(nd.backward(loss, params))
        self.train_calls += 1

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.model.named_parameters()

    def config(self) -> dict:
        out = asdict(self.cfg)
        if self.cfg.ablation:
            out["ablation_log_ratio_scale"] = "1/buffer_size"
        return out


def lu_gauss_agent(context_dim: int, num_actions: int, seed=None, ablation: bool = False, **overrides):
    cfg = replace(LocalConfig(variant="gauss", ablation=ablation), **overrides)
    return LocalUncertaintyAgent(context_dim, num_actions, cfg, seed)


def lu_sivi_agent(context_dim: int, num_actions: int, seed=None, ablation: bool = False, **overrides):
    cfg = replace(LocalConfig(variant="sivi", ablation=ablation), **overrides)
    return LocalUncertaintyAgent(context_dim, num_actions, cfg, seed)


# ---------------------------------------------------------------------------
# checkpoints: raw little-endian float64 plus a JSON shape manifest


def save_checkpoint(named: list[tuple[str, Tensor]], path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    bin_path, manifest_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset, chunks = [], 0, []
    for name, p in named:
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").ravel())
        offset += p.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    bin_path.write_bytes(flat.tobytes())
    manifest_path.write_text(json.dumps({"dtype": "float64-le", "count": offset, "tensors": entries}, indent=1))
    return bin_path, manifest_path


def load_checkpoint(named: list[tuple[str, Tensor]], path: str | Path) -> None:
    """Load values in place; names and shapes must match exactly."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["count"]:
        raise ShapeError(f"checkpoint holds {flat.size} values, manifest says {manifest['count']}")
    entries = {e["name"]: e for e in manifest["tensors"]}
    if set(entries) != {name for name, _ in named}:
        raise ShapeError("checkpoint tensor names do not match the model")
    for name, p in named:
        e = entries[name]
        if tuple(e["shape"]) != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {e['shape']} vs model {p.shape}")
        p.data[...] = flat[e["offset"]: e["offset"] + p.size].reshape(p.shape)
