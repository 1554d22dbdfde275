"""Conjugate Bayesian linear regression agents: LinFullPost and Neural Linear."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .. import ndcore as nd
from ..ndcore import NumericError
from .base import AgentRngs, ReplayBuffer, argmax_first


@dataclass(frozen=True)
class NigPrior:
    a0: float = 6.0
    b0: float = 6.0
    lam: float = 0.25  # prior precision multiplier on the coefficients


class NigPosterior:
    """Normal-Inverse-Gamma posterior of ``y = [x, 1] . beta + eps``.

    Prior: ``sigma^2 ~ IG(a0, b0)``, ``beta | sigma^2 ~ N(0, sigma^2 / lam I)``.
    The state is kept as sufficient statistics so that rank-1 and batch updates
    agree exactly up to summation order.
    """

    def __init__(self, dim: int, prior: NigPrior = NigPrior()):
        if prior.a0 <= 0 or prior.b0 <= 0 or prior.lam <= 0:
            raise ValueError("NIG prior parameters must be positive")
        self.dim = dim
        self.prior = prior
        p = dim + 1
        self.precision = prior.lam * np.eye(p)
        self.xty = np.zeros(p)
        self.yty = 0.0
        self.count = 0
        self._mean = None
        self._chol = None

    @staticmethod
    def augment(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        ones = np.ones(x.shape[:-1] + (1,))
        return np.concatenate([x, ones], axis=-1)

    def _invalidate(self):
        self._mean = None
        self._chol = None

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of the precision matrix."""
        if self._chol is None:
            try:
                self._chol = linalg.cholesky(self.precision, lower=True)
            except linalg.LinAlgError as exc:
                raise NumericError(f"precision matrix is not positive definite: {exc}") from exc
        return self._chol

    @property
    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = linalg.cho_solve((self.chol, True), self.xty)
        return self._mean

    @property
    def a(self) -> float:
        return self.prior.a0 + 0.5 * self.count

    @property
    def b(self) -> float:
        mu = self.mean
        return self.prior.b0 + 0.5 * max(self.yty - float(mu @ self.precision @ mu), 0.0)

    def update(self, x, y: float) -> "NigPosterior":
        return nig_update(self, x, y)

    def update_batch(self, X, y) -> "NigPosterior":
        X = self.augment(np.atleast_2d(X))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("non-finite regression data")
        self.precision = self.precision + X.T @ X
        self.xty = self.xty + X.T @ y
        self.yty += float(y @ y)
        self.count += len(y)
        self._invalidate()
        return self

    def reset(self) -> "NigPosterior":
        self.__init__(self.dim, self.prior)
        return self


def nig_update(post: NigPosterior, x, r: float) -> NigPosterior:
    """Rank-1 conjugate update with one (context, reward) pair."""
    xt = post.augment(x)
    if not (np.isfinite(xt).all() and np.isfinite(r)):
        raise ValueError("non-finite regression data")
    post.precision = post.precision + np.outer(xt, xt)
    post.xty = post.xty + xt * r
    post.yty += float(r) ** 2
    post.count += 1
    post._invalidate()
    return post


def nig_sample(post: NigPosterior, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Draw ``sigma^2 ~ IG(a, b)`` then ``beta ~ N(mean, sigma^2 precision^-1)``."""
    sigma2 = post.b / rng.gamma(post.a)
    xi = rng.standard_normal(post.dim + 1)
    beta = post.mean + np.sqrt(sigma2) * linalg.solve_triangular(post.chol, xi, lower=True, trans="T")
    return beta, float(sigma2)


def linfullpost_act(posteriors: list[NigPosterior], x, rng: np.random.Generator) -> int:
    xt = NigPosterior.augment(x)
    values = np.array([xt @ nig_sample(p, rng)[0] for p in posteriors])
    return argmax_first(values)


class LinFullPostAgent:
    name = "linfullpost"

    def __init__(self, context_dim: int, num_actions: int, prior: NigPrior = NigPrior(), seed=None):
        self.context_dim = context_dim
        self.num_actions = num_actions
        self.prior = prior
        self.rng = AgentRngs.from_seed(seed).act
        self.posteriors = [NigPosterior(context_dim, prior) for _ in range(num_actions)]

    def act(self, context) -> int:
        return linfullpost_act(self.posteriors, context, self.rng)

    def observe(self, context, action: int, reward: float) -> None:
        nig_update(self.posteriors[action], context, reward)

    def config(self) -> dict:
        return asdict(self.prior)


@dataclass(frozen=True)
class NeuralLinearConfig:
    hidden: tuple[int, ...] = (100, 100)
    train_every: int = 20
    train_steps: int = 40
    batch_size: int = 512
    lr: float = 1e-3
    a0: float = 6.0
    b0: float = 6.0
    lam: float = 0.25


class NeuralLinearAgent:
    """Thompson sampling with a NIG head on the last hidden layer of an MLP.

    The head is updated after every observation; the network is retrained by
    masked squared error every ``train_every`` steps, after which all heads
    are rebuilt from the full buffer with the new features.
    """

    name = "neural-linear"

    def __init__(self, context_dim: int, num_actions: int, config: NeuralLinearConfig = NeuralLinearConfig(),
                 seed=None):
        self.context_dim = context_dim
        self.num_actions = num_actions
        self.cfg = config
        self.rngs = AgentRngs.from_seed(seed)
        self.body = nd.Mlp(nd.MlpSpec((context_dim, *config.hidden)), self.rngs.init)
        self.head = nd.Mlp(nd.MlpSpec((config.hidden[-1], num_actions)), self.rngs.init)
        self.optimizer = nd.Adam(self.body.params + self.head.params, lr=config.lr)
        self.prior = NigPrior(config.a0, config.b0, config.lam)
        self.feature_dim = config.hidden[-1]
        self.posteriors = [NigPosterior(self.feature_dim, self.prior) for _ in range(num_actions)]
        self.buffer = ReplayBuffer(context_dim, num_actions)

    def features(self, contexts) -> np.ndarray:
        return nd.relu(self.body(np.asarray(contexts, dtype=np.float64))).data

    def act(self, context) -> int:
        return linfullpost_act(self.posteriors, self.features(context), self.rngs.act)

    def observe(self, context, action: int, reward: float) -> None:
        self.buffer.append(context, action, reward)
        nig_update(self.posteriors[action], self.features(context), reward)
        if len(self.buffer) % self.cfg.train_every == 0:
            self.train(self.cfg.train_steps)
            self.rebuild_posteriors()

    def masked_mse(self, batch) -> nd.Tensor:
        pred = self.head(nd.relu(self.body(batch.contexts)))
        err = (pred - batch.reward_vectors) * batch.masks
        return nd.square(err).sum(axis=1).mean()

    def train(self, steps: int) -> None:
        params = self.optimizer.params
        for _ in range(steps):
            idx = self.buffer.sample_indices(self.cfg.batch_size, self.rngs.train)
            loss = self.masked_mse(self.buffer.masked_batch(idx))
            self.optimizer.step(nd.backward(loss, params))

    def rebuild_posteriors(self) -> None:
        feats = self.features(self.buffer.contexts)
        actions, rewards = self.buffer.actions, self.buffer.rewards
        for a, post in enumerate(self.posteriors):
            post.reset()
            sel = actions == a
            if sel.any():
                post.update_batch(feats[sel], rewards[sel])

    def named_parameters(self) -> list[tuple[str, nd.Tensor]]:
        return ([(f"body.{i}", p) for i, p in enumerate(self.body.params)]
                + [(f"head.{i}", p) for i, p in enumerate(self.head.params)])

    def config(self) -> dict:
        return asdict(self.cfg)
