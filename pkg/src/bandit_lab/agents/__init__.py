"""Bandit policies and the factory that builds them from an id string."""

from __future__ import annotations

from dataclasses import fields, replace

from .base import Agent, AgentRngs, MaskedBatch, ReplayBuffer, UniformAgent, argmax_first, uniform_act
from .linear import (
    LinFullPostAgent,
    NeuralLinearAgent,
    NeuralLinearConfig,
    NigPosterior,
    NigPrior,
    linfullpost_act,
    nig_sample,
    nig_update,
)
from .local import (
    LocalConfig,
    LocalUncertaintyAgent,
    LuGaussModel,
    LuSiviModel,
    load_checkpoint,
    local_objective,
    lu_gauss_agent,
    lu_sivi_agent,
    save_checkpoint,
)

AGENT_IDS = ("uniform", "linfullpost", "neural-linear", "lu-gauss", "lu-sivi",
             "lu-gauss-ablation", "lu-sivi-ablation")
LOCAL_AGENT_IDS = AGENT_IDS[3:]


def _pick(cls, params: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in params.items() if k in names}


def make_agent(agent_id: str, context_dim: int, num_actions: int, seed=None, params: dict | None = None):
    """Build a fresh agent. Keys in ``params`` that the agent does not use are ignored."""
    params = dict(params or {})
    if agent_id == "uniform":
        return UniformAgent(context_dim, num_actions, seed)
    if agent_id == "linfullpost":
        return LinFullPostAgent(context_dim, num_actions, NigPrior(**_pick(NigPrior, params)), seed)
    if agent_id == "neural-linear":
        return NeuralLinearAgent(context_dim, num_actions,
                                 replace(NeuralLinearConfig(), **_pick(NeuralLinearConfig, params)), seed)
    if agent_id in LOCAL_AGENT_IDS:
        variant = agent_id.split("-")[1]
        cfg = replace(LocalConfig(variant=variant, ablation=agent_id.endswith("-ablation")),
                      **{k: v for k, v in _pick(LocalConfig, params).items() if k not in ("variant", "ablation")})
        return LocalUncertaintyAgent(context_dim, num_actions, cfg, seed)
    raise ValueError(f"unknown agent {agent_id!r}; choose from {', '.join(AGENT_IDS)}")


__all__ = [
    "AGENT_IDS", "LOCAL_AGENT_IDS", "Agent", "AgentRngs", "LinFullPostAgent", "LocalConfig",
    "LocalUncertaintyAgent", "LuGaussModel", "LuSiviModel", "MaskedBatch", "NeuralLinearAgent",
    "NeuralLinearConfig", "NigPosterior", "NigPrior", "ReplayBuffer", "UniformAgent", "argmax_first",
    "linfullpost_act", "load_checkpoint", "local_objective", "lu_gauss_agent", "lu_sivi_agent",
    "make_agent", "nig_sample", "nig_update", "save_checkpoint", "uniform_act",
]
