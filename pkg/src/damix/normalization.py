"""Batch normalization with per-domain branches and instance rectification.

Each domain owns a full normalization branch: affine parameters, running
statistics, and a small rectifier matrix. In training mode a batch is
split by domain tag, each group is standardized with its own branch, and
every sample's affine output is scaled channel-wise by a sigmoid gate
computed from that sample's own channel statistics. With the rectifier
at zero the gate is exactly 0.5 everywhere, so the rectified output is
half the plain domain-branch output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import (
    ConfigError,
    DegenerateBatchError,
    DomainLookupError,
    ShapeError,
)
from .numerics import Tensor

__all__ = [
    "BnParams",
    "RunningStats",
    "RdsbnBranch",
    "RdsbnState",
    "SingleBranchNormalizer",
    "bn_forward",
    "update_running_stats",
    "rectifier_weights",
    "rdsbn_forward",
    "eval_branch_select",
    "save_state",
    "load_state",
]


@dataclass
class BnParams:
    """Per-channel affine (gamma, beta) plus the branch constants."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5
    momentum_alpha: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not 0.0 <= self.momentum_alpha <= 1.0:
            raise ConfigError(f"momentum_alpha must lie in [0, 1], got {self.momentum_alpha}")
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ShapeError(
                f"gamma and beta must be equal-extent vectors, got {self.gamma.shape} and {self.beta.shape}"
            )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class RunningStats:
    """Moving-average channel statistics used for eval-mode standardization."""

    mean: Tensor
    var: Tensor
    step: int = 0

    @classmethod
    def initial(cls, channels: int) -> "RunningStats":
        return cls(mean=Tensor(np.zeros(channels)), var=Tensor(np.ones(channels)), step=0)


def update_running_stats(stats: RunningStats, batch_mean, batch_var, alpha: float) -> RunningStats:
    """New stats pulled toward the batch values by rate alpha: (1-a)*old + a*new."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    m = np.asarray(batch_mean.data if isinstance(batch_mean, Tensor) else batch_mean, dtype=np.float64)
    v = np.asarray(batch_var.data if isinstance(batch_var, Tensor) else batch_var, dtype=np.float64)
    if m.shape != stats.mean.shape or v.shape != stats.var.shape:
        raise ShapeError(
            f"batch statistics shapes {m.shape}/{v.shape} do not match stored {stats.mean.shape}"
        )
    return RunningStats(
        mean=Tensor((1.0 - alpha) * stats.mean.data + alpha * m),
        var=Tensor((1.0 - alpha) * stats.var.data + alpha * v),
        step=stats.step + 1,
    )


def _stat_axes(x: Tensor) -> tuple:
    if x.ndim == 3:
        return (0, 2)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"expected a rank-2 or rank-3 input, got shape {x.shape}")


def _per_channel(vec: Tensor, rank: int) -> Tensor:
    shape = (1, vec.shape[0]) if rank == 2 else (1, vec.shape[0], 1)
    return nx.reshape(vec, shape)


def bn_forward(x: Tensor, params: BnParams, stats: RunningStats, mode: str) -> Tensor:
    """Standardize per channel, then apply the affine.

    Train mode uses batch statistics over the batch and spatial axes and
    folds them into the running stats. Eval mode standardizes with the
    stored running statistics and leaves them untouched.
    """
    axes = _stat_axes(x)
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, parameters have {params.channels}")
    if mode == "train":
        count = x.shape[0] * (x.shape[2] if x.ndim == 3 else 1)
        if count < 2:
            raise DegenerateBatchError(
                f"training batch provides {count} element(s) per channel; variance needs at least 2"
            )
        mu = nx.mean(x, axis=axes, keepdims=True)
        v = nx.var(x, axis=axes, keepdims=True)
        core = nx.div(nx.sub(x, mu), nx.sqrt(nx.add(v, params.eps)))
        batch_mean = np.mean(x.data, axis=axes)
        batch_var = np.var(x.data, axis=axes)
        updated = update_running_stats(stats, batch_mean, batch_var, params.momentum_alpha)
        stats.mean, stats.var, stats.step = updated.mean, updated.var, updated.step
    elif mode == "eval":
        mu = _per_channel(stats.mean, x.ndim)
        v = _per_channel(stats.var, x.ndim)
        core = nx.div(nx.sub(x, mu), nx.sqrt(nx.add(v, params.eps)))
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return nx.add(nx.mul(_per_channel(params.gamma, x.ndim), core), _per_channel(params.beta, x.ndim))


def rectifier_weights(x_n: Tensor, rectifier: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel gate for one sample: sigmoid(1_M . (r . [mu_n; sigma_n])).

    The sample's channel means and standard deviations form a 2 x C
    matrix; the rank-M rectifier mixes the two rows and the all-ones row
    vector collapses the M copies before the sigmoid. Output lies
    strictly inside (0, 1).
    """
    if x_n.ndim != 2:
        raise ShapeError(f"expected one sample of shape (C, L), got {x_n.shape}")
    if rectifier.ndim != 2 or rectifier.shape[1] != 2:
        raise ShapeError(f"rectifier must have shape (M, 2), got {rectifier.shape}")
    channels = x_n.shape[0]
    mu = nx.mean(x_n, axis=1)
    sigma = nx.sqrt(nx.add(nx.var(x_n, axis=1), eps))
    stacked = nx.concat([nx.reshape(mu, (1, channels)), nx.reshape(sigma, (1, channels))], axis=0)
    ones_row = Tensor(np.ones((1, rectifier.shape[0])))
    collapsed = nx.matmul(ones_row, nx.matmul(rectifier, stacked))
    return nx.reshape(nx.sigmoid(collapsed), (channels,))


def _batched_gate(x_group: Tensor, rectifier: Tensor, eps: float) -> Tensor:
    # Same math as rectifier_weights for every sample at once: the
    # all-ones collapse reduces the rank-M rectifier to its column sums.
    mu = nx.mean(x_group, axis=2)
    sigma = nx.sqrt(nx.add(nx.var(x_group, axis=2), eps))
    sums = nx.sum(rectifier, axis=0)
    s_mu = nx.reshape(nx.take(sums, [0]), (1, 1))
    s_sigma = nx.reshape(nx.take(sums, [1]), (1, 1))
    return nx.sigmoid(nx.add(nx.mul(mu, s_mu), nx.mul(sigma, s_sigma)))


@dataclass
class RdsbnBranch:
    params: BnParams
    stats: RunningStats
    rectifier: Tensor


class RdsbnState:
    """One normalization branch per registered domain."""

    def __init__(self, channels: int, domains, rank: int = 1, eps: float = 1e-5, momentum_alpha: float = 0.1):
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        if rank < 1:
            raise ConfigError(f"rectifier rank must be positive, got {rank}")
        self.channels = channels
        self.rank = rank
        self.eps = eps
        self.momentum_alpha = momentum_alpha
        self.branches: dict[int, RdsbnBranch] = {}
        for d in domains:
            self.register_domain(int(d))

    def register_domain(self, domain: int) -> RdsbnBranch:
        if domain in self.branches:
            raise ConfigError(f"domain {domain} already has a branch")
        branch = RdsbnBranch(
            params=BnParams(
                gamma=Tensor(np.ones(self.channels), requires_grad=True),
                beta=Tensor(np.zeros(self.channels), requires_grad=True),
                eps=self.eps,
                momentum_alpha=self.momentum_alpha,
            ),
            stats=RunningStats.initial(self.channels),
            rectifier=Tensor(np.zeros((self.rank, 2)), requires_grad=True),
        )
        self.branches[domain] = branch
        return branch

    def branch(self, domain: int) -> RdsbnBranch:
        try:
            return self.branches[int(domain)]
        except KeyError:
            raise DomainLookupError(f"no normalization branch registered for domain {domain}") from None

    @property
    def domains(self) -> list:
        return sorted(self.branches)


def rdsbn_forward(x: Tensor, domain_ids, state: RdsbnState, mode: str, rectify: bool = True) -> Tensor:
    """Group samples by domain, normalize each group with its branch, rectify.

    Output order matches input order. With rectify=False this is plain
    domain-specific normalization (the pre-adaptation configuration).
    """
    if x.ndim != 3:
        raise ShapeError(f"expected input of shape (N, C, L), got {x.shape}")
    ids = np.asarray(domain_ids, dtype=np.int64)
    if ids.shape != (x.shape[0],):
        raise ShapeError(f"domain tags shape {ids.shape} does not match batch extent {x.shape[0]}")
    pieces = []
    order = []
    for domain in np.unique(ids):
        branch = state.branch(int(domain))
        members = np.flatnonzero(ids == domain)
        if mode == "train" and members.size < 2:
            raise DegenerateBatchError(
                f"domain {domain} contributes {members.size} sample(s); training statistics need at least 2"
            )
        group = nx.take(x, members, axis=0)
        normalized = bn_forward(group, branch.params, branch.stats, mode)
        if rectify:
            gate = _batched_gate(group, branch.rectifier, branch.params.eps)
            normalized = nx.mul(normalized, nx.reshape(gate, (members.size, x.shape[1], 1)))
        pieces.append(normalized)
        order.append(members)
    order = np.concatenate(order)
    stacked = pieces[0] if len(pieces) == 1 else nx.concat(pieces, axis=0)
    return nx.take(stacked, np.argsort(order), axis=0)


class SingleBranchNormalizer:
    """Eval-mode normalizer pinned to one branch, applied to every sample."""

    def __init__(self, branch: RdsbnBranch):
        self._branch = branch

    def __call__(self, x: Tensor, rectify: bool = True) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"expected input of shape (N, C, L), got {x.shape}")
        out = bn_forward(x, self._branch.params, self._branch.stats, "eval")
        if rectify:
            gate = _batched_gate(x, self._branch.rectifier, self._branch.params.eps)
            out = nx.mul(out, nx.reshape(gate, (x.shape[0], x.shape[1], 1)))
        return out


def eval_branch_select(state: RdsbnState, target_domain: int) -> SingleBranchNormalizer:
    """Normalizer that ignores domain tags and applies only the target branch."""
    return SingleBranchNormalizer(state.branch(target_domain))


# ---------------------------------------------------------------------------
# Checkpointing

_FIELDS = ("gamma", "beta", "mean", "var", "rectifier")


def save_state(state: RdsbnState, directory) -> None:
    """Write one tensor file per branch field plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "channels": state.channels,
        "rank": state.rank,
        "eps": state.eps,
        "momentum_alpha": state.momentum_alpha,
        "domains": state.domains,
        "steps": {str(d): state.branch(d).stats.step for d in state.domains},
    }
    for d in state.domains:
        branch = state.branch(d)
        tensors = (branch.params.gamma, branch.params.beta, branch.stats.mean, branch.stats.var, branch.rectifier)
        for field, tensor in zip(_FIELDS, tensors):
            nx.save_tensor(directory / f"branch{d}.{field}.dmx", tensor)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_state(directory) -> RdsbnState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    state = RdsbnState(
        channels=manifest["channels"],
        domains=[],
        rank=manifest["rank"],
        eps=manifest["eps"],
        momentum_alpha=manifest["momentum_alpha"],
    )
    for d in manifest["domains"]:
        branch = state.register_domain(int(d))
        loaded = {f: nx.load_tensor(directory / f"branch{d}.{f}.dmx") for f in _FIELDS}
        branch.params.gamma = Tensor(loaded["gamma"].data, requires_grad=True)
        branch.params.beta = Tensor(loaded["beta"].data, requires_grad=True)
        branch.stats.mean = loaded["mean"]
        branch.stats.var = loaded["var"]
        branch.stats.step = int(manifest["steps"][str(d)])
        branch.rectifier = Tensor(loaded["rectifier"].data, requires_grad=True)
    return state
