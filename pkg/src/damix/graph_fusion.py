"""Agent-node graph fusion across domains.

Each domain contributes one agent node: a learned weighted combination
of that domain's in-batch features, tracked by moving average for
inference. Two graph-convolution layers mix information: the first
connects agents with each other only, the second additionally connects
every instance to its own domain's agent. The fused instance rows are
added back to the input features as residuals, so zeroed transformation
matrices leave features untouched.

In inference mode every instance is fused through its own single-instance
graph built against the recorded agents. After the agent-only first
layer all agent rows carry the same mixture (the clique normalization is
uniform), which makes the fusion independent of batch composition and of
the instance's domain tag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import (
    ConfigError,
    DegenerateWeightsError,
    DomainLookupError,
    SamplerContractError,
    ShapeError,
    StateError,
)
from .numerics import Tensor

__all__ = [
    "AgentRegistry",
    "GraphSpec",
    "MdifParams",
    "compute_agent",
    "update_agent",
    "build_adjacency",
    "gcn_layer",
    "mdif_forward",
]


class AgentRegistry:
    """Per-domain agent vectors plus the shared combination-weight head.

    The head is one affine map from a feature row to a scalar logit. It
    starts at weight zero, bias one, so initial combination weights are
    uniform and their sum can never start at zero.
    """

    def __init__(self, channels: int, domains, alpha: float = 0.1):
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        self.channels = channels
        self.alpha = alpha
        self.head_weight = Tensor(np.zeros((channels, 1)), requires_grad=True)
        self.head_bias = Tensor(np.ones(1), requires_grad=True)
        self.agents: dict[int, Tensor] = {}
        self.steps: dict[int, int] = {}
        for d in domains:
            self.register_domain(int(d))

    def register_domain(self, domain: int) -> None:
        if domain in self.agents:
            raise ConfigError(f"domain {domain} already has an agent entry")
        self.agents[domain] = Tensor(np.zeros(self.channels))
        self.steps[domain] = 0

    @property
    def domains(self) -> list:
        return sorted(self.agents)

    def agent(self, domain: int) -> Tensor:
        try:
            return self.agents[int(domain)]
        except KeyError:
            raise DomainLookupError(f"no agent registered for domain {domain}") from None

    def absorb(self, domain: int, batch_agent: Tensor) -> None:
        """Fold a batch agent into the stored average; the first batch seeds it."""
        rate = 1.0 if self.steps[int(domain)] == 0 else self.alpha
        update_agent(self, domain, batch_agent, rate)

    def stacked_agents(self) -> Tensor:
        """All stored agents as rows, ordered by domain id."""
        missing = [d for d in self.domains if self.steps[d] == 0]
        if not self.domains or missing:
            raise StateError(f"agent registry not populated for domains {missing or 'any'}")
        return Tensor(np.stack([self.agents[d].data for d in self.domains]))


def compute_agent(features: Tensor, registry: AgentRegistry) -> Tensor:
    """Sum-normalized weighted combination of one domain's feature rows."""
    if features.ndim != 2:
        raise ShapeError(f"expected features of shape (Q, C), got {features.shape}")
    logits = nx.add(nx.matmul(features, registry.head_weight), registry.head_bias)
    total = nx.sum(logits)
    if total.item() == 0.0:
        raise DegenerateWeightsError("combination logits sum to exactly zero")
    weights = nx.div(logits, total)
    return nx.sum(nx.mul(features, weights), axis=0)


def update_agent(registry: AgentRegistry, domain: int, batch_agent: Tensor, alpha: float) -> AgentRegistry:
    """Moving average toward the batch agent: (1-a)*stored + a*batch."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    stored = registry.agent(domain)
    value = batch_agent.data if isinstance(batch_agent, Tensor) else np.asarray(batch_agent, dtype=np.float64)
    if value.shape != stored.shape:
        raise ShapeError(f"agent shape {value.shape} does not match stored {stored.shape}")
    registry.agents[int(domain)] = Tensor((1.0 - alpha) * stored.data + alpha * value)
    registry.steps[int(domain)] += 1
    return registry


@dataclass
class GraphSpec:
    """Adjacency over [domain-0 instances, ..., domain-(D-1) instances, agents]."""

    num_domains: int
    per_domain: int
    layer: int
    adjacency: Tensor
    normalized: Tensor

    @property
    def num_nodes(self) -> int:
        return self.num_domains * self.per_domain + self.num_domains


def build_adjacency(num_domains: int, per_domain: int, layer: int) -> GraphSpec:
    """Layer 1 links only the agent clique; layer 2 adds instance-to-own-agent edges.

    Every node carries a self loop. The returned normalized matrix is
    D^(-1/2) A D^(-1/2) with A[i,j] divided by sqrt(deg_i * deg_j), so a
    three-agent clique normalizes to exactly 1/3 per entry.
    """
    if num_domains < 1:
        raise ConfigError(f"need at least one domain, got {num_domains}")
    if per_domain < 0:
        raise ConfigError(f"per-domain instance count must be nonnegative, got {per_domain}")
    if layer not in (1, 2):
        raise ConfigError(f"layer must be 1 or 2, got {layer}")
    n_inst = num_domains * per_domain
    n = n_inst + num_domains
    a = np.eye(n)
    a[n_inst:, n_inst:] = 1.0
    if layer == 2:
        for d in range(num_domains):
            rows = np.arange(d * per_domain, (d + 1) * per_domain)
            a[rows, n_inst + d] = 1.0
            a[n_inst + d, rows] = 1.0
    deg = a.sum(axis=1)
    normalized = a / np.sqrt(np.outer(deg, deg))
    return GraphSpec(
        num_domains=num_domains,
        per_domain=per_domain,
        layer=layer,
        adjacency=Tensor(a),
        normalized=Tensor(normalized),
    )


def gcn_layer(h: Tensor, spec: GraphSpec, w: Tensor, slope: float = 0.01) -> Tensor:
    """One propagation step: LeakyReLU(normalized adjacency . H . W)."""
    if h.ndim != 2 or h.shape[0] != spec.num_nodes:
        raise ShapeError(f"node features {h.shape} do not match the {spec.num_nodes}-node graph")
    return nx.leaky_relu(nx.matmul(nx.matmul(spec.normalized, h), w), slope=slope)


@dataclass
class MdifParams:
    """Transformation matrices of the two fusion layers."""

    w1: Tensor
    w2: Tensor
    slope: float = 0.01

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w1.shape[0] != self.w1.shape[1] or self.w1.shape != self.w2.shape:
            raise ShapeError(f"fusion matrices must be square and equal, got {self.w1.shape} and {self.w2.shape}")

    @classmethod
    def zeros(cls, channels: int, slope: float = 0.01) -> "MdifParams":
        return cls(
            w1=Tensor(np.zeros((channels, channels)), requires_grad=True),
            w2=Tensor(np.zeros((channels, channels)), requires_grad=True),
            slope=slope,
        )

    @property
    def channels(self) -> int:
        return self.w1.shape[0]


def _train_fusion(h0: Tensor, ids: np.ndarray, params: MdifParams, registry: AgentRegistry) -> Tensor:
    present = np.unique(ids)
    groups = [np.flatnonzero(ids == d) for d in present]
    sizes = {g.size for g in groups}
    if len(sizes) != 1:
        raise SamplerContractError(
            f"training fusion needs the same instance count per domain, got {sorted(g.size for g in groups)}"
        )
    per_domain = groups[0].size
    order = np.concatenate(groups)
    grouped = nx.take(h0, order, axis=0)

    agent_rows = []
    for domain, members in zip(present, groups):
        agent = compute_agent(nx.take(h0, members, axis=0), registry)
        with nx.stop_recording():
            registry.absorb(int(domain), agent.detach())
        agent_rows.append(nx.reshape(agent, (1, h0.shape[1])))

    nodes = nx.concat([grouped] + agent_rows, axis=0)
    num_domains = len(groups)
    h1 = gcn_layer(nodes, build_adjacency(num_domains, per_domain, 1), params.w1, params.slope)
    h2 = gcn_layer(h1, build_adjacency(num_domains, per_domain, 2), params.w2, params.slope)
    fused = nx.take(h2, np.arange(num_domains * per_domain), axis=0)
    restored = nx.take(nx.add(grouped, fused), np.argsort(order), axis=0)
    return restored


def _eval_fusion(h0: Tensor, params: MdifParams, registry: AgentRegistry) -> Tensor:
    agents = registry.stacked_agents()
    num_domains = agents.shape[0]
    # Each instance fuses through its own single-instance graph. Layer 1
    # leaves the instance row at LeakyReLU(x W1) (self loop only) and
    # collapses the agent clique to one shared row; layer 2 mixes the
    # instance (coefficient 1/2) with its agent (1/sqrt(2(D+1))).
    h1 = nx.leaky_relu(nx.matmul(h0, params.w1), slope=params.slope)
    clique = nx.leaky_relu(nx.matmul(nx.mean(agents, axis=0, keepdims=True), params.w1), slope=params.slope)
    coef = 1.0 / np.sqrt(2.0 * (num_domains + 1))
    mixed = nx.add(nx.mul(nx.matmul(h1, params.w2), 0.5), nx.mul(nx.matmul(clique, params.w2), coef))
    h2 = nx.leaky_relu(mixed, slope=params.slope)
    return nx.add(h0, h2)


def mdif_forward(h0: Tensor, domain_ids, params: MdifParams, registry: AgentRegistry, mode: str) -> Tensor:
    """Fuse instance features with domain agents; returns residual-added rows.

    Train mode builds the batched two-layer graph from current-batch
    agents (gradients reach the weight head) and folds detached agents
    into the registry. Eval mode reads recorded agents, accepts any batch
    composition, and fuses each row independently.
    """
    if h0.ndim != 2:
        raise ShapeError(f"expected features of shape (N, C), got {h0.shape}")
    if h0.shape[1] != params.channels:
        raise ShapeError(f"feature width {h0.shape[1]} does not match fusion matrices {params.w1.shape}")
    if mode == "train":
        ids = np.asarray(domain_ids, dtype=np.int64)
        if ids.shape != (h0.shape[0],):
            raise ShapeError(f"domain tags shape {ids.shape} does not match batch extent {h0.shape[0]}")
        for d in np.unique(ids):
            registry.agent(int(d))  # unknown domain fails before any state change
        return _train_fusion(h0, ids, params, registry)
    if mode == "eval":
        return _eval_fusion(h0, params, registry)
    raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
