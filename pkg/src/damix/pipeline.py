"""Datasets, balanced sampling, the small backbone, Adam, and the two training stages.

The model is deliberately tiny: three blocks of (channel affine ->
domain-branched normalization -> LeakyReLU) over a few positions per
sample, mean-pooled into a feature row. Small enough that every
parameter can be finite-difference checked in seconds, structured
enough to exercise every moving part of the adaptation recipe.

Stage one trains on labeled source domains only, one normalization
branch per domain, rectification off. Stage two converts the model:
the unlabeled domain gets a branch seeded from the mean of the source
branches, rectification turns on (where configured), and the fusion
residual starts at exact zero so the converted model's first forward
is the stage-one model scaled by the rectifier's neutral gate. Each
adaptation epoch reclusters the unlabeled domain's features into
pseudo-identities and trains the combined batch.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .clustering import ClusterConfig, export_assignment, generate_pseudo_labels
from .errors import (
    ConfigError,
    SamplingError,
    ShapeError,
    StateError,
    TrainingAborted,
)
from .graph_fusion import AgentRegistry, MdifParams, mdif_forward
from .normalization import RdsbnState, RunningStats, rdsbn_forward
from .numerics import GradTape, Tensor, load_tensor, save_tensor
from .objectives import LabelSpace, id_loss, stage_loss, triplet_loss

__all__ = [
    "DomainDataset",
    "BatchPlan",
    "DomainBatch",
    "sample_batch",
    "LabelCatalog",
    "ModelConfig",
    "TinyBackbone",
    "Model",
    "AdamConfig",
    "OptimizerState",
    "adam_step",
    "StepSchedule",
    "PretrainConfig",
    "AdaptConfig",
    "pretrain_stage",
    "convert_for_adaptation",
    "adapt_stage",
    "save_checkpoint",
    "load_checkpoint",
]

NORM_MODES = ("bn", "dsbn", "rdsbn")


# ---------------------------------------------------------------------------
# datasets and sampling


@dataclass
class DomainDataset:
    """One domain's samples: inputs of shape (N, dim, positions) plus labels.

    Source datasets carry ground-truth identity labels (all >= 0). A
    target dataset's labels are whatever the latest clustering said,
    with -1 marking noise.
    """

    domain: int
    inputs: np.ndarray
    labels: np.ndarray
    role: str = "source"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 3:
            raise ShapeError(f"inputs must have shape (N, dim, positions), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match sample count {self.inputs.shape[0]}"
            )
        if self.role not in ("source", "target"):
            raise ConfigError(f"role must be source or target, got {self.role!r}")
        if self.role == "source" and self.labels.size and self.labels.min() < 0:
            raise ConfigError(f"source domain {self.domain} has unlabeled samples")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def samples(self) -> list:
        return [(self.inputs[i], int(self.labels[i])) for i in range(len(self))]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels[self.labels >= 0])

    def with_labels(self, labels) -> "DomainDataset":
        return DomainDataset(domain=self.domain, inputs=self.inputs, labels=labels, role=self.role)

    def as_unlabeled_target(self) -> "DomainDataset":
        return DomainDataset(
            domain=self.domain,
            inputs=self.inputs,
            labels=np.full(len(self), -1, dtype=np.int64),
            role="target",
        )


@dataclass(frozen=True)
class BatchPlan:
    """Identity-balanced plan: P identities per domain, R samples each."""

    identities_per_domain: int = 8
    samples_per_identity: int = 4
    domains: tuple = ()

    def __post_init__(self):
        if self.identities_per_domain < 1 or self.samples_per_identity < 1:
            raise ConfigError("batch plan extents must be at least 1")
        if len(self.domains) == 0:
            raise ConfigError("batch plan needs at least one active domain")
        if len(set(self.domains)) != len(self.domains):
            raise ConfigError(f"duplicate domains in plan: {self.domains}")

    @property
    def batch_size(self) -> int:
        return len(self.domains) * self.identities_per_domain * self.samples_per_identity


@dataclass(frozen=True)
class DomainBatch:
    inputs: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray


def sample_batch(datasets, plan: BatchPlan, rng_seed) -> DomainBatch:
    """Draw a domain-grouped, identity-balanced batch.

    Per active domain: P distinct identities chosen without replacement
    from the labeled (non-noise) samples, then R samples per identity,
    with replacement only when an identity has fewer than R. Rows come
    out grouped by domain in plan order, which also guarantees equal
    per-domain counts.
    """
    by_domain = {ds.domain: ds for ds in datasets}
    rng = np.random.default_rng(rng_seed)
    p, r = plan.identities_per_domain, plan.samples_per_identity
    inputs, labels, domain_ids = [], [], []
    for d in plan.domains:
        if d not in by_domain:
            raise SamplingError(f"no dataset provided for domain {d}")
        ds = by_domain[d]
        identities = ds.classes
        if identities.size < p:
            raise SamplingError(
                f"domain {d} has {identities.size} usable identities, plan needs {p}"
            )
        chosen = rng.choice(identities, size=p, replace=False)
        for identity in chosen:
            rows = np.flatnonzero(ds.labels == identity)
            picked = rng.choice(rows, size=r, replace=rows.size < r)
            inputs.append(ds.inputs[picked])
            labels.extend([int(identity)] * r)
            domain_ids.extend([d] * r)
    return DomainBatch(
        inputs=np.concatenate(inputs),
        labels=np.asarray(labels, dtype=np.int64),
        domain_ids=np.asarray(domain_ids, dtype=np.int64),
    )


class LabelCatalog:
    """Maps each domain's raw labels onto the packed global class space.

    Source domains keep their dataset identity labels; the unlabeled
    domain's entry is rewritten every epoch to 0..k-1 for the current
    cluster count.
    """

    def __init__(self, datasets, target_domain=None):
        self.classes = {ds.domain: ds.classes.copy() for ds in datasets}
        if target_domain is not None and target_domain not in self.classes:
            self.classes[int(target_domain)] = np.empty(0, dtype=np.int64)
        self._rebuild()

    def _rebuild(self):
        self.space = LabelSpace({d: c.size for d, c in self.classes.items()})

    @property
    def total_classes(self) -> int:
        return self.space.total_classes

    @property
    def domains(self) -> list:
        return sorted(self.classes)

    def set_domain(self, domain: int, classes) -> None:
        self.classes[int(domain)] = np.asarray(classes, dtype=np.int64)
        self._rebuild()

    def class_index(self, domain_ids, labels) -> np.ndarray:
        """Vectorized (domain, raw label) -> global classifier index."""
        ids = np.asarray(domain_ids, dtype=np.int64)
        raw = np.asarray(labels, dtype=np.int64)
        out = np.empty(raw.shape, dtype=np.int64)
        for d in np.unique(ids):
            table = self.classes.get(int(d))
            if table is None:
                raise SamplingError(f"domain {d} is not in the label catalog")
            rows = ids == d
            local = np.searchsorted(table, raw[rows])
            bad = (local >= table.size) | (table[np.minimum(local, table.size - 1)] != raw[rows])
            if table.size == 0 or bad.any():
                missing = raw[rows][bad][0] if table.size else raw[rows][0]
                raise SamplingError(f"label {missing} is not a known identity of domain {d}")
            out[rows] = self.space.offset(int(d)) + local
        return out


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    feature_dim: int = 32
    positions: int = 4
    num_blocks: int = 3
    norm_mode: str = "dsbn"
    use_mdif: bool = False
    slope: float = 0.01
    eps: float = 1e-5
    momentum_alpha: float = 0.1
    rectifier_rank: int = 1
    agent_alpha: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        for name in ("input_dim", "feature_dim", "positions", "num_blocks", "rectifier_rank"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")


class TinyBackbone:
    """Affine -> branched normalization -> LeakyReLU blocks, mean-pooled."""

    def __init__(self, config: ModelConfig, branch_domains):
        self.config = config
        widths = [config.input_dim] + [config.feature_dim] * config.num_blocks
        rng = np.random.default_rng(np.random.SeedSequence((config.init_seed, 0)))
        self.weights, self.biases, self.norms = [], [], []
        for i in range(config.num_blocks):
            fan_in = widths[i]
            self.weights.append(
                Tensor(rng.normal(size=(fan_in, widths[i + 1])) / np.sqrt(fan_in), requires_grad=True)
            )
            self.biases.append(Tensor(np.zeros(widths[i + 1]), requires_grad=True))
            self.norms.append(
                RdsbnState(
                    widths[i + 1],
                    branch_domains,
                    rank=config.rectifier_rank,
                    eps=config.eps,
                    momentum_alpha=config.momentum_alpha,
                )
            )

    def branch_ids(self, domain_ids) -> np.ndarray:
        ids = np.asarray(domain_ids, dtype=np.int64)
        if self.config.norm_mode == "bn":
            return np.zeros_like(ids)
        return ids

    def forward(self, x: Tensor, domain_ids, mode: str, rectify: bool) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.config.input_dim or x.shape[2] != self.config.positions:
            raise ShapeError(
                f"expected input of shape (N, {self.config.input_dim}, {self.config.positions}), got {x.shape}"
            )
        branch = self.branch_ids(domain_ids)
        h = x
        for w, b, norm in zip(self.weights, self.biases, self.norms):
            n, l = h.shape[0], h.shape[2]
            flat = nx.reshape(nx.transpose(h, (0, 2, 1)), (n * l, h.shape[1]))
            lin = nx.add(nx.matmul(flat, w), b)
            h = nx.transpose(nx.reshape(lin, (n, l, w.shape[1])), (0, 2, 1))
            h = rdsbn_forward(h, branch, norm, mode, rectify=rectify)
            h = nx.leaky_relu(h, self.config.slope)
        return nx.mean(h, axis=2)


class Model:
    """Backbone plus classifier heads, fusion state, and a named-parameter registry."""

    def __init__(self, config: ModelConfig, source_domains, catalog: LabelCatalog):
        self.config = config
        self.source_domains = sorted(int(d) for d in source_domains)
        if not self.source_domains:
            raise ConfigError("need at least one source domain")
        self.catalog = catalog
        branch_domains = [0] if config.norm_mode == "bn" else self.source_domains
        self.backbone = TinyBackbone(config, branch_domains)
        rng = np.random.default_rng(np.random.SeedSequence((config.init_seed, 1)))
        c, k = config.feature_dim, catalog.total_classes
        self.classifier_w = Tensor(rng.normal(size=(c, k)) / np.sqrt(c), requires_grad=True)
        self.classifier_b = Tensor(np.zeros(k), requires_grad=True)
        self.fused_w = None
        self.fused_b = None
        self.mdif_params = MdifParams.zeros(c, slope=config.slope)
        self.agent_registry = None
        self.rectify_active = False
        self.adapted = False
        self.target_domain = None

    # -- forward paths ------------------------------------------------

    def features(self, x: Tensor, domain_ids, mode: str) -> Tensor:
        return self.backbone.forward(x, domain_ids, mode, rectify=self.rectify_active)

    def logits(self, feats: Tensor) -> Tensor:
        return nx.add(nx.matmul(feats, self.classifier_w), self.classifier_b)

    def fused_logits(self, fused: Tensor) -> Tensor:
        if self.fused_w is None:
            raise StateError("no fused-feature classifier; convert the model for adaptation first")
        return nx.add(nx.matmul(fused, self.fused_w), self.fused_b)

    def fuse(self, feats: Tensor, domain_ids, mode: str) -> Tensor:
        if self.agent_registry is None:
            raise StateError("fusion is not initialized; convert the model for adaptation first")
        return mdif_forward(feats, domain_ids, self.mdif_params, self.agent_registry, mode)

    def _fusion_ready(self) -> bool:
        return (
            self.config.use_mdif
            and self.agent_registry is not None
            and all(self.agent_registry.steps[d] > 0 for d in self.agent_registry.domains)
        )

    def plain_features(self, inputs, domain: int) -> np.ndarray:
        """Eval-mode backbone features through one domain's branch."""
        x = Tensor(np.asarray(inputs, dtype=np.float64))
        ids = np.full(x.shape[0], int(domain), dtype=np.int64)
        with nx.stop_recording():
            return self.features(x, ids, "eval").data

    def inference_features(self, inputs, domain: int) -> np.ndarray:
        """Features used for retrieval: fused when fusion is trained, else plain."""
        x = Tensor(np.asarray(inputs, dtype=np.float64))
        ids = np.full(x.shape[0], int(domain), dtype=np.int64)
        with nx.stop_recording():
            feats = self.features(x, ids, "eval")
            if self._fusion_ready():
                feats = self.fuse(feats, ids, "eval")
            return feats.data

    # -- parameter registry -------------------------------------------

    def _registry(self) -> dict:
        reg = {}
        for i, (w, b, norm) in enumerate(
            zip(self.backbone.weights, self.backbone.biases, self.backbone.norms)
        ):
            reg[f"block{i}.weight"] = (
                lambda i=i: self.backbone.weights[i],
                lambda t, i=i: self.backbone.weights.__setitem__(i, t),
            )
            reg[f"block{i}.bias"] = (
                lambda i=i: self.backbone.biases[i],
                lambda t, i=i: self.backbone.biases.__setitem__(i, t),
            )
            for d in norm.domains:
                branch = norm.branches[d]
                reg[f"block{i}.norm{d}.gamma"] = (
                    lambda br=branch: br.params.gamma,
                    lambda t, br=branch: setattr(br.params, "gamma", t),
                )
                reg[f"block{i}.norm{d}.beta"] = (
                    lambda br=branch: br.params.beta,
                    lambda t, br=branch: setattr(br.params, "beta", t),
                )
                reg[f"block{i}.norm{d}.rectifier"] = (
                    lambda br=branch: br.rectifier,
                    lambda t, br=branch: setattr(br, "rectifier", t),
                )
        reg["classifier.weight"] = (
            lambda: self.classifier_w,
            lambda t: setattr(self, "classifier_w", t),
        )
        reg["classifier.bias"] = (
            lambda: self.classifier_b,
            lambda t: setattr(self, "classifier_b", t),
        )
        if self.fused_w is not None:
            reg["fused.weight"] = (lambda: self.fused_w, lambda t: setattr(self, "fused_w", t))
            reg["fused.bias"] = (lambda: self.fused_b, lambda t: setattr(self, "fused_b", t))
        if self.config.use_mdif and self.agent_registry is not None:
            reg["mdif.w1"] = (
                lambda: self.mdif_params.w1,
                lambda t: setattr(self.mdif_params, "w1", t),
            )
            reg["mdif.w2"] = (
                lambda: self.mdif_params.w2,
                lambda t: setattr(self.mdif_params, "w2", t),
            )
            reg["mdif.head_weight"] = (
                lambda: self.agent_registry.head_weight,
                lambda t: setattr(self.agent_registry, "head_weight", t),
            )
            reg["mdif.head_bias"] = (
                lambda: self.agent_registry.head_bias,
                lambda t: setattr(self.agent_registry, "head_bias", t),
            )
        return reg

    def parameters(self) -> dict:
        return {name: get() for name, (get, _set) in sorted(self._registry().items())}

    def set_parameter(self, name: str, tensor: Tensor) -> None:
        registry = self._registry()
        if name not in registry:
            raise StateError(f"unknown parameter {name!r}")
        current = registry[name][0]()
        if tensor.shape != current.shape:
            raise ShapeError(f"parameter {name} has shape {current.shape}, got {tensor.shape}")
        registry[name][1](tensor)

    # -- class-space maintenance --------------------------------------

    def resize_target_classes(self, num_clusters: int) -> list:
        """Rebuild both heads for a new unlabeled-domain cluster count.

        Columns of unchanged domains are copied over; the target
        domain's columns restart at zero because cluster ids carry no
        meaning across epochs. Returns the parameter names whose
        optimizer state must be dropped.
        """
        if not self.adapted:
            raise StateError("model has not been converted for adaptation")
        old_space = self.catalog.space
        self.catalog.set_domain(self.target_domain, np.arange(int(num_clusters)))
        new_space = self.catalog.space

        def rebuild(weight, bias):
            w = np.zeros((weight.shape[0], new_space.total_classes))
            b = np.zeros(new_space.total_classes)
            for d in old_space.domains:
                if d == self.target_domain:
                    continue
                src = old_space.domain_range(d)
                dst = new_space.domain_range(d)
                w[:, dst.start : dst.stop] = weight.data[:, src.start : src.stop]
                b[dst.start : dst.stop] = bias.data[src.start : src.stop]
            return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)

        self.classifier_w, self.classifier_b = rebuild(self.classifier_w, self.classifier_b)
        touched = ["classifier.weight", "classifier.bias"]
        if self.fused_w is not None:
            self.fused_w, self.fused_b = rebuild(self.fused_w, self.fused_b)
            touched += ["fused.weight", "fused.bias"]
        return touched


def convert_for_adaptation(model: Model, target_domain: int) -> Model:
    """Stage handoff: add the unlabeled domain's branch and fusion state.

    The new normalization branch starts at the mean of the source
    branches (parameters and running statistics). Rectifiers stay at
    zero and the second fusion matrix at exact zero, so the converted
    model's first forward is the stage-one forward under the neutral
    gate. The first fusion matrix starts random: with both matrices at
    zero the whole fusion stack sits at an exact saddle (each matrix's
    gradient carries a factor of the other) and could never train.
    """
    if model.adapted:
        raise StateError("model is already converted for adaptation")
    target_domain = int(target_domain)
    model.target_domain = target_domain
    if model.config.norm_mode != "bn":
        if target_domain in model.source_domains:
            raise ConfigError(f"domain {target_domain} is already a source domain")
        for norm in model.backbone.norms:
            sources = [norm.branches[d] for d in norm.domains]
            branch = norm.register_domain(target_domain)
            branch.params.gamma = Tensor(
                np.mean([b.params.gamma.data for b in sources], axis=0), requires_grad=True
            )
            branch.params.beta = Tensor(
                np.mean([b.params.beta.data for b in sources], axis=0), requires_grad=True
            )
            branch.stats = RunningStats(
                mean=Tensor(np.mean([b.stats.mean.data for b in sources], axis=0)),
                var=Tensor(np.mean([b.stats.var.data for b in sources], axis=0)),
                step=0,
            )
    model.rectify_active = model.config.norm_mode == "rdsbn"
    if model.config.use_mdif:
        c = model.config.feature_dim
        rng = np.random.default_rng(np.random.SeedSequence((model.config.init_seed, 2)))
        model.mdif_params = MdifParams(
            w1=Tensor(rng.normal(size=(c, c)) / np.sqrt(c), requires_grad=True),
            w2=Tensor(np.zeros((c, c)), requires_grad=True),
            slope=model.config.slope,
        )
        model.agent_registry = AgentRegistry(
            model.config.feature_dim,
            model.source_domains + [target_domain],
            alpha=model.config.agent_alpha,
        )
    model.fused_w = Tensor(model.classifier_w.data, requires_grad=True)
    model.fused_b = Tensor(model.classifier_b.data, requires_grad=True)
    model.adapted = True
    return model


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.00035
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be nonnegative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")


class OptimizerState:
    """Per-parameter first/second moments and step counts, keyed by name."""

    def __init__(self):
        self.moments: dict[str, list] = {}

    def reset(self, names) -> None:
        for name in names:
            self.moments.pop(name, None)


def adam_step(params: dict, grads: dict, state: OptimizerState, config: AdamConfig) -> dict:
    """One decoupled-weight-decay Adam update for every named gradient.

    Parameters without a gradient this step keep their values and
    moments. Returns the map of replacement tensors.
    """
    updated = {}
    for name in sorted(grads):
        raw = grads[name]
        g = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r}")
        if name not in params:
            raise StateError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m, v, t = state.moments.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
        t += 1
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        state.moments[name] = [m, v, t]
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        step = config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        updated[name] = Tensor(p.data - step - config.lr * config.weight_decay * p.data, requires_grad=True)
    return updated


@dataclass(frozen=True)
class StepSchedule:
    """Learning rate dropped to gamma times itself at each milestone epoch."""

    base_lr: float
    milestones: tuple = ()
    gamma: float = 0.1

    def lr(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= int(m))
        return self.base_lr * self.gamma**drops


# ---------------------------------------------------------------------------
# training stages


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 80
    steps_per_epoch: int = 4
    lr: float = 0.00035
    weight_decay: float = 0.0005
    milestones: tuple = (40, 70)
    margin: float = 0.3
    identities_per_domain: int = 8
    samples_per_identity: int = 4
    seed: int = 0


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 40
    steps_per_epoch: int = 4
    lr: float = 0.00035
    weight_decay: float = 0.0005
    margin: float = 0.3
    identities_per_domain: int = 8
    samples_per_identity: int = 4
    cluster_eps: float = 0.5
    cluster_min_pts: int = 4
    seed: int = 0


def _train_step(model: Model, batch: DomainBatch, margin: float, with_fusion: bool,
                opt: OptimizerState, adam_config: AdamConfig):
    classes = model.catalog.class_index(batch.domain_ids, batch.labels)
    x = Tensor(batch.inputs)
    with GradTape() as tape:
        feats = model.features(x, batch.domain_ids, "train")
        logits = model.logits(feats)
        id_term = id_loss(logits, classes)
        tri_term = triplet_loss(feats, classes, margin=margin)
        if with_fusion:
            fused = model.fuse(feats, batch.domain_ids, "train")
            id_fused = id_loss(model.fused_logits(fused), classes)
            bundle = stage_loss("adapt", id=id_term, triplet=tri_term, id_mdif=id_fused)
        else:
            bundle = stage_loss("pretrain", id=id_term, triplet=tri_term)
        if not np.isfinite(bundle.total.item()):
            raise TrainingAborted(f"loss became non-finite: {bundle.total.item()}")
        grads = tape.gradients(bundle.total)
    params = model.parameters()
    grad_map = {}
    for name, tensor in params.items():
        g = grads.get(tensor)
        if g is not None:
            grad_map[name] = g
    for name, tensor in adam_step(params, grad_map, opt, adam_config).items():
        model.set_parameter(name, tensor)
    return bundle


def _mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


def pretrain_stage(sources, model: Model, config: PretrainConfig) -> list:
    """Stage one: supervised training on the labeled source domains only."""
    if model.adapted:
        raise StateError("model is already converted for adaptation; pretraining comes first")
    plan = BatchPlan(
        identities_per_domain=config.identities_per_domain,
        samples_per_identity=config.samples_per_identity,
        domains=tuple(ds.domain for ds in sources),
    )
    schedule = StepSchedule(config.lr, milestones=config.milestones)
    opt = OptimizerState()
    history = []
    for epoch in range(config.epochs):
        adam_config = AdamConfig(lr=schedule.lr(epoch), weight_decay=config.weight_decay)
        ids, tris, totals = [], [], []
        for step in range(config.steps_per_epoch):
            seed = np.random.SeedSequence((config.seed, 1, epoch, step))
            batch = sample_batch(sources, plan, seed)
            bundle = _train_step(model, batch, config.margin, False, opt, adam_config)
            ids.append(bundle.id_loss.item())
            tris.append(bundle.triplet_loss.item())
            totals.append(bundle.total.item())
        history.append(
            {
                "stage": "pretrain",
                "epoch": epoch,
                "lr": adam_config.lr,
                "id_loss": _mean(ids),
                "triplet_loss": _mean(tris),
                "total": _mean(totals),
            }
        )
    return history


def adapt_stage(sources, target: DomainDataset, model: Model, config: AdaptConfig,
                on_epoch=None, assignment_dir=None) -> list:
    """Stage two: recluster the unlabeled domain each epoch, train combined batches.

    A clustering that yields fewer than two pseudo-identities cannot
    support the balanced sampler or the triplet objective, so such an
    epoch trains on the source domains alone and is flagged in the
    history. The per-domain identity count is capped by the cluster
    count to keep per-domain batch sizes equal.
    """
    if not model.adapted:
        raise StateError("convert the model for adaptation before adapt_stage")
    if target.domain != model.target_domain:
        raise ConfigError(
            f"model was converted for domain {model.target_domain}, got dataset for {target.domain}"
        )
    cluster_config = ClusterConfig(eps=config.cluster_eps, min_pts=config.cluster_min_pts)
    opt = OptimizerState()
    adam_config = AdamConfig(lr=config.lr, weight_decay=config.weight_decay)
    source_domains = tuple(ds.domain for ds in sources)
    history = []
    for epoch in range(config.epochs):
        feats = model.plain_features(target.inputs, target.domain)
        assignment = generate_pseudo_labels(feats, cluster_config, epoch=epoch)
        if assignment_dir is not None:
            path = os.path.join(assignment_dir, f"pseudo_labels_epoch{epoch:03d}.csv")
            export_assignment(assignment, path)
        k = assignment.num_clusters
        target_active = k >= 2
        if target_active:
            opt.reset(model.resize_target_classes(k))
            labeled_target = target.with_labels(assignment.labels)
            plan = BatchPlan(
                identities_per_domain=min(config.identities_per_domain, k),
                samples_per_identity=config.samples_per_identity,
                domains=source_domains + (target.domain,),
            )
            datasets = list(sources) + [labeled_target]
        else:
            warnings.warn(
                f"epoch {epoch}: clustering found {k} cluster(s) "
                f"({int(assignment.noise_mask.sum())} noise samples); training on sources only",
                RuntimeWarning,
                stacklevel=2,
            )
            plan = BatchPlan(
                identities_per_domain=config.identities_per_domain,
                samples_per_identity=config.samples_per_identity,
                domains=source_domains,
            )
            datasets = list(sources)
        ids, tris, fused_ids, totals = [], [], [], []
        for step in range(config.steps_per_epoch):
            seed = np.random.SeedSequence((config.seed, 2, epoch, step))
            batch = sample_batch(datasets, plan, seed)
            bundle = _train_step(model, batch, config.margin, model.config.use_mdif, opt, adam_config)
            ids.append(bundle.id_loss.item())
            tris.append(bundle.triplet_loss.item())
            totals.append(bundle.total.item())
            if bundle.id_mdif_loss is not None:
                fused_ids.append(bundle.id_mdif_loss.item())
        row = {
            "stage": "adapt",
            "epoch": epoch,
            "lr": adam_config.lr,
            "clusters": k,
            "noise": int(assignment.noise_mask.sum()),
            "target_active": target_active,
            "id_loss": _mean(ids),
            "triplet_loss": _mean(tris),
            "id_mdif_loss": _mean(fused_ids) if fused_ids else None,
            "total": _mean(totals),
        }
        if on_epoch is not None:
            extra = on_epoch(model, epoch)
            if extra:
                row.update(extra)
        history.append(row)
    return history


# ---------------------------------------------------------------------------
# checkpoints


def _checkpoint_arrays(model: Model) -> dict:
    arrays = {name: tensor.data for name, tensor in model.parameters().items()}
    for i, norm in enumerate(model.backbone.norms):
        for d in norm.domains:
            branch = norm.branches[d]
            arrays[f"block{i}.norm{d}.running_mean"] = branch.stats.mean.data
            arrays[f"block{i}.norm{d}.running_var"] = branch.stats.var.data
    if model.agent_registry is not None:
        for d in model.agent_registry.domains:
            arrays[f"mdif.agent{d}"] = model.agent_registry.agents[d].data
    return arrays


def save_checkpoint(model: Model, directory) -> None:
    """Write every array as its own file plus a manifest describing the model."""
    os.makedirs(directory, exist_ok=True)
    arrays = _checkpoint_arrays(model)
    for name, value in arrays.items():
        save_tensor(os.path.join(directory, f"{name}.dmx"), Tensor(value))
    manifest = {
        "format": 1,
        "config": asdict(model.config),
        "source_domains": model.source_domains,
        "target_domain": model.target_domain,
        "adapted": model.adapted,
        "rectify_active": model.rectify_active,
        "catalog": {str(d): c.tolist() for d, c in model.catalog.classes.items()},
        "norm_steps": [
            {str(d): norm.branches[d].stats.step for d in norm.domains}
            for norm in model.backbone.norms
        ],
        "agent_steps": (
            {str(d): model.agent_registry.steps[d] for d in model.agent_registry.domains}
            if model.agent_registry is not None
            else None
        ),
        "arrays": sorted(arrays),
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory) -> Model:
    """Rebuild a model whose forward outputs match the saved one bitwise."""
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = ModelConfig(**manifest["config"])
    source_domains = [int(d) for d in manifest["source_domains"]]
    catalog = LabelCatalog.__new__(LabelCatalog)
    catalog.classes = {int(d): np.asarray(c, dtype=np.int64) for d, c in manifest["catalog"].items()}
    catalog._rebuild()
    model = Model(config, source_domains, catalog)
    if manifest["adapted"]:
        convert_for_adaptation(model, int(manifest["target_domain"]))
    model.rectify_active = bool(manifest["rectify_active"])

    def read(name):
        return load_tensor(os.path.join(directory, f"{name}.dmx"))

    for name in model.parameters():
        model.set_parameter(name, Tensor(read(name).data, requires_grad=True))
    for i, norm in enumerate(model.backbone.norms):
        steps = manifest["norm_steps"][i]
        for d in norm.domains:
            branch = norm.branches[d]
            branch.stats = RunningStats(
                mean=read(f"block{i}.norm{d}.running_mean"),
                var=read(f"block{i}.norm{d}.running_var"),
                step=int(steps[str(d)]),
            )
    if model.agent_registry is not None and manifest["agent_steps"] is not None:
        for d in model.agent_registry.domains:
            model.agent_registry.agents[d] = read(f"mdif.agent{d}")
            model.agent_registry.steps[d] = int(manifest["agent_steps"][str(d)])
    return model
