"""Self-contained correctness checks behind the `damix verify` command.

Each check is a small, fast re-derivation of one of the library's
contracts: finite-difference agreement for every differentiable path,
exact algebraic identities for the normalizers and the fusion graph,
and brute-force oracle agreement for clustering and retrieval. The
suite is meant to run in seconds on any machine as a smoke screen; the
full test suite covers the same ground in more depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph_fusion as gf
from . import normalization as nm
from . import numerics as nx
from .clustering import dbscan, dbscan_reference
from .evaluation import evaluate_retrieval
from .numerics import Tensor, check_gradients
from .objectives import id_loss, triplet_loss

__all__ = ["CheckResult", "run_verification"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _grad_check_result(name, f, x, tol=1e-4) -> CheckResult:
    report = check_gradients(f, x, tol=tol)
    return CheckResult(name, report.passed, f"max relative error {report.max_rel_error:.3e}")


def _check_bn_gradient():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(6, 3))
    params = nm.BnParams(
        gamma=Tensor(rng.normal(size=3) + 2.0, requires_grad=True),
        beta=Tensor(rng.normal(size=3), requires_grad=True),
    )
    weights = Tensor(rng.normal(size=(6, 3)))

    def f(x):
        return nx.sum(nx.mul(nm.bn_forward(x, params, nm.RunningStats.initial(3), "train"), weights))

    yield _grad_check_result("gradient: bn_forward wrt input", f, Tensor(x0))


def _check_rdsbn_gradients():
    rng = np.random.default_rng(1)
    state = nm.RdsbnState(channels=3, domains=[0, 1], rank=2)
    for d in (0, 1):
        branch = state.branches[d]
        branch.params.gamma = Tensor(rng.normal(size=3) + 1.5, requires_grad=True)
        branch.params.beta = Tensor(rng.normal(size=3), requires_grad=True)
        branch.rectifier = Tensor(rng.normal(size=(2, 2)) * 0.3, requires_grad=True)
    x0 = rng.normal(size=(6, 3, 4))
    ids = np.array([0, 0, 0, 1, 1, 1])
    weights = Tensor(rng.normal(size=(6, 3)))

    def loss_from(x):
        out = nm.rdsbn_forward(x, ids, state, "train", rectify=True)
        return nx.sum(nx.mul(nx.mean(out, axis=2), weights))

    yield _grad_check_result("gradient: rdsbn_forward wrt input", loss_from, Tensor(x0))
    branch0 = state.branches[0]
    for field, label in (("gamma", "gamma"), ("beta", "beta")):
        def f(t, field=field):
            setattr(branch0.params, field, t)
            return loss_from(Tensor(x0))

        yield _grad_check_result(f"gradient: rdsbn_forward wrt {label}", f, getattr(branch0.params, field))

    def f_rect(t):
        branch0.rectifier = t
        return loss_from(Tensor(x0))

    yield _grad_check_result("gradient: rdsbn_forward wrt rectifier", f_rect, branch0.rectifier)


def _check_mdif_gradients():
    rng = np.random.default_rng(2)
    registry = gf.AgentRegistry(channels=4, domains=[0, 1])
    registry.head_weight = Tensor(rng.normal(size=(4, 1)) * 0.3, requires_grad=True)
    registry.head_bias = Tensor([1.2], requires_grad=True)
    params = gf.MdifParams(
        w1=Tensor(rng.normal(size=(4, 4)) * 0.4, requires_grad=True),
        w2=Tensor(rng.normal(size=(4, 4)) * 0.4, requires_grad=True),
    )
    h0 = rng.normal(size=(6, 4))
    ids = np.array([0, 0, 0, 1, 1, 1])
    weights = Tensor(rng.normal(size=(6, 4)))

    def loss_from(h):
        return nx.sum(nx.mul(gf.mdif_forward(h, ids, params, registry, "train"), weights))

    yield _grad_check_result("gradient: mdif_forward wrt features", loss_from, Tensor(h0))
    for field, owner in (("w1", params), ("w2", params), ("head_weight", registry), ("head_bias", registry)):
        def f(t, field=field, owner=owner):
            setattr(owner, field, t)
            return loss_from(Tensor(h0))

        yield _grad_check_result(f"gradient: mdif_forward wrt {field}", f, getattr(owner, field))


def _check_loss_gradients():
    rng = np.random.default_rng(3)
    logits0 = rng.normal(size=(6, 4))
    labels = np.array([0, 1, 2, 3, 0, 1])
    yield _grad_check_result("gradient: id_loss", lambda t: id_loss(t, labels), Tensor(logits0))
    feats0 = rng.normal(size=(8, 5))
    tri_labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    yield _grad_check_result(
        "gradient: triplet_loss", lambda t: triplet_loss(t, tri_labels, margin=0.3), Tensor(feats0)
    )


def _check_composite_gradient():
    # full adaptation-stage objective through a two-block model
    from .objectives import stage_loss
    from .pipeline import BatchPlan, LabelCatalog, Model, ModelConfig, convert_for_adaptation, sample_batch
    from .synthetic import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(num_domains=3, identities_per_domain=4, samples_per_identity=4,
                         dim=5, positions=2, seed=5)
    data = generate_synthetic(spec)
    sources = data[:2]
    model = Model(
        ModelConfig(input_dim=5, feature_dim=6, positions=2, num_blocks=2,
                    norm_mode="rdsbn", use_mdif=True, init_seed=5),
        [0, 1],
        LabelCatalog(sources, target_domain=2),
    )
    convert_for_adaptation(model, 2)
    model.resize_target_classes(3)
    target = data[2].with_labels(np.tile([0, 1, 2, 0], len(data[2]) // 4))
    batch = sample_batch(list(sources) + [target], BatchPlan(2, 2, (0, 1, 2)), 9)
    classes = model.catalog.class_index(batch.domain_ids, batch.labels)

    def total_from(t):
        model.set_parameter("block0.weight", t)
        feats = model.features(Tensor(batch.inputs), batch.domain_ids, "train")
        fused = model.fuse(feats, batch.domain_ids, "train")
        bundle = stage_loss(
            "adapt",
            id=id_loss(model.logits(feats), classes),
            triplet=triplet_loss(feats, classes, margin=0.3),
            id_mdif=id_loss(model.fused_logits(fused), classes),
        )
        return bundle.total

    yield _grad_check_result(
        "gradient: adaptation composite wrt first block", total_from, model.parameters()["block0.weight"]
    )


def _check_normalization_invariants():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(10, 4, 3)) * 3.0 + 1.0)
    params = nm.BnParams(gamma=Tensor(np.ones(4)), beta=Tensor(np.zeros(4)))
    core = nm.bn_forward(x, params, nm.RunningStats.initial(4), "train")
    mean_ok = float(np.max(np.abs(core.data.mean(axis=(0, 2))))) <= 1e-10
    sigma2 = x.data.var(axis=(0, 2))
    var_ok = bool(np.allclose(core.data.var(axis=(0, 2)), sigma2 / (sigma2 + params.eps), atol=1e-6))
    yield CheckResult("normalization: standardized mean is zero", mean_ok, "per-channel |mean| <= 1e-10")
    yield CheckResult("normalization: standardized variance", var_ok, "within 1e-6 of s2/(s2+eps)")

    state = nm.RdsbnState(channels=4, domains=[0, 1])
    ids = np.array([0] * 5 + [1] * 5)
    gated = nm.rdsbn_forward(x, ids, state, "train", rectify=True)
    state2 = nm.RdsbnState(channels=4, domains=[0, 1])
    plain = nm.rdsbn_forward(x, ids, state2, "train", rectify=False)
    exact = gated.data.tobytes() == (0.5 * plain.data).tobytes()
    yield CheckResult("normalization: zero rectifier halves the branch output", exact, "bitwise")


def _check_graph_invariants():
    ok_structure = True
    for d in range(1, 5):
        for q in range(0, 9):
            for layer in (1, 2):
                spec = gf.build_adjacency(d, q, layer)
                a = spec.adjacency.data
                sym = np.array_equal(a, a.T) and np.array_equal(np.diag(a), np.ones(spec.num_nodes))
                deg = a.sum(axis=1)
                norm_ok = np.array_equal(spec.normalized.data, a / np.sqrt(np.outer(deg, deg)))
                ok_structure = ok_structure and sym and norm_ok
    yield CheckResult("graph: adjacency structure over (1..4)x(0..8)", ok_structure, "symmetry + normalization")

    spec = gf.build_adjacency(3, 2, 1)
    block = spec.normalized.data[-3:, -3:]
    yield CheckResult("graph: 3-agent clique entries", bool(np.all(block == 1.0 / 3.0)), "exactly 1/3")

    rng = np.random.default_rng(7)
    registry = gf.AgentRegistry(channels=4, domains=[0, 1])
    for d in (0, 1):
        registry.absorb(d, Tensor(rng.normal(size=4)))
    params = gf.MdifParams(
        w1=Tensor(rng.normal(size=(4, 4)) * 0.3), w2=Tensor(rng.normal(size=(4, 4)) * 0.3)
    )
    h = rng.normal(size=(5, 4))
    ids = np.zeros(5, dtype=int)
    full = gf.mdif_forward(Tensor(h), ids, params, registry, "eval")
    tampered = h.copy()
    tampered[3] += 100.0
    partial = gf.mdif_forward(Tensor(tampered), ids, params, registry, "eval")
    independent = all(
        full.data[i].tobytes() == partial.data[i].tobytes() for i in range(5) if i != 3
    )
    yield CheckResult("graph: eval rows are independent", independent, "bitwise row agreement")

    zero = gf.MdifParams.zeros(4)
    out = gf.mdif_forward(Tensor(h), ids, zero, registry, "eval")
    yield CheckResult("graph: zero fusion is a no-op", out.data.tobytes() == h.tobytes(), "bitwise")


def _check_oracles():
    rng = np.random.default_rng(8)
    agree = True
    for _ in range(20):
        pts = Tensor(rng.uniform(size=(int(rng.integers(5, 60)), 2)))
        a = dbscan(pts, eps=0.15, min_pts=4)
        b = dbscan_reference(pts, eps=0.15, min_pts=4)
        agree = agree and np.array_equal(a.labels, b.labels)
    yield CheckResult("oracle: dbscan matches density-reachability reference", agree, "20 instances")

    ap_ok = True
    for _ in range(10):
        gallery_ids = rng.integers(0, 3, size=12)
        gallery_ids[:3] = [0, 1, 2]
        queries = rng.normal(size=(3, 4))
        gallery = rng.normal(size=(12, 4))
        result = evaluate_retrieval(queries, [0, 1, 2], gallery, gallery_ids)
        for i in range(3):
            dists = np.linalg.norm(gallery - queries[i], axis=1)
            order = sorted(range(12), key=lambda j: (dists[j], j))
            hits, ap = 0, 0.0
            for rank, j in enumerate(order, start=1):
                if gallery_ids[j] == [0, 1, 2][i]:
                    hits += 1
                    ap += hits / rank
            ap /= max(1, (gallery_ids == [0, 1, 2][i]).sum())
            ap_ok = ap_ok and abs(result.average_precisions[i] - ap) <= 1e-12
    yield CheckResult("oracle: retrieval matches brute-force precision walk", ap_ok, "10 instances, 1e-12")


def _check_moving_averages():
    stats = nm.RunningStats.initial(3)
    mean_target = np.array([2.0, -1.0, 0.5])
    var_target = np.array([4.0, 9.0, 1.0])
    alpha = 0.3
    gap0 = np.abs(stats.mean.data - mean_target)
    ok = True
    for t in range(1, 11):
        stats = nm.update_running_stats(stats, mean_target, var_target, alpha)
        expected = (1.0 - alpha) ** t * gap0
        ok = ok and bool(np.all(np.abs(np.abs(stats.mean.data - mean_target) - expected) <= 1e-12))
    yield CheckResult("moving average: geometric convergence (running stats)", ok, "|gap_t| = (1-a)^t |gap_0|")

    registry = gf.AgentRegistry(channels=3, domains=[0], alpha=alpha)
    agent_target = Tensor(mean_target)
    registry.absorb(0, agent_target)  # seeding step
    probe = Tensor(np.zeros(3))
    registry.absorb(0, probe)
    gap0 = np.abs(registry.agents[0].data - probe.data)
    ok = True
    for t in range(1, 11):
        registry.absorb(0, probe)
        expected = (1.0 - alpha) ** t * gap0
        ok = ok and bool(np.all(np.abs(np.abs(registry.agents[0].data - probe.data) - expected) <= 1e-12))
    yield CheckResult("moving average: geometric convergence (agents)", ok, "|gap_t| = (1-a)^t |gap_0|")


def run_verification() -> list:
    """Every check result, in a stable order."""
    results = []
    for generator in (
        _check_bn_gradient,
        _check_rdsbn_gradients,
        _check_mdif_gradients,
        _check_loss_gradients,
        _check_composite_gradient,
        _check_normalization_invariants,
        _check_graph_invariants,
        _check_oracles,
        _check_moving_averages,
    ):
        results.extend(generator())
    return results
