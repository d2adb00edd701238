"""Agent construction, graph structure, and fused forward passes."""

import numpy as np
import pytest

from damix import graph_fusion as gf
from damix import numerics as nx
from damix.errors import (
    ConfigError,
    DegenerateWeightsError,
    DomainLookupError,
    SamplerContractError,
    ShapeError,
    StateError,
)
from damix.graph_fusion import AgentRegistry, GraphSpec, MdifParams
from damix.numerics import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def random_params(channels, seed, slope=0.01):
    r = rng(seed)
    return MdifParams(
        w1=Tensor(r.normal(scale=0.3, size=(channels, channels)), requires_grad=True),
        w2=Tensor(r.normal(scale=0.3, size=(channels, channels)), requires_grad=True),
        slope=slope,
    )


def populated_registry(channels, domains, seed, alpha=0.1):
    registry = AgentRegistry(channels, domains, alpha=alpha)
    r = rng(seed)
    for d in domains:
        gf.update_agent(registry, d, Tensor(r.normal(size=channels)), alpha=1.0)
    return registry


# ---------------------------------------------------------------------------
# Agents


def test_default_head_combines_to_the_mean():
    registry = AgentRegistry(3, domains=[0])
    feats = Tensor(rng(1).normal(size=(5, 3)))
    agent = gf.compute_agent(feats, registry)
    np.testing.assert_allclose(agent.data, feats.data.mean(axis=0), atol=1e-12)


def test_single_row_is_its_own_agent():
    registry = AgentRegistry(4, domains=[0])
    row = rng(2).normal(size=(1, 4))
    np.testing.assert_allclose(gf.compute_agent(Tensor(row), registry).data, row[0], atol=1e-15)


def test_hand_weighted_combination():
    # logits (1, 3) normalize to (0.25, 0.75): agent = 0.25u + 0.75v
    registry = AgentRegistry(2, domains=[0])
    registry.head_weight = Tensor([[1.0], [0.0]], requires_grad=True)
    registry.head_bias = Tensor([0.0], requires_grad=True)
    u, v = [1.0, 5.0], [3.0, -1.0]
    agent = gf.compute_agent(Tensor([u, v]), registry)
    np.testing.assert_allclose(agent.data, [2.5, 0.5], atol=1e-12)


def test_zero_logit_sum_is_degenerate():
    registry = AgentRegistry(1, domains=[0])
    registry.head_weight = Tensor([[1.0]], requires_grad=True)
    registry.head_bias = Tensor([0.0], requires_grad=True)
    with pytest.raises(DegenerateWeightsError):
        gf.compute_agent(Tensor([[1.0], [-1.0]]), registry)


def test_update_agent_extremes_and_two_step_unroll():
    registry = AgentRegistry(2, domains=[0])
    v = np.array([4.0, -2.0])
    gf.update_agent(registry, 0, Tensor(v), alpha=1.0)
    np.testing.assert_array_equal(registry.agent(0).data, v)
    gf.update_agent(registry, 0, Tensor(np.zeros(2)), alpha=0.0)
    np.testing.assert_array_equal(registry.agent(0).data, v)

    fresh = AgentRegistry(2, domains=[0])
    for _ in range(2):
        gf.update_agent(fresh, 0, Tensor(v), alpha=0.1)
    # (1-0.9^2) * v, unrolled by hand
    np.testing.assert_allclose(fresh.agent(0).data, 0.19 * v, atol=1e-12)
    assert fresh.steps[0] == 2


def test_update_agent_validation():
    registry = AgentRegistry(2, domains=[0])
    with pytest.raises(ConfigError):
        gf.update_agent(registry, 0, Tensor(np.zeros(2)), alpha=1.2)
    with pytest.raises(DomainLookupError):
        gf.update_agent(registry, 7, Tensor(np.zeros(2)), alpha=0.5)
    with pytest.raises(ShapeError):
        gf.update_agent(registry, 0, Tensor(np.zeros(3)), alpha=0.5)


def test_absorb_seeds_from_the_first_batch():
    registry = AgentRegistry(2, domains=[0], alpha=0.1)
    first = Tensor([2.0, 3.0])
    registry.absorb(0, first)
    np.testing.assert_array_equal(registry.agent(0).data, first.data)
    registry.absorb(0, Tensor([0.0, 0.0]))
    np.testing.assert_allclose(registry.agent(0).data, 0.9 * first.data, atol=1e-15)


def test_registry_converges_geometrically():
    registry = AgentRegistry(2, domains=[0], alpha=0.25)
    target = np.array([1.0, -3.0])
    registry.absorb(0, Tensor(np.zeros(2)))  # seed at zero
    gap0 = np.abs(registry.agent(0).data - target)
    for t in range(1, 9):
        registry.absorb(0, Tensor(target))
        np.testing.assert_allclose(
            np.abs(registry.agent(0).data - target), 0.75**t * gap0, atol=1e-12
        )


# ---------------------------------------------------------------------------
# Graph structure


@pytest.mark.parametrize("num_domains", [1, 2, 3, 4])
@pytest.mark.parametrize("per_domain", list(range(9)))
def test_adjacency_structure_over_grid(num_domains, per_domain):
    n_inst = num_domains * per_domain
    for layer in (1, 2):
        spec = gf.build_adjacency(num_domains, per_domain, layer)
        a = spec.adjacency.data
        assert a.shape == (n_inst + num_domains,) * 2
        np.testing.assert_array_equal(a, a.T)
        np.testing.assert_array_equal(np.diag(a), np.ones(len(a)))

        expected = np.eye(len(a))
        expected[n_inst:, n_inst:] = 1.0
        if layer == 2:
            for d in range(num_domains):
                rows = np.arange(d * per_domain, (d + 1) * per_domain)
                expected[rows, n_inst + d] = 1.0
                expected[n_inst + d, rows] = 1.0
        np.testing.assert_array_equal(a, expected)

        norm = spec.normalized.data
        np.testing.assert_array_equal(norm, norm.T)
        deg = a.sum(axis=1)
        assert deg.min() >= 1.0
        np.testing.assert_allclose(norm, a / np.sqrt(np.outer(deg, deg)), atol=0)


def test_three_agent_clique_normalizes_to_exact_thirds():
    for per_domain in (0, 2, 5):
        spec = gf.build_adjacency(3, per_domain, 1)
        block = spec.normalized.data[3 * per_domain:, 3 * per_domain:]
        np.testing.assert_array_equal(block, np.full((3, 3), 1.0 / 3.0))


def test_layer2_instance_agent_coefficient():
    spec = gf.build_adjacency(2, 1, 2)
    # instance degree 2, agent degree 3
    np.testing.assert_array_equal(spec.adjacency.data.sum(axis=1), [2, 2, 3, 3])
    assert spec.normalized.data[0, 2] == 1.0 / np.sqrt(6.0)


def test_build_adjacency_validation():
    with pytest.raises(ConfigError):
        gf.build_adjacency(0, 2, 1)
    with pytest.raises(ConfigError):
        gf.build_adjacency(2, -1, 1)
    with pytest.raises(ConfigError):
        gf.build_adjacency(2, 2, 3)


# ---------------------------------------------------------------------------
# Graph convolution


def test_gcn_layer_identity_path():
    eye = np.eye(3)
    spec = GraphSpec(num_domains=3, per_domain=0, layer=1, adjacency=Tensor(eye), normalized=Tensor(eye))
    h = Tensor(rng(3).uniform(0.0, 2.0, size=(3, 4)))
    out = gf.gcn_layer(h, spec, Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, h.data)


def test_gcn_layer_zero_weights():
    spec = gf.build_adjacency(2, 1, 2)
    h = Tensor(rng(4).normal(size=(4, 3)))
    np.testing.assert_array_equal(gf.gcn_layer(h, spec, Tensor(np.zeros((3, 3)))).data, np.zeros((4, 3)))


def test_gcn_layer_matches_scalar_loops():
    spec = gf.build_adjacency(1, 4, 2)  # 5 nodes
    r = rng(5)
    h = r.normal(size=(5, 3))
    w = r.normal(size=(3, 3))
    slope = 0.05
    out = gf.gcn_layer(Tensor(h), spec, Tensor(w), slope=slope).data

    a_norm = spec.normalized.data
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            z = 0.0
            for k in range(5):
                for c in range(3):
                    z += a_norm[i, k] * h[k, c] * w[c, j]
            expected[i, j] = z if z > 0 else slope * z
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gcn_layer_node_count_mismatch():
    spec = gf.build_adjacency(2, 1, 1)
    with pytest.raises(ShapeError):
        gf.gcn_layer(Tensor(np.zeros((3, 2))), spec, Tensor(np.eye(2)))


def test_layer1_agent_rows_match_agent_only_clique():
    r = rng(6)
    num_domains, per_domain, channels = 3, 2, 4
    agents = r.normal(size=(num_domains, channels))
    instances = r.normal(size=(num_domains * per_domain, channels))
    w = r.normal(size=(channels, channels))
    full = gf.gcn_layer(
        Tensor(np.vstack([instances, agents])), gf.build_adjacency(num_domains, per_domain, 1), Tensor(w)
    )
    alone = gf.gcn_layer(Tensor(agents), gf.build_adjacency(num_domains, 0, 1), Tensor(w))
    np.testing.assert_allclose(full.data[num_domains * per_domain:], alone.data, atol=1e-12)


# ---------------------------------------------------------------------------
# Fused forward


def test_zero_parameters_leave_features_untouched():
    r = rng(7)
    h0 = Tensor(r.normal(size=(6, 4)))
    ids = [0, 0, 1, 1, 2, 2]
    registry = AgentRegistry(4, domains=[0, 1, 2])
    out = gf.mdif_forward(h0, ids, MdifParams.zeros(4), registry, "train")
    np.testing.assert_array_equal(out.data, h0.data)

    populated = populated_registry(4, [0, 1, 2], seed=8)
    out_eval = gf.mdif_forward(h0, ids, MdifParams.zeros(4), populated, "eval")
    np.testing.assert_array_equal(out_eval.data, h0.data)


def test_train_forward_matches_explicit_matrix_oracle():
    r = rng(9)
    num_domains, per_domain, channels = 3, 2, 4
    h0 = r.normal(size=(num_domains * per_domain, channels))
    ids = np.array([2, 0, 1, 0, 2, 1])
    params = random_params(channels, seed=10, slope=0.02)
    registry = AgentRegistry(channels, domains=[0, 1, 2])
    head_w = r.normal(size=(channels, 1))
    head_b = r.normal(size=1)
    registry.head_weight = Tensor(head_w, requires_grad=True)
    registry.head_bias = Tensor(head_b, requires_grad=True)

    out = gf.mdif_forward(Tensor(h0), ids, params, registry, "train").data

    def leaky(z, s):
        return np.where(z > 0, z, s * z)

    groups = [np.flatnonzero(ids == d) for d in np.unique(ids)]
    order = np.concatenate(groups)
    agents = []
    for members in groups:
        rows = h0[members]
        logits = rows @ head_w + head_b
        weights = logits / logits.sum()
        agents.append((weights * rows).sum(axis=0))
    nodes = np.vstack([h0[order], np.stack(agents)])
    a1 = gf.build_adjacency(num_domains, per_domain, 1).normalized.data
    a2 = gf.build_adjacency(num_domains, per_domain, 2).normalized.data
    h1 = leaky(a1 @ nodes @ params.w1.data, params.slope)
    h2 = leaky(a2 @ h1 @ params.w2.data, params.slope)
    expected = np.empty_like(h0)
    expected[order] = h0[order] + h2[: num_domains * per_domain]
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_train_forward_updates_registry_with_detached_agents():
    r = rng(11)
    h0 = Tensor(r.normal(size=(4, 3)))
    registry = AgentRegistry(3, domains=[0, 1], alpha=0.1)
    gf.mdif_forward(h0, [0, 0, 1, 1], random_params(3, seed=12), registry, "train")
    assert registry.steps == {0: 1, 1: 1}
    np.testing.assert_allclose(registry.agent(0).data, h0.data[:2].mean(axis=0), atol=1e-12)
    gf.mdif_forward(h0, [0, 0, 1, 1], random_params(3, seed=12), registry, "train")
    assert registry.steps == {0: 2, 1: 2}


def test_eval_forward_matches_single_instance_graph_oracle():
    r = rng(13)
    channels = 4
    num_domains = 3
    h0 = r.normal(size=(5, channels))
    params = random_params(channels, seed=14, slope=0.03)
    registry = populated_registry(channels, [0, 1, 2], seed=15)
    out = gf.mdif_forward(Tensor(h0), [0, 1, 2, 0, 1], params, registry, "eval").data

    def leaky(z, s):
        return np.where(z > 0, z, s * z)

    def normalize(a):
        deg = a.sum(axis=1)
        return a / np.sqrt(np.outer(deg, deg))

    # One instance plus the agent clique; the instance hooks to one agent
    # in the second layer. The result must not depend on which agent.
    agents = np.stack([registry.agent(d).data for d in registry.domains])
    a1 = np.eye(1 + num_domains)
    a1[1:, 1:] = 1.0
    for i in range(h0.shape[0]):
        per_tag = []
        for own in range(num_domains):
            a2 = a1.copy()
            a2[0, 1 + own] = a2[1 + own, 0] = 1.0
            nodes = np.vstack([h0[i : i + 1], agents])
            h1 = leaky(normalize(a1) @ nodes @ params.w1.data, params.slope)
            h2 = leaky(normalize(a2) @ h1 @ params.w2.data, params.slope)
            per_tag.append(h0[i] + h2[0])
        for candidate in per_tag:
            np.testing.assert_allclose(out[i], candidate, atol=1e-12)


def test_eval_is_independent_of_other_rows_bitwise():
    r = rng(16)
    h0 = r.normal(size=(4, 3))
    params = random_params(3, seed=17)
    registry = populated_registry(3, [0, 1], seed=18)
    base = gf.mdif_forward(Tensor(h0), [0, 1, 0, 1], params, registry, "eval").data
    tampered = h0.copy()
    tampered[2] = 99.0
    after = gf.mdif_forward(Tensor(tampered), [0, 1, 0, 1], params, registry, "eval").data
    assert base[0].tobytes() == after[0].tobytes()
    assert base[1].tobytes() == after[1].tobytes()
    assert base[3].tobytes() == after[3].tobytes()


def test_eval_batched_equals_one_at_a_time():
    r = rng(19)
    h0 = r.normal(size=(6, 3))
    params = random_params(3, seed=20)
    registry = populated_registry(3, [0, 1, 2], seed=21)
    batched = gf.mdif_forward(Tensor(h0), [0, 1, 2, 0, 1, 2], params, registry, "eval").data
    for i in range(6):
        single = gf.mdif_forward(Tensor(h0[i : i + 1]), [0], params, registry, "eval").data
        np.testing.assert_allclose(batched[i], single[0], atol=1e-12)


def test_eval_requires_a_populated_registry():
    registry = AgentRegistry(3, domains=[0, 1])
    registry.absorb(0, Tensor(np.ones(3)))  # domain 1 still empty
    with pytest.raises(StateError):
        gf.mdif_forward(Tensor(np.zeros((2, 3))), [0, 0], random_params(3, seed=22), registry, "eval")


def test_train_validation():
    registry = AgentRegistry(3, domains=[0, 1])
    params = random_params(3, seed=23)
    with pytest.raises(DomainLookupError):
        gf.mdif_forward(Tensor(np.zeros((2, 3))), [0, 9], params, registry, "train")
    assert registry.steps == {0: 0, 1: 0}
    with pytest.raises(SamplerContractError):
        gf.mdif_forward(Tensor(rng(24).normal(size=(3, 3))), [0, 0, 1], params, registry, "train")
    with pytest.raises(ConfigError):
        gf.mdif_forward(Tensor(np.zeros((2, 3))), [0, 0], params, registry, "test")


# ---------------------------------------------------------------------------
# Gradients


def test_gradients_for_all_trainable_pieces():
    r = rng(25)
    channels = 3
    h0 = Tensor(r.normal(size=(6, channels)))
    ids = [0, 1, 2, 0, 1, 2]
    params = random_params(channels, seed=26)
    registry = AgentRegistry(channels, domains=[0, 1, 2])
    registry.head_weight = Tensor(r.normal(scale=0.3, size=(channels, 1)), requires_grad=True)
    registry.head_bias = Tensor(r.normal(size=1), requires_grad=True)
    w = Tensor(r.normal(size=(6, channels)))

    def loss():
        return nx.sum(nx.mul(gf.mdif_forward(h0, ids, params, registry, "train"), w))

    checks = {
        "h0": nx.check_gradients(lambda t: nx.sum(nx.mul(gf.mdif_forward(t, ids, params, registry, "train"), w)), h0),
        "w1": nx.check_gradients(lambda t: (setattr(params, "w1", t), loss())[1], params.w1),
        "w2": nx.check_gradients(lambda t: (setattr(params, "w2", t), loss())[1], params.w2),
        "head_weight": nx.check_gradients(
            lambda t: (setattr(registry, "head_weight", t), loss())[1], registry.head_weight
        ),
        "head_bias": nx.check_gradients(
            lambda t: (setattr(registry, "head_bias", t), loss())[1], registry.head_bias
        ),
    }
    for name, report in checks.items():
        assert report.passed, f"{name}: {report}"
