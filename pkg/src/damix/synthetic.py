"""Deterministic multi-domain benchmark data.

Each domain owns a set of identity prototypes and a fixed style: a
mixing matrix close to the identity plus a per-channel shift. A sample
is its identity's prototype plus Gaussian jitter, pushed through the
domain style. Identities never repeat across domains, so the global
label set is a disjoint union, and two domains showing "the same"
underlying geometry still disagree in channel statistics. That is the
whole point: a normalizer that pools all domains into one set of
statistics has to split the difference between styles, while
domain-aware branches can undo each style separately.

All randomness flows from a single seed through three separate
streams (structure, training noise, evaluation noise), so regenerating
with the same spec is bitwise reproducible and the evaluation split
never disturbs the training draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .pipeline import DomainDataset

__all__ = ["SyntheticSpec", "generate_synthetic", "make_eval_split"]


@dataclass(frozen=True)
class SyntheticSpec:
    num_domains: int = 3
    identities_per_domain: int = 10
    samples_per_identity: int = 8
    dim: int = 16
    positions: int = 4
    noise_scale: float = 0.1
    style_strength: float = 0.4
    shift_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_domains", "identities_per_domain", "samples_per_identity", "dim", "positions"):
            value = getattr(self, name)
            if int(value) < 1:
                raise ConfigError(f"{name} must be at least 1, got {value}")
        for name in ("noise_scale", "style_strength", "shift_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


def _streams(spec: SyntheticSpec):
    structure, train, heldout = np.random.SeedSequence(spec.seed).spawn(3)
    return (
        np.random.default_rng(structure),
        np.random.default_rng(train),
        np.random.default_rng(heldout),
    )


def _domain_structure(spec: SyntheticSpec, rng):
    """Prototypes and styles for every domain, in domain order."""
    out = []
    for _ in range(spec.num_domains):
        prototypes = rng.normal(size=(spec.identities_per_domain, spec.dim, spec.positions))
        mix = np.eye(spec.dim) + spec.style_strength * rng.normal(size=(spec.dim, spec.dim)) / np.sqrt(spec.dim)
        scale = np.exp(spec.style_strength * rng.normal(size=spec.dim))
        shift = spec.shift_scale * rng.normal(size=spec.dim)
        out.append((prototypes, scale[:, None] * mix, shift))
    return out


def _stylize(raw, mix, shift):
    # raw: (n, dim, positions); the style acts on channels at every position
    return np.einsum("ij,njl->nil", mix, raw) + shift[None, :, None]


def generate_synthetic(spec: SyntheticSpec) -> list:
    """Training datasets, one per domain, with disjoint global identity labels."""
    structure_rng, train_rng, _ = _streams(spec)
    structure = _domain_structure(spec, structure_rng)
    datasets = []
    for d, (prototypes, mix, shift) in enumerate(structure):
        rows = []
        labels = []
        for i in range(spec.identities_per_domain):
            jitter = spec.noise_scale * train_rng.normal(
                size=(spec.samples_per_identity, spec.dim, spec.positions)
            )
            rows.append(prototypes[i][None] + jitter)
            labels.extend([d * spec.identities_per_domain + i] * spec.samples_per_identity)
        inputs = _stylize(np.concatenate(rows), mix, shift)
        datasets.append(DomainDataset(domain=d, inputs=inputs, labels=np.asarray(labels), role="source"))
    return datasets


def make_eval_split(spec: SyntheticSpec, domain: int, queries_per_identity: int = 2, gallery_per_identity: int = 4):
    """Fresh-noise probe and gallery samples for one domain's identities.

    Same prototypes and style as the training draw, new jitter, so a
    model is scored on samples it never touched during training.
    Returns (query_inputs, query_ids, gallery_inputs, gallery_ids).
    """
    if not 0 <= int(domain) < spec.num_domains:
        raise ConfigError(f"domain {domain} outside [0, {spec.num_domains})")
    if queries_per_identity < 1 or gallery_per_identity < 1:
        raise ConfigError("evaluation split needs at least one sample per identity on each side")
    structure_rng, _, eval_rng = _streams(spec)
    structure = _domain_structure(spec, structure_rng)
    prototypes, mix, shift = structure[int(domain)]
    per_identity = queries_per_identity + gallery_per_identity
    queries, gallery, query_ids, gallery_ids = [], [], [], []
    for i in range(spec.identities_per_domain):
        jitter = spec.noise_scale * eval_rng.normal(size=(per_identity, spec.dim, spec.positions))
        samples = _stylize(prototypes[i][None] + jitter, mix, shift)
        queries.append(samples[:queries_per_identity])
        gallery.append(samples[queries_per_identity:])
        label = int(domain) * spec.identities_per_domain + i
        query_ids.extend([label] * queries_per_identity)
        gallery_ids.extend([label] * gallery_per_identity)
    return (
        np.concatenate(queries),
        np.asarray(query_ids),
        np.concatenate(gallery),
        np.asarray(gallery_ids),
    )
