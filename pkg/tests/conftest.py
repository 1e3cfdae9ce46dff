"""Shared fixtures and numeric helpers for the test suite."""

from __future__ import annotations

import pytest
import torch

from checkinrep.encoders import ModelConfig
from checkinrep.ingest import build_bundle, filter_and_segment, parse_checkins
from checkinrep.losses import LossWeights
from checkinrep.pretrain import PretrainConfig
from checkinrep.synth import SynthSpec, generate


def central_diff_grad(
    f, params: list[torch.Tensor], eps: float = 1e-6, order: int = 2
) -> list[torch.Tensor]:
    """Central finite differences of a scalar function of double tensors.

    ``order=4`` uses the five-point stencil, which keeps truncation error
    negligible for sharply curved objectives (small contrast temperatures).
    """
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()

            def at(delta: float) -> float:
                flat[i] = orig + delta
                return float(f())

            if order == 2:
                val = (at(eps) - at(-eps)) / (2 * eps)
            else:
                val = (at(-2 * eps) - 8 * at(-eps) + 8 * at(eps) - at(2 * eps)) / (12 * eps)
            flat[i] = orig
            gflat[i] = val
        grads.append(g)
    return grads


def max_rel_error(
    analytic: list[torch.Tensor], numeric: list[torch.Tensor], scale_floor: float = 1e-3
) -> float:
    """Largest discrepancy relative to each gradient tensor's own scale.

    Per-coordinate ratios blow up at gradient zero crossings, so the error is
    normalized by the tensor's max-magnitude entry (the usual gradcheck
    formulation). ``scale_floor`` turns the comparison absolute for tensors
    whose entire gradient sits below it, where finite differences return only
    cancellation noise.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a is None:
            a = torch.zeros_like(n)
        scale = max(float(a.abs().max()), float(n.abs().max()), scale_floor)
        worst = max(worst, float((a - n).abs().max()) / scale)
    return worst


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(rep_dim=24, emb_dim=12, proj_dim=16, cat_dim=8, geohash_bits=20)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_pretrain_config(**overrides) -> PretrainConfig:
    base = dict(
        epochs=2,
        patience=2,
        batch_size=16,
        seed=0,
        num_prototypes=4,
        queue_capacity=64,
        weights=LossWeights(),
        model=tiny_model_config(),
    )
    base.update(overrides)
    return PretrainConfig(**base)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Small planted-topic corpus shared across tests."""
    out = tmp_path_factory.mktemp("synth_corpus")
    spec = SynthSpec(num_users=12, num_topics=3, pois_per_topic=9, days=10, seed=7)
    result = generate(spec, out)
    return spec, result


@pytest.fixture(scope="session")
def small_bundle(synth_corpus):
    _, result = synth_corpus
    records = parse_checkins(result.checkins_path, fmt="generic-csv")
    seqs = filter_and_segment(records, min_user_records=5, min_loc_visits=1, history_days=365, gap_hours=8)
    return build_bundle(seqs, colocation_min_shared=2)
