"""Self-supervised pre-training loop.

Each step builds two positive views per sequence (spatial: two stochastic
feature dropouts; temporal: online encoder vs. momentum twin), evaluates
the combined contrastive objective, steps the optimizer, EMA-updates the
twin, refreshes both negative queues and re-normalizes the prototypes.
Early stopping monitors the validation total loss under a fixed RNG so
epochs stay comparable.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .encoders import (
    EncoderPair,
    CrossViewProjection,
    ModelConfig,
    SequenceFeaturizer,
    SocialBlock,
    SpatialEncoder,
    TemporalEncoder,
    config_hash,
)
from .ingest import CheckInSequence, DatasetBundle
from .losses import (
    LossWeights,
    PrototypeBank,
    RepresentationQueue,
    combine_terms,
    contrast_batch,
    cross_view_loss,
    spatial_loss,
)

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "basic", "no_stm", "no_tim", "no_stcv")

CHECKPOINT_VERSION = 1


@dataclass
class PretrainConfig:
    epochs: int = 100
    patience: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    ablation: str = "full"
    num_prototypes: int = 512
    queue_capacity: int = 2048
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    threads: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.patience > self.epochs:
            raise ValueError(f"patience ({self.patience}) cannot exceed epochs ({self.epochs})")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["weights"] = dict(self.weights.__dict__)
        d["model"] = self.model.to_dict()
        return d


class RepresentationModel(nn.Module):
    """All trainable pre-training components under one root module."""

    def __init__(self, bundle: DatasetBundle, cfg: PretrainConfig):
        super().__init__()
        mc = cfg.model
        self.cfg = cfg
        self.spatial = SpatialEncoder(bundle.num_locations, mc)
        self.temporal = EncoderPair(TemporalEncoder(mc), momentum=mc.momentum)
        self.social = SocialBlock(bundle.num_users, bundle.graph, bundle.user_vocab, mc)
        self.bank = PrototypeBank(cfg.num_prototypes, mc.rep_dim, tau=cfg.weights.tau_s)
        self.cross = CrossViewProjection(mc.rep_dim, mc.proj_dim, cfg.weights.tau_x_init)

    def encode_spatial(self, feat: SequenceFeaturizer, seqs: list[CheckInSequence], augment: bool) -> torch.Tensor:
        dtype = next(self.spatial.parameters()).dtype
        return self.spatial(feat.spatial_batch(seqs, dtype=dtype), augment=augment)

    def encode_temporal(
        self,
        feat: SequenceFeaturizer,
        seqs: list[CheckInSequence],
        use_momentum: bool = False,
        social_enabled: bool = True,
    ) -> torch.Tensor:
        dtype = next(self.spatial.parameters()).dtype
        tb = feat.temporal_batch(seqs, dtype=dtype)
        h_u = self.social(tb.users) if social_enabled else None
        return self.temporal(tb, h_u, use_momentum=use_momentum)

    def representations(
        self,
        feat: SequenceFeaturizer,
        seqs: list[CheckInSequence],
        social_enabled: bool = True,
    ) -> torch.Tensor:
        """Deterministic combined representation (z_spatial || z_temporal)."""
        if not seqs:
            return torch.zeros((0, 2 * self.cfg.model.rep_dim))
        z_s = self.encode_spatial(feat, seqs, augment=False)
        z_t = self.encode_temporal(feat, seqs, use_momentum=False, social_enabled=social_enabled)
        return torch.cat([z_s, z_t], dim=-1)


@dataclass
class TrainState:
    model: RepresentationModel
    featurizer: SequenceFeaturizer
    spatial_queue: RepresentationQueue
    temporal_queue: RepresentationQueue
    optimizer: torch.optim.Optimizer
    config: PretrainConfig
    vocab_sizes: dict
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    log: list[dict] = field(default_factory=list)


def total_pretrain_loss(
    model: RepresentationModel,
    feat: SequenceFeaturizer,
    seqs: list[CheckInSequence],
    spatial_queue: RepresentationQueue,
    temporal_queue: RepresentationQueue,
    weights: LossWeights,
    ablation: str = "full",
    update_queues: bool = False,
) -> tuple[torch.Tensor, dict[str, float]]:
    """One batch's combined objective with a per-term breakdown.

    Ablation switches swap the module-specific objectives for plain NT-Xent
    (or drop the cross-view term) while keeping everything else identical.
    """
    z_s_n = model.encode_spatial(feat, seqs, augment=True)
    z_s_m = model.encode_spatial(feat, seqs, augment=True)
    z_t_n = model.encode_temporal(feat, seqs, use_momentum=False)
    z_t_m = model.encode_temporal(feat, seqs, use_momentum=True)

    breakdown: dict[str, float] = {"L_C": 0.0, "L_R": 0.0, "skipped_anchors": 0.0}

    sq_z, sq_q = spatial_queue.contents()
    if ablation in ("full", "no_tim", "no_stcv"):
        sres = spatial_loss(
            z_s_n,
            z_s_m,
            model.bank.prototypes,
            tau=weights.tau_s,
            eta_c=weights.eta_c,
            queue_z=sq_z,
            queue_q=sq_q,
        )
        l_spatial = sres.total
        breakdown["L_C"] = float(sres.consistency.detach())
        breakdown["L_R"] = float(sres.reweighted.detach())
        breakdown["skipped_anchors"] = float(sres.n_skipped)
    else:  # plain in-batch + queue NT-Xent on the dropout pair
        l_spatial = contrast_batch(z_s_n, z_s_m, sq_z, sigma=0.0, tau=weights.tau_s).mean()

    tq_z, _ = temporal_queue.contents()
    sigma = weights.sigma_margin if ablation in ("full", "no_stm", "no_stcv") else 0.0
    l_temporal = contrast_batch(z_t_n, z_t_m, tq_z, sigma=sigma, tau=weights.tau_t).mean()

    if ablation in ("full", "no_stm", "no_tim"):
        p_s, p_t, tau_x = model.cross(z_s_n, z_t_n)
        l_cross = cross_view_loss(p_s, p_t, tau_x)
    else:
        l_cross = torch.zeros((), dtype=l_spatial.dtype)

    total, terms = combine_terms(l_spatial, l_temporal, l_cross, weights)
    breakdown.update(
        {
            "L_Spatial": terms["spatial"],
            "L_TAM": terms["temporal"],
            "L_ST": terms["cross_view"],
            "total": terms["total"],
        }
    )

    if update_queues:
        with torch.no_grad():
            spatial_queue.enqueue(z_s_n, model.bank.assign(z_s_n))
            temporal_queue.enqueue(z_t_m)
    return total, breakdown


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def _batches(n: int, batch_size: int, generator: torch.Generator) -> list[list[int]]:
    order = torch.randperm(n, generator=generator).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _validation_loss(
    model: RepresentationModel,
    feat: SequenceFeaturizer,
    seqs: list[CheckInSequence],
    state: TrainState,
    cfg: PretrainConfig,
) -> float:
    """Total loss over the validation split under a fixed augmentation RNG."""
    loss_sum, count = 0.0, 0
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 7919)
        with torch.no_grad():
            for i in range(0, len(seqs), cfg.batch_size):
                batch = seqs[i : i + cfg.batch_size]
                if len(batch) < 2:
                    continue
                total, _ = total_pretrain_loss(
                    model,
                    feat,
                    batch,
                    state.spatial_queue,
                    state.temporal_queue,
                    cfg.weights,
                    cfg.ablation,
                    update_queues=False,
                )
                loss_sum += float(total) * len(batch)
                count += len(batch)
    return loss_sum / max(count, 1)


def pretrain(bundle: DatasetBundle, cfg: PretrainConfig, run_dir: str | Path | None = None) -> TrainState:
    """Run self-supervised pre-training and return the best-validation state."""
    if not bundle.train:
        raise ValueError("bundle has an empty train split")
    if not bundle.val:
        raise ValueError("bundle has an empty validation split")

    torch.set_num_threads(cfg.threads)
    _seed_everything(cfg.seed)

    model = RepresentationModel(bundle, cfg)
    feat = SequenceFeaturizer(bundle, cfg.model)
    spatial_queue = RepresentationQueue(cfg.queue_capacity, cfg.model.rep_dim, cfg.num_prototypes)
    temporal_queue = RepresentationQueue(cfg.queue_capacity, cfg.model.rep_dim)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    state = TrainState(
        model=model,
        featurizer=feat,
        spatial_queue=spatial_queue,
        temporal_queue=temporal_queue,
        optimizer=optimizer,
        config=cfg,
        vocab_sizes={"users": bundle.num_users, "locations": bundle.num_locations},
    )

    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (run_dir / "pretrain_log.jsonl").open("w", encoding="utf-8")

    def emit(entry: dict) -> None:
        state.log.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")

    gen = torch.Generator().manual_seed(cfg.seed)
    best_snapshot = copy.deepcopy(model.state_dict())
    epochs_since_best = 0
    try:
        if cfg.epochs > 0:
            emit({"kind": "init", "val_total": _validation_loss(model, feat, bundle.val, state, cfg)})
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            for batch_idx in _batches(len(bundle.train), cfg.batch_size, gen):
                if len(batch_idx) < 2:
                    continue
                batch = [bundle.train[i] for i in batch_idx]
                total, breakdown = total_pretrain_loss(
                    model,
                    feat,
                    batch,
                    spatial_queue,
                    temporal_queue,
                    cfg.weights,
                    cfg.ablation,
                    update_queues=True,
                )
                if not torch.isfinite(total):
                    users = sorted({s.user for s in batch})
                    raise FloatingPointError(
                        f"non-finite pre-training loss at step {state.step} "
                        f"(epoch {epoch}, users {users[:8]}...): {breakdown}"
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                model.temporal.momentum_update()
                model.bank.renormalize()
                state.step += 1
                emit({"kind": "step", "step": state.step, "epoch": epoch, **breakdown})

            val_total = _validation_loss(model, feat, bundle.val, state, cfg)
            improved = val_total < state.best_val
            if improved:
                state.best_val = val_total
                best_snapshot = copy.deepcopy(model.state_dict())
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            emit(
                {
                    "kind": "epoch",
                    "epoch": epoch,
                    "val_total": val_total,
                    "best_val": state.best_val,
                    "improved": improved,
                }
            )
            if cfg.patience > 0 and epochs_since_best >= cfg.patience:
                logger.info("early stop at epoch %d (no improvement for %d epochs)", epoch, cfg.patience)
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    model.load_state_dict(best_snapshot)
    return state


# ---------------------------------------------------------------------------
# Representation export
# ---------------------------------------------------------------------------


def export_representations(state: TrainState, seqs: list[CheckInSequence]) -> np.ndarray:
    """Deterministic (z_spatial || z_temporal) rows, one per input sequence."""
    model = state.model
    feat = state.featurizer
    out = np.zeros((len(seqs), 2 * state.config.model.rep_dim), dtype=np.float32)
    with torch.no_grad():
        for i in range(0, len(seqs), state.config.batch_size):
            chunk = seqs[i : i + state.config.batch_size]
            if not chunk:
                continue
            out[i : i + len(chunk)] = model.representations(feat, chunk).numpy()
    return out


def save_representations(state: TrainState, seqs: list[CheckInSequence], out_path: str | Path) -> Path:
    """CSV matrix plus a JSON sidecar mapping rows to (user, start_t)."""
    out_path = Path(out_path)
    reps = export_representations(state, seqs)
    np.savetxt(out_path, reps, delimiter=",")
    sidecar = [{"row": i, "user": s.user, "start_t": s.start_t, "length": len(s)} for i, s in enumerate(seqs)]
    with out_path.with_suffix(".rows.json").open("w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")
    return out_path


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_dict = state.config.to_dict()
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "vocab_sizes": state.vocab_sizes,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "spatial_queue": state.spatial_queue.state_dict(),
        "temporal_queue": state.temporal_queue.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "best_val": state.best_val,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, bundle: DatasetBundle) -> TrainState:
    """Rebuild a TrainState from disk; refuses on vocabulary mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    vocab_sizes = payload["vocab_sizes"]
    if vocab_sizes["users"] != bundle.num_users or vocab_sizes["locations"] != bundle.num_locations:
        raise ValueError(
            "checkpoint/bundle vocabulary mismatch: "
            f"checkpoint has {vocab_sizes}, bundle has "
            f"{{'users': {bundle.num_users}, 'locations': {bundle.num_locations}}}"
        )

    cfg_dict = dict(payload["config"])
    weights = LossWeights(**cfg_dict.pop("weights"))
    model_cfg = ModelConfig(**cfg_dict.pop("model"))
    cfg = PretrainConfig(weights=weights, model=model_cfg, **cfg_dict)

    model = RepresentationModel(bundle, cfg)
    model.load_state_dict(payload["model"])
    feat = SequenceFeaturizer(bundle, cfg.model)
    spatial_queue = RepresentationQueue(cfg.queue_capacity, cfg.model.rep_dim, cfg.num_prototypes)
    spatial_queue.load_state_dict(payload["spatial_queue"])
    temporal_queue = RepresentationQueue(cfg.queue_capacity, cfg.model.rep_dim)
    temporal_queue.load_state_dict(payload["temporal_queue"])
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    optimizer.load_state_dict(payload["optimizer"])
    return TrainState(
        model=model,
        featurizer=feat,
        spatial_queue=spatial_queue,
        temporal_queue=temporal_queue,
        optimizer=optimizer,
        config=cfg,
        vocab_sizes=vocab_sizes,
        step=payload["step"],
        epoch=payload["epoch"],
        best_val=payload["best_val"],
    )
