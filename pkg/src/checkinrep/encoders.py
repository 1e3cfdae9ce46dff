"""Trainable representation machinery.

Turns check-in sequences into fixed-size spatial and temporal
representations:

* spatial view: geohash character embeddings (mean-pooled per step),
  a category text vector and a location embedding, encoded by a Bi-GRU;
* temporal view: 48-slot time-of-week features plus the normalized log
  inter-event gap, encoded by a Bi-GRU whose momentum-updated twin serves
  as the stable augmentation path, fused with a GAT-refined user embedding;
* projection heads mapping both views into the shared contrast space.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .geocode import NUM_TIME_SLOTS, geohash_encode, time_slot
from .ingest import CheckInSequence, DatasetBundle, SocialGraph, Vocab


@dataclass
class ModelConfig:
    """Architecture knobs; defaults follow the reference configuration."""

    rep_dim: int = 256  # sequence representation width (h)
    emb_dim: int = 256  # embedding width (d)
    proj_dim: int = 512  # cross-view projection width
    cat_dim: int = 64  # category text vector width
    geohash_bits: int = 32
    use_time_embedding: bool = False  # raw one-hot slots work better by default
    time_emb_dim: int = 256
    gat_layers: int = 2
    feature_dropout: float = 0.1  # SimCSE-style augmentation dropout
    leaky_relu_slope: float = 0.2
    momentum: float = 0.995  # EMA coefficient of the temporal twin

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Category text provider
# ---------------------------------------------------------------------------


class HashedBagOfWords:
    """Deterministic fallback text vectorizer.

    Tokens are hashed (md5, stable across processes) into ``dim`` buckets with
    a sign bit; the count vector is L2-normalized. Empty text maps to zeros.
    Any callable str -> array of the same width can replace it, e.g. a
    pre-trained sentence encoder.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim, dtype=np.float32)
        tokens = text.lower().split()
        for tok in tokens:
            digest = hashlib.md5(tok.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        self._cache[text] = vec
        return vec


# ---------------------------------------------------------------------------
# Sequence featurization
# ---------------------------------------------------------------------------


@dataclass
class SpatialBatch:
    geo_chars: torch.Tensor  # (B, L, n_chars) long
    loc: torch.Tensor  # (B, L) long
    cat: torch.Tensor  # (B, L, cat_dim) float
    lengths: torch.Tensor  # (B,) long


@dataclass
class TemporalBatch:
    slot: torch.Tensor  # (B, L) long
    log_dt: torch.Tensor  # (B, L) float
    lengths: torch.Tensor  # (B,) long
    users: torch.Tensor  # (B,) long


class SequenceFeaturizer:
    """Converts sequences to padded tensor batches using the bundle's
    vocabularies, timezone offset and log inter-event statistics."""

    def __init__(self, bundle: DatasetBundle, cfg: ModelConfig, cat_provider=None):
        self.user_vocab: Vocab = bundle.user_vocab
        self.loc_vocab: Vocab = bundle.loc_vocab
        self.tz_offset = bundle.tz_offset_hours
        self.log_dt_mean = bundle.log_dt_mean
        self.log_dt_std = bundle.log_dt_std
        self.cfg = cfg
        self.cat_provider = cat_provider if cat_provider is not None else HashedBagOfWords(cfg.cat_dim)
        self.n_geo_chars = math.ceil(cfg.geohash_bits / 5)
        # keyed by the (frozen, hashable) sequence itself: id()-based keys go
        # stale when short-lived prefix sequences are garbage collected
        self._cache: dict[CheckInSequence, tuple] = {}

    def _featurize(self, seq: CheckInSequence) -> tuple:
        cached = self._cache.get(seq)
        if cached is not None:
            return cached
        n = len(seq.records)
        geo = np.zeros((n, self.n_geo_chars), dtype=np.int64)
        loc = np.zeros(n, dtype=np.int64)
        cat = np.zeros((n, self.cfg.cat_dim), dtype=np.float32)
        slot = np.zeros(n, dtype=np.int64)
        log_dt = np.zeros(n, dtype=np.float32)
        for i, r in enumerate(seq.records):
            geo[i] = geohash_encode(r.lat, r.lon, self.cfg.geohash_bits).char_indices
            loc[i] = self.loc_vocab.encode(r.lid)
            cat[i] = self.cat_provider(r.cat)
            slot[i] = time_slot(r.t, self.tz_offset)
            if i > 0:
                dt = max(seq.records[i].t - seq.records[i - 1].t, 1.0)
                log_dt[i] = (math.log(dt) - self.log_dt_mean) / self.log_dt_std
        user = self.user_vocab.encode(seq.user)
        out = (geo, loc, cat, slot, log_dt, user)
        self._cache[seq] = out
        return out

    def spatial_batch(self, seqs: list[CheckInSequence], dtype=torch.float32) -> SpatialBatch:
        feats = [self._featurize(s) for s in seqs]
        lengths = [f[0].shape[0] for f in feats]
        b, lmax = len(seqs), max(lengths)
        geo = torch.zeros((b, lmax, self.n_geo_chars), dtype=torch.long)
        loc = torch.zeros((b, lmax), dtype=torch.long)
        cat = torch.zeros((b, lmax, self.cfg.cat_dim), dtype=dtype)
        for i, f in enumerate(feats):
            n = lengths[i]
            geo[i, :n] = torch.from_numpy(f[0])
            loc[i, :n] = torch.from_numpy(f[1])
            cat[i, :n] = torch.from_numpy(f[2]).to(dtype)
        return SpatialBatch(geo, loc, cat, torch.tensor(lengths, dtype=torch.long))

    def temporal_batch(self, seqs: list[CheckInSequence], dtype=torch.float32) -> TemporalBatch:
        feats = [self._featurize(s) for s in seqs]
        lengths = [f[3].shape[0] for f in feats]
        b, lmax = len(seqs), max(lengths)
        slot = torch.zeros((b, lmax), dtype=torch.long)
        log_dt = torch.zeros((b, lmax), dtype=dtype)
        users = torch.zeros(b, dtype=torch.long)
        for i, f in enumerate(feats):
            n = lengths[i]
            slot[i, :n] = torch.from_numpy(f[3])
            log_dt[i, :n] = torch.from_numpy(f[4]).to(dtype)
            users[i] = f[5]
        return TemporalBatch(slot, log_dt, torch.tensor(lengths, dtype=torch.long), users)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


class _BiGruPool(nn.Module):
    """Bidirectional GRU pooled by concatenating both directions' final
    states and projecting back to ``rep_dim``."""

    def __init__(self, input_dim: int, rep_dim: int):
        super().__init__()
        self.gru = nn.GRU(input_dim, rep_dim, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * rep_dim, rep_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)  # (2, B, rep_dim)
        pooled = torch.cat([h_n[0], h_n[1]], dim=-1)
        return self.out(pooled)


class SpatialEncoder(nn.Module):
    """Encodes geohash characters, category vectors and location ids."""

    def __init__(self, num_locations: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.geo_emb = nn.Embedding(32, cfg.emb_dim)
        self.loc_emb = nn.Embedding(num_locations, cfg.emb_dim)
        self.cat_proj = nn.Linear(cfg.cat_dim, cfg.emb_dim)
        self.encoder = _BiGruPool(3 * cfg.emb_dim, cfg.rep_dim)

    def forward(self, batch: SpatialBatch, augment: bool) -> torch.Tensor:
        geo = self.geo_emb(batch.geo_chars).mean(dim=2)  # (B, L, d)
        cat = self.cat_proj(batch.cat)
        loc = self.loc_emb(batch.loc)
        x = torch.cat([geo, cat, loc], dim=-1)
        if augment:
            x = F.dropout(x, p=self.cfg.feature_dropout, training=True)
        return self.encoder(x, batch.lengths)


class TemporalEncoder(nn.Module):
    """Encodes time-of-week slots and normalized log gaps, then fuses a
    user embedding refined by the social block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.use_time_embedding:
            self.slot_emb = nn.Embedding(NUM_TIME_SLOTS, cfg.time_emb_dim)
            input_dim = cfg.time_emb_dim + 1
        else:
            self.slot_emb = None
            input_dim = NUM_TIME_SLOTS + 1
        self.encoder = _BiGruPool(input_dim, cfg.rep_dim)
        self.fuse = nn.Linear(cfg.rep_dim + cfg.emb_dim, cfg.rep_dim)

    def forward(self, batch: TemporalBatch, h_u: torch.Tensor | None) -> torch.Tensor:
        if self.slot_emb is not None:
            base = self.slot_emb(batch.slot)
        else:
            base = F.one_hot(batch.slot, NUM_TIME_SLOTS).to(batch.log_dt.dtype)
        x = torch.cat([base, batch.log_dt.unsqueeze(-1)], dim=-1)
        z = self.encoder(x, batch.lengths)
        if h_u is None:
            h_u = torch.zeros(z.shape[0], self.cfg.emb_dim, dtype=z.dtype, device=z.device)
        return self.fuse(torch.cat([z, h_u], dim=-1))


class EncoderPair(nn.Module):
    """Online encoder plus its momentum-updated twin.

    The twin never receives gradients; its parameters follow the online
    encoder as an exponential moving average.
    """

    def __init__(self, online: nn.Module, momentum: float):
        super().__init__()
        if not (0.0 <= momentum <= 1.0):
            raise ValueError(f"momentum coefficient must lie in [0, 1], got {momentum}")
        self.online = online
        self.twin = copy.deepcopy(online)
        for p in self.twin.parameters():
            p.requires_grad_(False)
        self.momentum = momentum

    def forward(self, *args, use_momentum: bool = False, **kwargs) -> torch.Tensor:
        if use_momentum:
            with torch.no_grad():
                return self.twin(*args, **kwargs)
        return self.online(*args, **kwargs)

    @torch.no_grad()
    def momentum_update(self) -> None:
        """theta' <- eta * theta' + (1 - eta) * theta, elementwise."""
        eta = self.momentum
        for p_twin, p_online in zip(self.twin.parameters(), self.online.parameters()):
            p_twin.mul_(eta).add_(p_online, alpha=1.0 - eta)


def momentum_update(pair: EncoderPair) -> None:
    pair.momentum_update()


# ---------------------------------------------------------------------------
# Social graph attention
# ---------------------------------------------------------------------------


class SocialBlock(nn.Module):
    """Stacked single-head graph attention over the user social graph.

    Every node attends over its neighborhood (self-loop included so isolated
    users keep their own embedding); attention logits come from a LeakyReLU
    of the concatenated endpoint embeddings, the layer update is a sigmoid
    of the attention-weighted linear map.
    """

    def __init__(self, num_users: int, graph: SocialGraph, user_vocab: Vocab, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.user_emb = nn.Embedding(num_users, cfg.emb_dim)
        self.w = nn.ModuleList(
            nn.Linear(cfg.emb_dim, cfg.emb_dim, bias=False) for _ in range(cfg.gat_layers)
        )
        self.attn = nn.ParameterList(
            nn.Parameter(torch.empty(2 * cfg.emb_dim)) for _ in range(cfg.gat_layers)
        )
        for a in self.attn:
            nn.init.normal_(a, std=1.0 / math.sqrt(2 * cfg.emb_dim))

        dst, src = [], []
        for i in range(num_users):
            uid = user_vocab.decode(i)
            neigh = [user_vocab.encode(v) for v in graph.neighbors(uid) if v in user_vocab]
            for j in sorted(set(neigh) | {i}):  # self-loop
                dst.append(i)
                src.append(j)
        self.register_buffer("edge_dst", torch.tensor(dst, dtype=torch.long), persistent=False)
        self.register_buffer("edge_src", torch.tensor(src, dtype=torch.long), persistent=False)
        self.num_users = num_users

    def attention_weights(self, layer: int, h: torch.Tensor) -> torch.Tensor:
        """Edge attention for one layer given current node states (aligned
        with edge_dst/edge_src); rows sum to 1 per destination node."""
        a = self.attn[layer].to(h.dtype)
        logits = F.leaky_relu(
            h[self.edge_dst] @ a[: h.shape[1]] + h[self.edge_src] @ a[h.shape[1] :],
            negative_slope=self.cfg.leaky_relu_slope,
        )
        # softmax per destination node, stabilized by the per-node max
        n = h.shape[0]
        max_per_dst = torch.full((n,), float("-inf"), dtype=h.dtype, device=h.device)
        max_per_dst = max_per_dst.scatter_reduce(
            0, self.edge_dst, logits.detach(), reduce="amax", include_self=True
        )
        ex = torch.exp(logits - max_per_dst[self.edge_dst])
        denom = torch.zeros(n, dtype=h.dtype, device=h.device).index_add(0, self.edge_dst, ex)
        return ex / denom[self.edge_dst]

    def node_states(self) -> torch.Tensor:
        """Refined embeddings for every user after all attention layers."""
        h = self.user_emb.weight
        for layer in range(self.cfg.gat_layers):
            alpha = self.attention_weights(layer, h)
            msg = self.w[layer](h)[self.edge_src] * alpha.unsqueeze(-1)
            agg = torch.zeros_like(h).index_add(0, self.edge_dst, msg)
            h = torch.sigmoid(agg)
        return h

    def forward(self, user_indices: torch.Tensor) -> torch.Tensor:
        return self.node_states()[user_indices]


# ---------------------------------------------------------------------------
# Projection heads
# ---------------------------------------------------------------------------


class ProjectionHead(nn.Module):
    """Two-layer map into the shared contrast space."""

    def __init__(self, rep_dim: int, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(rep_dim, rep_dim),
            nn.ReLU(),
            nn.Linear(rep_dim, proj_dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class CrossViewProjection(nn.Module):
    """Projection heads of both views plus the learnable temperature."""

    def __init__(self, rep_dim: int, proj_dim: int, tau_init: float):
        super().__init__()
        self.spatial_head = ProjectionHead(rep_dim, proj_dim)
        self.temporal_head = ProjectionHead(rep_dim, proj_dim)
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))

    def forward(self, z_s: torch.Tensor, z_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.spatial_head(z_s), self.temporal_head(z_t), self.tau
