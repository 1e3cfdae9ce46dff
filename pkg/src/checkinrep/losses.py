"""Contrastive pre-training objectives.

Three families of objectives over sequence representations:

* spatial cluster contrast: soft prototype assignments, a swapped
  consistency term, and a Gaussian-reweighted InfoNCE term whose
  negatives are restricted to samples assigned to other prototypes;
* temporal angular-margin contrast: NT-Xent with an additive angle
  margin on the positive pair;
* cross-view alignment: bidirectional softmax contrast between the
  projected spatial and temporal views of the same batch.

All functions are dtype-agnostic tensor ops so 64-bit gradient checks can
exercise the exact training code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_EPS = 1e-12
COS_EPS = 1e-7


@dataclass
class LossWeights:
    """Scalar knobs of the combined pre-training objective."""

    eta_c: float = 1.0  # consistency weight inside the spatial term
    sigma_margin: float = 0.09  # additive angle margin (radians)
    tau_s: float = 0.1  # spatial temperature
    tau_t: float = 0.1  # temporal temperature
    tau_x_init: float = 0.07  # initial learnable cross-view temperature
    lambda_spatial: float = 1.0
    lambda_temporal: float = 1.0
    lambda_cross: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.sigma_margin < math.pi):
            raise ValueError(f"sigma_margin must lie in [0, pi), got {self.sigma_margin}")
        for name in ("tau_s", "tau_t", "tau_x_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def l2_normalize(x: torch.Tensor, eps: float = LOG_EPS) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def _as_2d(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


class PrototypeBank(nn.Module):
    """K learnable unit-norm cluster centers with their softmax temperature."""

    def __init__(self, num_prototypes: int, rep_dim: int, tau: float = 0.1):
        super().__init__()
        if num_prototypes < 2:
            raise ValueError(f"need at least 2 prototypes, got {num_prototypes}")
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.tau = tau
        init = torch.randn(num_prototypes, rep_dim)
        self.prototypes = nn.Parameter(init / init.norm(dim=1, keepdim=True))

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @torch.no_grad()
    def renormalize(self) -> None:
        """Project centers back to the unit sphere (call after optimizer steps)."""
        self.prototypes.div_(self.prototypes.norm(dim=1, keepdim=True).clamp_min(LOG_EPS))

    def assign(self, z: torch.Tensor) -> torch.Tensor:
        return assign(z, self.prototypes, self.tau)


class RepresentationQueue:
    """Fixed-capacity FIFO of past representations used as extra negatives.

    Entries are detached on enqueue -- no gradient ever flows into queue
    contents. Optionally stores each entry's assignment distribution and
    most-probable prototype (the spatial queue does, the temporal one not).
    """

    def __init__(self, capacity: int, rep_dim: int, num_prototypes: int = 0, dtype: torch.dtype = torch.float32):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.z = torch.zeros((capacity, rep_dim), dtype=dtype)
        self.q = torch.zeros((capacity, num_prototypes), dtype=dtype) if num_prototypes else None
        self.proto = torch.zeros(capacity, dtype=torch.long) if num_prototypes else None
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def enqueue(self, z: torch.Tensor, q: torch.Tensor | None = None) -> None:
        if self.capacity == 0:
            return
        z = z.detach().to(self.z.dtype)
        if z.shape[0] > self.capacity:  # only the newest entries can survive
            z = z[-self.capacity :]
            q = q[-self.capacity :] if q is not None else None
        n = z.shape[0]
        idx = (self.cursor + torch.arange(n)) % self.capacity
        self.z[idx] = z
        if self.q is not None:
            if q is None:
                raise ValueError("this queue stores assignments; enqueue requires q")
            q = q.detach().to(self.q.dtype)
            self.q[idx] = q
            self.proto[idx] = q.argmax(dim=-1)
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def contents(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        """(representations, assignments or None) of the currently held entries."""
        if self.size == 0:
            return self.z[:0], self.q[:0] if self.q is not None else None
        z = self.z[: self.size]
        q = self.q[: self.size] if self.q is not None else None
        return z, q

    def state_dict(self) -> dict:
        return {
            "z": self.z,
            "q": self.q,
            "proto": self.proto,
            "size": self.size,
            "cursor": self.cursor,
            "capacity": self.capacity,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity:
            raise ValueError(f"queue capacity mismatch: {state['capacity']} vs {self.capacity}")
        self.z = state["z"]
        self.q = state["q"]
        self.proto = state["proto"]
        self.size = state["size"]
        self.cursor = state["cursor"]


# ---------------------------------------------------------------------------
# Spatial cluster contrast
# ---------------------------------------------------------------------------


def assign(z: torch.Tensor, prototypes: torch.Tensor, tau: float) -> torch.Tensor:
    """Soft prototype assignment: softmax over all prototypes of the scaled
    cosine score between the representation and each (unit-normalized) center.

    Accepts (h,) or (B, h); returns (K,) or (B, K) accordingly.
    """
    single = z.dim() == 1
    zn = l2_normalize(_as_2d(z))
    cn = l2_normalize(prototypes)
    q = torch.softmax(zn @ cn.t() / tau, dim=-1)
    return q.squeeze(0) if single else q


def _cross_entropy(target_q: torch.Tensor, pred_q: torch.Tensor) -> torch.Tensor:
    return -(target_q * torch.log(pred_q.clamp_min(LOG_EPS))).sum(dim=-1)


def consistency_loss(
    z_n: torch.Tensor,
    z_m: torch.Tensor,
    prototypes: torch.Tensor,
    tau: float,
    targets: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Swapped assignment consistency between an anchor and its augmentation.

    Each side's assignment serves as a fixed cross-entropy target for the
    other side's predicted assignment; targets are detached (or supplied
    explicitly, e.g. by finite-difference oracles that must hold them fixed).
    Returns a scalar for vector inputs and a (B,) tensor for batches.
    """
    single = z_n.dim() == 1
    q_n = assign(_as_2d(z_n), prototypes, tau)
    q_m = assign(_as_2d(z_m), prototypes, tau)
    if targets is None:
        t_n, t_m = q_n.detach(), q_m.detach()
    else:
        t_n, t_m = _as_2d(targets[0]), _as_2d(targets[1])
    loss = _cross_entropy(t_n, q_m) + _cross_entropy(t_m, q_n)
    return loss.squeeze(0) if single else loss


def _assignment_cosine_distance(q_a: torch.Tensor, q_b: torch.Tensor) -> torch.Tensor:
    return 1.0 - l2_normalize(q_a) @ l2_normalize(q_b).t()


def _reweighted_core(
    z_n: torch.Tensor,
    z_m: torch.Tensor,
    neg_z: torch.Tensor,
    neg_q: torch.Tensor,
    valid: torch.Tensor,
    q_n: torch.Tensor,
    tau: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gaussian-reweighted contrast for a batch of anchors.

    ``valid`` masks which of the J candidate negatives may be used per anchor
    (e.g. excluding an anchor's own row when negatives come from the batch).
    Returns (per-anchor loss, per-anchor skipped flag); anchors whose
    different-prototype set S is empty contribute zero loss.
    """
    zn = l2_normalize(z_n)
    zm = l2_normalize(z_m)
    pos_sim = (zn * zm).sum(dim=-1)  # (B,)

    if neg_z.shape[0] == 0:
        skipped = torch.ones_like(pos_sim, dtype=torch.bool)
        return torch.zeros_like(pos_sim), skipped

    nz = l2_normalize(neg_z)
    neg_sim = zn @ nz.t()  # (B, J)

    c_anchor = q_n.argmax(dim=-1)  # (B,)
    c_neg = neg_q.argmax(dim=-1)  # (J,)
    in_s = valid & (c_neg.unsqueeze(0) != c_anchor.unsqueeze(1))  # (B, J)
    beta = in_s.sum(dim=1)  # (B,)
    skipped = beta == 0

    dist = _assignment_cosine_distance(q_n, neg_q)  # (B, J)
    s_count = beta.clamp_min(1).to(dist.dtype)
    masked = torch.where(in_s, dist, torch.zeros_like(dist))
    mu = masked.sum(dim=1) / s_count
    var = torch.where(in_s, (dist - mu.unsqueeze(1)) ** 2, torch.zeros_like(dist)).sum(dim=1) / s_count

    # Degenerate spread (including |S| = 1) means every candidate is equally
    # informative: fall back to uniform weights. The safe variance keeps the
    # unselected exp branch finite so no NaN leaks through where()'s backward.
    spread_ok = var > 0
    var_safe = torch.where(spread_ok, var, torch.ones_like(var))
    gauss = torch.exp(-((dist - mu.unsqueeze(1)) ** 2) / (2 * var_safe.unsqueeze(1)))
    w = torch.where(spread_ok.unsqueeze(1), gauss, torch.ones_like(gauss))
    w = torch.where(in_s, w, torch.zeros_like(w))

    w_sum = w.sum(dim=1)
    m_norm = 2.0 * beta.to(w.dtype) / w_sum.clamp_min(LOG_EPS)

    phi_pos = torch.exp(pos_sim / tau)
    phi_neg = torch.exp(neg_sim / tau)
    weighted = (w * phi_neg).sum(dim=1)
    loss = -torch.log(phi_pos / (phi_pos + m_norm * weighted))
    return torch.where(skipped, torch.zeros_like(loss), loss), skipped


def reweighted_contrast(
    z_n: torch.Tensor,
    z_m: torch.Tensor,
    negatives: torch.Tensor,
    prototypes: torch.Tensor,
    tau: float,
    neg_assignments: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-anchor reweighted contrastive term against explicit negatives.

    Negatives' assignments are computed from the prototype bank unless given
    (queue entries carry their stored assignments).
    """
    q_n = assign(_as_2d(z_n), prototypes, tau)
    if neg_assignments is None:
        neg_q = assign(negatives, prototypes, tau)
    else:
        neg_q = neg_assignments
    valid = torch.ones((1, negatives.shape[0]), dtype=torch.bool, device=negatives.device)
    loss, _ = _reweighted_core(_as_2d(z_n), _as_2d(z_m), negatives, neg_q, valid, q_n, tau)
    return loss.squeeze(0)


@dataclass
class SpatialLossResult:
    total: torch.Tensor  # eta_c * consistency + reweighted, batch mean
    consistency: torch.Tensor
    reweighted: torch.Tensor
    n_skipped: int  # anchors with an empty different-prototype set


def spatial_loss(
    z_n: torch.Tensor,
    z_m: torch.Tensor,
    prototypes: torch.Tensor,
    tau: float,
    eta_c: float,
    queue_z: torch.Tensor | None = None,
    queue_q: torch.Tensor | None = None,
) -> SpatialLossResult:
    """Batched spatial objective: swapped consistency plus reweighted contrast.

    Negatives for anchor i are the other samples' augmentations in the batch
    plus any queued historical representations (with their stored assignments).
    """
    z_n = _as_2d(z_n)
    z_m = _as_2d(z_m)
    batch = z_n.shape[0]

    q_n = assign(z_n, prototypes, tau)
    q_m = assign(z_m, prototypes, tau)
    l_c = _cross_entropy(q_n.detach(), q_m) + _cross_entropy(q_m.detach(), q_n)

    neg_parts_z = [z_m]
    neg_parts_q = [q_m]
    valid = ~torch.eye(batch, dtype=torch.bool, device=z_n.device)
    if queue_z is not None and queue_z.shape[0] > 0:
        neg_parts_z.append(queue_z.to(z_n.dtype))
        neg_parts_q.append(queue_q.to(q_n.dtype))
        valid = torch.cat(
            [valid, torch.ones((batch, queue_z.shape[0]), dtype=torch.bool, device=z_n.device)], dim=1
        )
    neg_z = torch.cat(neg_parts_z, dim=0)
    neg_q = torch.cat(neg_parts_q, dim=0)

    l_r, skipped = _reweighted_core(z_n, z_m, neg_z, neg_q, valid, q_n, tau)
    total = (eta_c * l_c + l_r).mean()
    return SpatialLossResult(
        total=total,
        consistency=l_c.mean(),
        reweighted=l_r.mean(),
        n_skipped=int(skipped.sum().item()),
    )


# ---------------------------------------------------------------------------
# Temporal contrast (NT-Xent and angular margin)
# ---------------------------------------------------------------------------


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (l2_normalize(a) * l2_normalize(b)).sum(dim=-1)


def _margined_positive(cos_pos: torch.Tensor, sigma: float) -> torch.Tensor:
    """cos(theta + sigma) via the angle-addition identity.

    The sine factor uses a clamped cosine so the gradient stays finite at
    |cos| -> 1; the angle is capped at pi (cos floor of -1) so the margin
    never leaves the principal branch. At sigma = 0 this returns the raw
    cosine bit-for-bit.
    """
    cos_c = cos_pos.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS)
    sin_pos = torch.sqrt(1.0 - cos_c * cos_c)
    shifted = cos_pos * math.cos(sigma) - sin_pos * math.sin(sigma)
    # theta + sigma > pi  <=>  cos(theta) < -cos(sigma)
    return torch.where(cos_pos >= -math.cos(sigma), shifted, torch.full_like(cos_pos, -1.0))


def nt_xent(z_n: torch.Tensor, z_m: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy for one anchor.

    The positive pair's similarity competes against the anchor's similarity
    to each negative; all similarities are cosines.
    """
    return tam_loss(z_n, z_m, negatives, sigma=0.0, tau=tau)


def tam_loss(
    z_n: torch.Tensor,
    z_m: torch.Tensor,
    negatives: torch.Tensor,
    sigma: float,
    tau: float,
) -> torch.Tensor:
    """Angular-margin contrast for one anchor: the positive pair's angle is
    widened by ``sigma`` before the softmax, negatives keep their raw cosine."""
    cos_pos = _cosine(z_n, z_m)
    pos_logit = _margined_positive(cos_pos, sigma) / tau
    if negatives.shape[0] > 0:
        neg_logits = (l2_normalize(negatives) @ l2_normalize(z_n)) / tau
        logits = torch.cat([pos_logit.view(1), neg_logits])
    else:
        logits = pos_logit.view(1)
    return torch.logsumexp(logits, dim=0) - pos_logit


def contrast_batch(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    queue_z: torch.Tensor | None,
    sigma: float,
    tau: float,
) -> torch.Tensor:
    """Batched angular-margin contrast (sigma = 0 gives plain NT-Xent).

    Negatives for anchor i are the other samples' positives plus the queue.
    Returns per-anchor losses (B,).
    """
    anchors = _as_2d(anchors)
    positives = _as_2d(positives)
    batch = anchors.shape[0]
    a = l2_normalize(anchors)
    p = l2_normalize(positives)

    sim = a @ p.t()  # (B, B); diagonal holds the positives
    pos_logit = _margined_positive(sim.diagonal(), sigma) / tau

    neg_logits = sim / tau
    eye = torch.eye(batch, dtype=torch.bool, device=anchors.device)
    neg_logits = neg_logits.masked_fill(eye, float("-inf"))
    parts = [pos_logit.unsqueeze(1), neg_logits]
    if queue_z is not None and queue_z.shape[0] > 0:
        parts.append(a @ l2_normalize(queue_z.to(anchors.dtype)).t() / tau)
    logits = torch.cat(parts, dim=1)
    return torch.logsumexp(logits, dim=1) - pos_logit


# ---------------------------------------------------------------------------
# Cross-view alignment
# ---------------------------------------------------------------------------

TAU_X_MIN, TAU_X_MAX = 1e-3, 1.0


def cross_view_loss(z_s: torch.Tensor, z_t: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """Bidirectional softmax alignment of paired projected views.

    Row i of each view is the positive of row i of the other; both
    spatial-to-temporal and temporal-to-spatial directions contribute a
    cross entropy against the diagonal, averaged and halved.
    """
    if z_s.shape[0] != z_t.shape[0]:
        raise ValueError(f"paired views need equal batch sizes, got {z_s.shape[0]} vs {z_t.shape[0]}")
    if z_s.shape[0] < 2:
        raise ValueError("cross-view contrast needs a batch of at least 2 (no negatives otherwise)")
    if isinstance(tau, torch.Tensor):
        tau = tau.clamp(TAU_X_MIN, TAU_X_MAX)
    else:
        tau = min(max(tau, TAU_X_MIN), TAU_X_MAX)
    zs = l2_normalize(z_s)
    zt = l2_normalize(z_t)
    logits = zs @ zt.t() / tau
    labels = torch.arange(z_s.shape[0], device=z_s.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def combine_terms(
    spatial: torch.Tensor,
    temporal: torch.Tensor,
    cross: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the three pre-training terms plus a logging breakdown.

    The logged total is recomposed from the logged terms in float64 so the
    breakdown always sums exactly, whatever the training dtype.
    """
    total = (
        weights.lambda_spatial * spatial
        + weights.lambda_temporal * temporal
        + weights.lambda_cross * cross
    )
    breakdown = {
        "spatial": float(spatial.detach()),
        "temporal": float(temporal.detach()),
        "cross_view": float(cross.detach()),
    }
    breakdown["total"] = (
        weights.lambda_spatial * breakdown["spatial"]
        + weights.lambda_temporal * breakdown["temporal"]
        + weights.lambda_cross * breakdown["cross_view"]
    )
    return total, breakdown
