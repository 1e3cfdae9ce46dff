"""Task heads and fine-tuning loops.

Three downstream tasks on top of the pre-trained combined representation:

* next-location prediction (LP): classify the final record's location from
  the preceding prefix;
* trajectory-user-link (TUL): classify which user produced a sequence, with
  the social block disabled so user identity cannot leak in;
* next-time prediction (TP): model the standardized log inter-event time
  with a log-normal mixture and predict its analytic mean.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ingest import CheckInSequence, DatasetBundle
from .metrics import RankedPrediction, acc_at_k, mrr, rank_from_scores, tp_metrics
from .pretrain import TrainState

logger = logging.getLogger(__name__)

TASKS = ("lp", "tul", "tp")

MIN_MIXTURE_STD = 1e-4


@dataclass
class FinetuneConfig:
    task: str
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 128
    freeze_encoder: bool = False
    k_mix: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.k_mix < 1:
            raise ValueError(f"k_mix must be >= 1, got {self.k_mix}")


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class ClassifierHead(nn.Module):
    """Linear softmax classifier over the combined representation."""

    def __init__(self, rep_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(rep_dim, num_classes)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return self.linear(g)


class MixtureHead(nn.Module):
    """Maps the representation to log-normal mixture parameters (w, mu, s).

    Output transforms keep the parameters valid for any input: softmax for
    the weights, softplus with a floor for the scales.
    """

    def __init__(self, rep_dim: int, k_mix: int):
        super().__init__()
        self.k_mix = k_mix
        self.linear = nn.Linear(rep_dim, 3 * k_mix)

    def forward(self, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        raw = self.linear(g)
        w_raw, mu, s_raw = raw.chunk(3, dim=-1)
        w = torch.softmax(w_raw, dim=-1)
        s = F.softplus(s_raw) + MIN_MIXTURE_STD
        return w, mu, s


# ---------------------------------------------------------------------------
# Log-normal mixture
# ---------------------------------------------------------------------------


def mixture_log_density(tau: torch.Tensor, w: torch.Tensor, mu: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """log p(tau) of the weighted log-normal mixture; tau must be positive.

    Shapes: tau (...,), parameters (..., K); broadcast along the batch.
    """
    if torch.any(tau <= 0):
        raise ValueError("mixture density is defined for positive times only")
    log_tau = torch.log(tau).unsqueeze(-1)
    comp = (
        -log_tau
        - torch.log(s)
        - 0.5 * math.log(2 * math.pi)
        - (log_tau - mu) ** 2 / (2 * s**2)
    )
    return torch.logsumexp(torch.log(w.clamp_min(1e-300)) + comp, dim=-1)


def mixture_density(tau: torch.Tensor, w: torch.Tensor, mu: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """p(tau) = sum_k w_k * lognormal(tau; mu_k, s_k)."""
    return torch.exp(mixture_log_density(tau, w, mu, s))


def mixture_nll(tau: torch.Tensor, w: torch.Tensor, mu: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return -mixture_log_density(tau, w, mu, s)


def mixture_mean(w: torch.Tensor, mu: torch.Tensor, s: torch.Tensor, a: float, b: float) -> torch.Tensor:
    """Expected de-standardized time sum_k w_k exp(a*mu_k + b + a^2 s_k^2 / 2).

    ``a`` multiplies the latent normal (the log-time std under the dataset's
    standardization) and ``b`` shifts it (the log-time mean); computed per
    component in log space to avoid overflow.
    """
    log_terms = torch.log(w.clamp_min(1e-300)) + a * mu + b + 0.5 * (a * s) ** 2
    return torch.exp(torch.logsumexp(log_terms, dim=-1))


# ---------------------------------------------------------------------------
# Task example construction
# ---------------------------------------------------------------------------


@dataclass
class TaskExamples:
    inputs: list[CheckInSequence]
    targets: list  # class indices (lp/tul) or seconds (tp)
    n_skipped: int = 0


def classify_examples(split: list[CheckInSequence], bundle: DatasetBundle, task: str) -> TaskExamples:
    inputs, targets, skipped = [], [], 0
    for seq in split:
        if task == "lp":
            if len(seq) < 3:  # prefix must still be a valid sequence
                skipped += 1
                continue
            inputs.append(CheckInSequence(user=seq.user, records=seq.records[:-1]))
            targets.append(bundle.loc_vocab.encode(seq.records[-1].lid))
        else:  # tul
            inputs.append(seq)
            targets.append(bundle.user_vocab.encode(seq.user))
    if skipped:
        logger.info("%s: skipped %d sequence(s) too short to form a prefix", task, skipped)
    return TaskExamples(inputs=inputs, targets=targets, n_skipped=skipped)


def tp_examples(split: list[CheckInSequence], bundle: DatasetBundle) -> TaskExamples:
    inputs, targets, dropped = [], [], 0
    for seq in split:
        if len(seq) < 3:
            dropped += 1
            continue
        dt = seq.records[-1].t - seq.records[-2].t
        if dt <= 0:
            dropped += 1
            continue
        inputs.append(CheckInSequence(user=seq.user, records=seq.records[:-1]))
        targets.append(float(dt))
    if dropped:
        logger.info("tp: dropped %d sequence(s) with non-positive or missing final gap", dropped)
    return TaskExamples(inputs=inputs, targets=targets, n_skipped=dropped)


# ---------------------------------------------------------------------------
# Fine-tuning loops
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    task: str
    metrics: dict[str, float]
    head: nn.Module
    counters: dict[str, int] = field(default_factory=dict)
    predictions: list = field(default_factory=list)


def _shuffled_batches(n: int, batch_size: int, gen: torch.Generator) -> list[list[int]]:
    order = torch.randperm(n, generator=gen).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _representation_fn(state: TrainState, cfg: FinetuneConfig, social_enabled: bool):
    """Returns (fn(inputs, indices) -> (B, 2h) tensor, trainable encoder params).

    Frozen mode precomputes every representation once with no gradient path.
    """
    model = state.model
    feat = state.featurizer

    if cfg.freeze_encoder:
        cache: dict[CheckInSequence, torch.Tensor] = {}

        def frozen(inputs: list[CheckInSequence], idx: list[int]) -> torch.Tensor:
            missing = [i for i in idx if inputs[i] not in cache]
            if missing:
                with torch.no_grad():
                    reps = model.representations(feat, [inputs[i] for i in missing], social_enabled)
                for j, i in enumerate(missing):
                    cache[inputs[i]] = reps[j]
            return torch.stack([cache[inputs[i]] for i in idx])

        return frozen, []

    def live(inputs: list[CheckInSequence], idx: list[int]) -> torch.Tensor:
        return model.representations(feat, [inputs[i] for i in idx], social_enabled)

    return live, [p for p in model.parameters() if p.requires_grad]


def finetune_classify(state: TrainState, bundle: DatasetBundle, cfg: FinetuneConfig) -> FinetuneResult:
    """Cross-entropy fine-tuning for LP or TUL with selection on validation loss."""
    if cfg.task not in ("lp", "tul"):
        raise ValueError(f"finetune_classify handles lp/tul, got {cfg.task!r}")
    social_enabled = cfg.task != "tul"  # user identity is the TUL label
    n_classes = bundle.num_locations if cfg.task == "lp" else bundle.num_users

    train = classify_examples(bundle.train, bundle, cfg.task)
    val = classify_examples(bundle.val, bundle, cfg.task)
    test = classify_examples(bundle.test, bundle, cfg.task)
    if not train.inputs or not test.inputs:
        raise ValueError(f"no usable {cfg.task} examples after preprocessing")

    torch.manual_seed(cfg.seed)
    head = ClassifierHead(2 * state.config.model.rep_dim, n_classes)
    rep_fn, enc_params = _representation_fn(state, cfg, social_enabled)
    optimizer = torch.optim.Adam(list(head.parameters()) + enc_params, lr=cfg.learning_rate)

    def eval_loss(examples: TaskExamples) -> float:
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(examples.inputs), cfg.batch_size):
                idx = list(range(i, min(i + cfg.batch_size, len(examples.inputs))))
                logits = head(rep_fn(examples.inputs, idx))
                y = torch.tensor([examples.targets[j] for j in idx])
                total += float(F.cross_entropy(logits, y)) * len(idx)
                count += len(idx)
        return total / max(count, 1)

    gen = torch.Generator().manual_seed(cfg.seed)
    best_val, best_state = math.inf, None
    for _ in range(cfg.epochs):
        for idx in _shuffled_batches(len(train.inputs), cfg.batch_size, gen):
            logits = head(rep_fn(train.inputs, idx))
            y = torch.tensor([train.targets[j] for j in idx])
            loss = F.cross_entropy(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        val_loss = eval_loss(val) if val.inputs else eval_loss(train)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy((head.state_dict(), state.model.state_dict()))
    if best_state is not None:
        head.load_state_dict(best_state[0])
        state.model.load_state_dict(best_state[1])

    preds: list[RankedPrediction] = []
    with torch.no_grad():
        for i in range(0, len(test.inputs), cfg.batch_size):
            idx = list(range(i, min(i + cfg.batch_size, len(test.inputs))))
            logits = head(rep_fn(test.inputs, idx))
            for row, j in zip(logits, idx):
                preds.append(rank_from_scores(row.numpy(), test.targets[j]))

    metrics = {
        "acc@1": acc_at_k(preds, 1),
        "acc@5": acc_at_k(preds, 5),
        "acc@20": acc_at_k(preds, 20),
        "mrr": mrr(preds),
    }
    return FinetuneResult(
        task=cfg.task,
        metrics=metrics,
        head=head,
        counters={"skipped_train": train.n_skipped, "skipped_val": val.n_skipped, "skipped_test": test.n_skipped},
        predictions=preds,
    )


def finetune_tp(state: TrainState, bundle: DatasetBundle, cfg: FinetuneConfig) -> FinetuneResult:
    """Negative log-likelihood fine-tuning of the log-normal mixture head.

    Targets are standardized as x = (log dt - mean) / std and modeled through
    tau = exp(x); point predictions de-standardize with the analytic mean and
    MAE/RMSE are reported on real seconds.
    """
    if cfg.task != "tp":
        raise ValueError(f"finetune_tp handles tp, got {cfg.task!r}")
    a_mean, b_std = bundle.log_dt_mean, bundle.log_dt_std

    train = tp_examples(bundle.train, bundle)
    val = tp_examples(bundle.val, bundle)
    test = tp_examples(bundle.test, bundle)
    if not train.inputs or not test.inputs:
        raise ValueError("no usable tp examples after preprocessing")

    def norm_tau(seconds: list[float], idx: list[int]) -> torch.Tensor:
        x = torch.tensor([(math.log(seconds[j]) - a_mean) / b_std for j in idx])
        return torch.exp(x)

    torch.manual_seed(cfg.seed)
    head = MixtureHead(2 * state.config.model.rep_dim, cfg.k_mix)
    rep_fn, enc_params = _representation_fn(state, cfg, social_enabled=True)
    optimizer = torch.optim.Adam(list(head.parameters()) + enc_params, lr=cfg.learning_rate)

    def eval_mae(examples: TaskExamples) -> float:
        """Validation selection metric: de-normalized absolute error."""
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(examples.inputs), cfg.batch_size):
                idx = list(range(i, min(i + cfg.batch_size, len(examples.inputs))))
                w, mu, s = head(rep_fn(examples.inputs, idx))
                pred = mixture_mean(w, mu, s, a=b_std, b=a_mean)
                true = torch.tensor([examples.targets[j] for j in idx])
                total += float((pred - true).abs().sum())
                count += len(idx)
        return total / max(count, 1)

    gen = torch.Generator().manual_seed(cfg.seed)
    best_val, best_state = math.inf, None
    for _ in range(cfg.epochs):
        for idx in _shuffled_batches(len(train.inputs), cfg.batch_size, gen):
            w, mu, s = head(rep_fn(train.inputs, idx))
            loss = mixture_nll(norm_tau(train.targets, idx), w, mu, s).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        val_mae = eval_mae(val) if val.inputs else eval_mae(train)
        if val_mae < best_val:
            best_val = val_mae
            best_state = copy.deepcopy((head.state_dict(), state.model.state_dict()))
    if best_state is not None:
        head.load_state_dict(best_state[0])
        state.model.load_state_dict(best_state[1])

    pred_seconds, true_seconds, nlls = [], [], []
    with torch.no_grad():
        for i in range(0, len(test.inputs), cfg.batch_size):
            idx = list(range(i, min(i + cfg.batch_size, len(test.inputs))))
            w, mu, s = head(rep_fn(test.inputs, idx))
            nlls.extend(mixture_nll(norm_tau(test.targets, idx), w, mu, s).tolist())
            # de-standardize: log dt = mean + std * x, so the std scales mu
            pred_seconds.extend(mixture_mean(w, mu, s, a=b_std, b=a_mean).tolist())
            true_seconds.extend(test.targets[j] for j in idx)

    metrics = tp_metrics(pred_seconds, true_seconds, nlls)
    return FinetuneResult(
        task="tp",
        metrics=metrics,
        head=head,
        counters={"dropped_train": train.n_skipped, "dropped_val": val.n_skipped, "dropped_test": test.n_skipped},
        predictions=list(zip(pred_seconds, true_seconds)),
    )


def finetune(state: TrainState, bundle: DatasetBundle, cfg: FinetuneConfig) -> FinetuneResult:
    if cfg.task == "tp":
        return finetune_tp(state, bundle, cfg)
    return finetune_classify(state, bundle, cfg)


def run_repeats(
    state: TrainState,
    bundle: DatasetBundle,
    cfg: FinetuneConfig,
    repeats: int,
) -> tuple[list[dict[str, float]], dict[str, tuple[float, float]]]:
    """Repeat fine-tuning from the same pre-trained weights under shifted
    seeds; returns per-run metrics and (mean, std) aggregates."""
    base_model = copy.deepcopy(state.model.state_dict())
    runs = []
    for r in range(repeats):
        state.model.load_state_dict(copy.deepcopy(base_model))
        run_cfg = copy.deepcopy(cfg)
        run_cfg.seed = cfg.seed + r
        runs.append(finetune(state, bundle, run_cfg).metrics)
    state.model.load_state_dict(base_model)
    agg = {}
    for key in runs[0]:
        vals = np.array([run[key] for run in runs], dtype=np.float64)
        agg[key] = (float(vals.mean()), float(vals.std()))
    return runs, agg
