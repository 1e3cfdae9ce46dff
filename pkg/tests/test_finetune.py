"""Task heads: mixture distribution correctness and fine-tuning behavior."""

import copy
import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad

from checkinrep.finetune import (
    FinetuneConfig,
    MixtureHead,
    classify_examples,
    finetune_classify,
    finetune_tp,
    mixture_density,
    mixture_mean,
    mixture_nll,
    tp_examples,
)
from checkinrep.ingest import CheckInRecord, CheckInSequence
from checkinrep.pretrain import pretrain

from conftest import tiny_pretrain_config
from oracles import oracle_mixture_density, oracle_mixture_mean


def params(w, mu, s):
    return (
        torch.tensor(w, dtype=torch.float64),
        torch.tensor(mu, dtype=torch.float64),
        torch.tensor(s, dtype=torch.float64),
    )


class TestMixtureDensity:
    def test_standard_lognormal_at_median(self):
        w, mu, s = params([1.0], [0.0], [1.0])
        val = mixture_density(torch.tensor(1.0, dtype=torch.float64), w, mu, s)
        assert val.item() == pytest.approx(1.0 / math.sqrt(2 * math.pi), rel=1e-10)  # 0.39894

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            k = int(rng.integers(1, 5))
            w = rng.dirichlet(np.ones(k))
            mu = rng.normal(size=k)
            s = 0.2 + rng.random(k)
            tau = float(0.1 + 3 * rng.random())
            got = mixture_density(torch.tensor(tau, dtype=torch.float64), *params(w, mu, s)).item()
            assert got == pytest.approx(oracle_mixture_density(tau, w, mu, s), rel=1e-10)

    def test_integrates_to_one_by_quadrature(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            k = int(rng.integers(1, 4))
            w = rng.dirichlet(np.ones(k))
            mu = rng.normal(scale=0.5, size=k)
            s = 0.2 + rng.random(k)
            total, _ = quad(
                lambda t: oracle_mixture_density(t, w, mu, s), 0, np.inf, limit=200
            )
            assert total == pytest.approx(1.0, abs=1e-3)

    def test_two_identical_components_equal_single(self):
        single = mixture_density(torch.tensor(2.5, dtype=torch.float64), *params([1.0], [0.3], [0.7]))
        double = mixture_density(
            torch.tensor(2.5, dtype=torch.float64), *params([0.5, 0.5], [0.3, 0.3], [0.7, 0.7])
        )
        assert single.item() == pytest.approx(double.item(), rel=1e-12)

    def test_non_positive_time_rejected(self):
        w, mu, s = params([1.0], [0.0], [1.0])
        with pytest.raises(ValueError):
            mixture_density(torch.tensor(0.0, dtype=torch.float64), w, mu, s)
        with pytest.raises(ValueError):
            mixture_nll(torch.tensor(-1.0, dtype=torch.float64), w, mu, s)


class TestMixtureMean:
    def test_degenerate_spread_recovers_point(self):
        w, mu, s = params([1.0], [0.0], [1e-9])
        assert mixture_mean(w, mu, s, a=1.0, b=0.0).item() == pytest.approx(1.0, rel=1e-9)

    def test_unit_lognormal_mean(self):
        w, mu, s = params([1.0], [0.0], [1.0])
        assert mixture_mean(w, mu, s, a=1.0, b=0.0).item() == pytest.approx(math.exp(0.5), rel=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            k = int(rng.integers(1, 5))
            w = rng.dirichlet(np.ones(k))
            mu = rng.normal(size=k)
            s = 0.2 + rng.random(k)
            a, b = float(rng.normal()), float(rng.normal())
            got = mixture_mean(*params(w, mu, s), a=a, b=b).item()
            assert got == pytest.approx(oracle_mixture_mean(w, mu, s, a, b), rel=1e-10)

    def test_monte_carlo_sampling_oracle(self):
        # draw component ~ w, x ~ N(mu_k, s_k^2), time = exp(a*x + b)
        rng = np.random.default_rng(3)
        w = np.array([0.3, 0.5, 0.2])
        mu = np.array([-0.4, 0.2, 0.8])
        s = np.array([0.5, 0.3, 0.4])
        a, b = 0.7, 0.1
        n = 1_000_000
        comps = rng.choice(3, size=n, p=w)
        x = rng.normal(mu[comps], s[comps])
        samples = np.exp(a * x + b)
        analytic = mixture_mean(*params(w, mu, s), a=a, b=b).item()
        se = samples.std() / math.sqrt(n)
        assert abs(samples.mean() - analytic) < 3 * se

    def test_overflow_guarded_by_log_space(self):
        w, mu, s = params([1.0], [500.0], [10.0])
        val = mixture_mean(w, mu, s, a=2.0, b=0.0)
        assert math.isinf(val.item()) or val.item() > 1e300  # no NaN


class TestLikelihoodPrinciple:
    def test_true_mixture_beats_perturbed_on_large_samples(self):
        rng = np.random.default_rng(5)
        w = np.array([0.4, 0.6])
        mu = np.array([-0.3, 0.5])
        s = np.array([0.4, 0.3])
        comps = rng.choice(2, size=50_000, p=w)
        taus = torch.tensor(np.exp(rng.normal(mu[comps], s[comps])))
        true_nll = mixture_nll(taus, *params(w, mu, s)).mean().item()
        for _ in range(10):
            pw = rng.dirichlet(np.ones(2))
            pmu = mu + rng.normal(scale=0.3, size=2)
            ps = np.abs(s + rng.normal(scale=0.2, size=2)) + 0.05
            perturbed_nll = mixture_nll(taus, *params(pw, pmu, ps)).mean().item()
            assert true_nll <= perturbed_nll + 1e-6


class TestMixtureHead:
    def test_parameters_valid_for_extreme_inputs(self):
        torch.manual_seed(0)
        head = MixtureHead(8, k_mix=4)
        for x in (torch.zeros(2, 8), 1e4 * torch.ones(2, 8), -1e4 * torch.ones(2, 8)):
            w, mu, s = head(x)
            assert torch.allclose(w.sum(dim=-1), torch.ones(2), atol=1e-6)
            assert torch.all(w >= 0)
            assert torch.all(s >= 1e-4)
            assert torch.all(torch.isfinite(mu))


def seq_of(user, times, lids=None):
    lids = lids or [1] * len(times)
    records = tuple(
        CheckInRecord(user=user, lid=lid, lon=-70.0, lat=40.0, t=t, cat="x")
        for t, lid in zip(times, lids)
    )
    return CheckInSequence(user=user, records=records)


class TestExampleConstruction:
    def test_lp_skips_length_two(self, small_bundle):
        short = seq_of(small_bundle.train[0].user, [0, 3600])
        examples = classify_examples([short] + list(small_bundle.train), small_bundle, "lp")
        assert examples.n_skipped == 1
        assert len(examples.inputs) == len(small_bundle.train)

    def test_lp_prefix_excludes_target(self, small_bundle):
        seq = next(s for s in small_bundle.train if len(s) >= 3)
        examples = classify_examples([seq], small_bundle, "lp")
        assert len(examples.inputs[0]) == len(seq) - 1
        assert examples.targets[0] == small_bundle.loc_vocab.encode(seq.records[-1].lid)

    def test_tul_uses_full_sequence_and_user_label_space(self, small_bundle):
        examples = classify_examples(small_bundle.train, small_bundle, "tul")
        assert len(examples.inputs[0]) == len(small_bundle.train[0])
        assert all(0 <= t < small_bundle.num_users for t in examples.targets)

    def test_tp_drops_non_positive_gaps(self, small_bundle):
        user = small_bundle.train[0].user
        flat = seq_of(user, [100, 200, 200])
        examples = tp_examples([flat], small_bundle)
        assert examples.n_skipped == 1 and not examples.inputs


@pytest.fixture(scope="module")
def trained_state(small_bundle):
    cfg = tiny_pretrain_config(epochs=2, patience=2, seed=21)
    return pretrain(small_bundle, cfg)


class TestFinetuneLoops:
    def test_classify_reports_all_metrics(self, trained_state, small_bundle):
        cfg = FinetuneConfig(task="lp", epochs=2, seed=0, batch_size=32)
        result = finetune_classify(trained_state, small_bundle, cfg)
        assert set(result.metrics) == {"acc@1", "acc@5", "acc@20", "mrr"}
        assert result.metrics["acc@1"] <= result.metrics["acc@5"] <= result.metrics["acc@20"]
        assert 0.0 < result.metrics["mrr"] <= 1.0

    def test_tul_label_space_is_user_vocab(self, trained_state, small_bundle):
        cfg = FinetuneConfig(task="tul", epochs=1, seed=0, batch_size=32)
        result = finetune_classify(trained_state, small_bundle, cfg)
        assert result.head.linear.out_features == small_bundle.num_users

    def test_frozen_encoder_leaves_weights_bit_identical(self, trained_state, small_bundle):
        before = copy.deepcopy(trained_state.model.state_dict())
        cfg = FinetuneConfig(task="lp", epochs=2, seed=1, freeze_encoder=True, batch_size=32)
        finetune_classify(trained_state, small_bundle, cfg)
        after = trained_state.model.state_dict()
        for key in before:
            assert before[key].numpy().tobytes() == after[key].numpy().tobytes()

    def test_tp_reports_real_second_metrics(self, trained_state, small_bundle):
        cfg = FinetuneConfig(task="tp", epochs=2, seed=0, batch_size=32, k_mix=4)
        result = finetune_tp(trained_state, small_bundle, cfg)
        assert set(result.metrics) == {"mae", "rmse", "nll"}
        assert result.metrics["rmse"] >= result.metrics["mae"]
        # predictions live on the raw-second scale of the targets
        preds = [p for p, _ in result.predictions]
        trues = [t for _, t in result.predictions]
        assert min(trues) > 60.0  # gaps are hours, not normalized values
        assert np.median(preds) > 60.0

    def test_wrong_task_routed(self, trained_state, small_bundle):
        with pytest.raises(ValueError):
            finetune_tp(trained_state, small_bundle, FinetuneConfig(task="lp"))
        with pytest.raises(ValueError):
            finetune_classify(trained_state, small_bundle, FinetuneConfig(task="tp"))

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            FinetuneConfig(task="xyz")


class TestDegenerateClassification:
    def test_single_class_task_reaches_perfect_accuracy(self, trained_state, small_bundle):
        # every sequence ends at the same location -> CE -> 0, Acc@1 -> 1
        target_lid = small_bundle.train[0].records[-1].lid
        user = small_bundle.train[0].user
        lids = [small_bundle.train[0].records[0].lid, small_bundle.train[0].records[1].lid, target_lid]
        seqs = [
            seq_of(user, [d * 86400, d * 86400 + 3600, d * 86400 + 7200], lids=lids)
            for d in range(12)
        ]
        bundle = copy.deepcopy(small_bundle)
        bundle.train = seqs[:8]
        bundle.val = seqs[8:10]
        bundle.test = seqs[10:]
        cfg = FinetuneConfig(task="lp", epochs=40, seed=0, batch_size=8, freeze_encoder=True)
        result = finetune_classify(trained_state, bundle, cfg)
        assert result.metrics["acc@1"] == 1.0


class TestDegenerateRegression:
    def test_constant_targets_drive_train_mae_to_zero(self, trained_state, small_bundle):
        # all gaps equal -> the mixture should concentrate and MAE collapse
        user = small_bundle.train[0].user
        gap = 7200
        seqs = [
            seq_of(user, [d * 86400, d * 86400 + gap, d * 86400 + 2 * gap]) for d in range(12)
        ]
        bundle = copy.deepcopy(small_bundle)
        bundle.train = seqs[:8]
        bundle.val = seqs[8:10]
        bundle.test = seqs[10:]
        cfg = FinetuneConfig(
            task="tp", epochs=400, learning_rate=5e-3, seed=0, batch_size=8, k_mix=2, freeze_encoder=True
        )
        result = finetune_tp(trained_state, bundle, cfg)
        assert result.metrics["mae"] <= 0.05 * gap
