"""Analytic gradients vs. central finite differences at 64-bit precision.

Losses whose targets are stop-gradiented (the swapped consistency term) are
differenced with the targets frozen at the base point, which is exactly the
function backpropagation differentiates.
"""

import numpy as np
import pytest
import torch

from checkinrep.encoders import SequenceFeaturizer
from checkinrep.finetune import mixture_nll
from checkinrep.losses import (
    assign,
    consistency_loss,
    cross_view_loss,
    spatial_loss,
    tam_loss,
)
from checkinrep.pretrain import RepresentationModel

from conftest import central_diff_grad, max_rel_error, tiny_pretrain_config

GRAD_TOL = 1e-4


@pytest.fixture(autouse=True, scope="module")
def _double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def check(loss_fn, params, fd_fn=None, eps=1e-6, order=2):
    """Backprop gradient of loss_fn() vs central differences of fd_fn()."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    with torch.no_grad():
        numeric = central_diff_grad(fd_fn or loss_fn, params, eps=eps, order=order)
    return max_rel_error(analytic, numeric)


class TestLossGradients:
    def test_consistency_with_frozen_targets(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z_n = torch.tensor(rng.normal(size=4), requires_grad=True)
            z_m = torch.tensor(rng.normal(size=4), requires_grad=True)
            protos = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
            with torch.no_grad():
                q_n0 = assign(z_n, protos, 0.3)
                q_m0 = assign(z_m, protos, 0.3)
            err = check(
                lambda: consistency_loss(z_n, z_m, protos, 0.3),
                [z_n, z_m, protos],
                fd_fn=lambda: consistency_loss(z_n, z_m, protos, 0.3, targets=(q_n0, q_m0)),
            )
            assert err < GRAD_TOL

    def test_spatial_total_wrt_inputs_and_prototypes(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            z_n = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
            z_m = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
            protos = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
            queue_z = torch.tensor(rng.normal(size=(3, 4)))
            with torch.no_grad():
                queue_q = assign(queue_z, protos, 0.3)
                t_n = assign(z_n, protos, 0.3)
                t_m = assign(z_m, protos, 0.3)

            def full():
                return spatial_loss(z_n, z_m, protos, 0.3, 0.7, queue_z, queue_q).total

            def frozen_targets():
                l_c = consistency_loss(z_n, z_m, protos, 0.3, targets=(t_n, t_m)).mean()
                l_r = spatial_loss(z_n, z_m, protos, 0.3, 0.0, queue_z, queue_q).total
                return 0.7 * l_c + l_r

            err = check(full, [z_n, z_m, protos], fd_fn=frozen_targets)
            assert err < GRAD_TOL

    def test_tam_including_angle_path(self):
        # five-point stencil: exp(cos/0.1) is curved enough that the plain
        # central difference's truncation error exceeds the tolerance
        rng = np.random.default_rng(2)
        for _ in range(50):
            z_n = torch.tensor(rng.normal(size=5), requires_grad=True)
            z_m = torch.tensor(rng.normal(size=5), requires_grad=True)
            negs = torch.tensor(rng.normal(size=(3, 5)), requires_grad=True)
            err = check(lambda: tam_loss(z_n, z_m, negs, 0.09, 0.1), [z_n, z_m, negs], eps=1e-5, order=4)
            assert err < GRAD_TOL

    def test_cross_view_including_temperature(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            z_s = torch.tensor(rng.normal(size=(4, 5)), requires_grad=True)
            z_t = torch.tensor(rng.normal(size=(4, 5)), requires_grad=True)
            tau = torch.tensor(0.07 + 0.4 * rng.random(), requires_grad=True)
            err = check(lambda: cross_view_loss(z_s, z_t, tau), [z_s, z_t, tau])
            assert err < GRAD_TOL

    def test_mixture_nll_wrt_parameters(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            k = 3
            w = torch.tensor(rng.dirichlet(np.ones(k)), requires_grad=True)
            mu = torch.tensor(rng.normal(size=k), requires_grad=True)
            s = torch.tensor(0.3 + rng.random(size=k), requires_grad=True)
            tau = torch.tensor(0.2 + 2.0 * rng.random())
            err = check(lambda: mixture_nll(tau, w, mu, s), [w, mu, s])
            assert err < GRAD_TOL


class TestEncoderGradients:
    def test_full_model_probe_loss(self, small_bundle):
        torch.manual_seed(0)
        cfg = tiny_pretrain_config(
            model=tiny_pretrain_config().model.__class__(
                rep_dim=5, emb_dim=3, proj_dim=4, cat_dim=4, geohash_bits=10
            ),
            num_prototypes=3,
        )
        model = RepresentationModel(small_bundle, cfg).double()
        feat = SequenceFeaturizer(small_bundle, cfg.model)
        seqs = small_bundle.train[:3]
        probe = torch.tensor(np.random.default_rng(5).normal(size=(3, 10)))

        params = [p for p in model.parameters() if p.requires_grad]

        def loss_fn():
            reps = model.representations(feat, seqs)
            return (reps * probe).sum()

        err = check(loss_fn, params, eps=1e-5)
        assert err < GRAD_TOL

    def test_projection_head_probe(self, small_bundle):
        torch.manual_seed(1)
        cfg = tiny_pretrain_config()
        model = RepresentationModel(small_bundle, cfg).double()
        head = model.cross.spatial_head
        z = torch.tensor(np.random.default_rng(6).normal(size=(4, cfg.model.rep_dim)))
        probe = torch.tensor(np.random.default_rng(7).normal(size=(4, cfg.model.proj_dim)))
        params = list(head.parameters())
        err = check(lambda: (head(z) * probe).sum(), params, eps=1e-5)
        assert err < GRAD_TOL

    def test_task_head_parameter_gradients(self):
        import torch.nn.functional as F

        from checkinrep.finetune import ClassifierHead, MixtureHead, mixture_nll

        torch.manual_seed(2)
        rng = np.random.default_rng(8)
        g = torch.tensor(rng.normal(size=(5, 6)))

        clf = ClassifierHead(6, 4).double()
        y = torch.tensor([0, 2, 1, 3, 2])
        err = check(lambda: F.cross_entropy(clf(g), y), list(clf.parameters()), eps=1e-5)
        assert err < GRAD_TOL

        mix = MixtureHead(6, k_mix=3).double()
        taus = torch.tensor(0.2 + rng.random(5))

        def nll():
            w, mu, s = mix(g)
            return mixture_nll(taus, w, mu, s).mean()

        err = check(nll, list(mix.parameters()), eps=1e-5)
        assert err < GRAD_TOL
