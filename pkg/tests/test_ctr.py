import csv
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrattn.autoencoder import TrainingError
from ctrattn.ctr import (
    CtrConfig,
    beta,
    blend,
    lambda_groups,
    sample_lambdas,
    sample_sources,
    sparsity_losses,
    total_loss,
    train_ctr,
)
from ctrattn.nets import ActionPredictor, Arch, CTRNet, Encoder

from .test_nets import TINY, directional_check


def _rand(seed, shape=(2, 32, 21, 21)):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_blend_identities(seed):
    ft, fs = _rand(seed), _rand(seed + 1)
    one = torch.ones(2, 1, 21, 21, dtype=torch.float64)
    zero = torch.zeros_like(one)
    psi = torch.rand(2, 1, 21, 21, dtype=torch.float64)
    assert torch.equal(blend(ft, one, fs, psi), ft)
    assert torch.equal(blend(ft, zero, fs, zero), fs)
    assert torch.count_nonzero(blend(ft, zero, fs, one)) == 0


def test_blend_elementwise_on_mixed_maps():
    ft, fs = _rand(3), _rand(4)
    g = torch.Generator().manual_seed(5)
    psi_t = torch.rand(2, 1, 21, 21, generator=g, dtype=torch.float64)
    psi_s = torch.rand(2, 1, 21, 21, generator=g, dtype=torch.float64)
    psi_t[:, :, :5] = 1.0
    psi_t[:, :, 10:] = 0.0
    psi_s[:, :, 10:] = 0.0
    out = blend(ft, psi_t, fs, psi_s)
    assert torch.equal(out[..., :5, :], ft[..., :5, :])
    assert torch.equal(out[..., 10:, :], fs[..., 10:, :])


def test_blend_rejects_nan():
    ft = _rand(0)
    ft[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        blend(ft, torch.ones(2, 1, 21, 21, dtype=torch.float64), _rand(1), torch.ones(2, 1, 21, 21, dtype=torch.float64))


def test_blend_gradient_finite_at_saturation():
    psi_t = torch.ones(1, 1, 21, 21, dtype=torch.float64, requires_grad=True)
    psi_s = torch.ones(1, 1, 21, 21, dtype=torch.float64, requires_grad=True)
    blend(_rand(0, (1, 32, 21, 21)), psi_t, _rand(1, (1, 32, 21, 21)), psi_s).sum().backward()
    assert torch.isfinite(psi_t.grad).all() and torch.isfinite(psi_s.grad).all()


def _const_maps(values):
    return torch.stack([torch.full((1, 21, 21), v, dtype=torch.float64) for v in values])


def test_sparsity_fixtures():
    l1, l2 = sparsity_losses(_const_maps([0.02]), torch.tensor([0.04], dtype=torch.float64))
    assert l1.item() == pytest.approx(0.02 / (0.04 + 1e-6), abs=1e-9)
    assert l1.item() == pytest.approx(0.49999, abs=1e-5)
    assert l2.item() == 0.0
    l1, l2 = sparsity_losses(_const_maps([0.08]), torch.tensor([0.04], dtype=torch.float64))
    assert l1.item() == pytest.approx(0.04 / (0.04 + 1e-6), abs=1e-9)
    assert l2.item() == pytest.approx(l1.item(), abs=1e-12)
    assert l1.item() == pytest.approx(0.99997, abs=1e-5)


def test_sparsity_exact_match_is_zero():
    lams = torch.tensor([0.1, 0.25, 0.5], dtype=torch.float64)
    l1, l2 = sparsity_losses(_const_maps(lams.tolist()), lams)
    assert l1.item() == pytest.approx(0.0, abs=1e-12)
    assert l2.item() == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=50, deadline=None)
def test_lambda2_zero_when_under_target(seed, n):
    g = torch.Generator().manual_seed(seed)
    lams = torch.rand(n, generator=g, dtype=torch.float64) * 0.99 + 0.01
    psi = torch.rand(4 * n, 1, 21, 21, generator=g, dtype=torch.float64)
    groups = lambda_groups(4 * n, n)
    # rescale each sample so its group mean ends up at or below lambda
    psi = psi / psi.mean(dim=(1, 2, 3), keepdim=True) * lams[groups].reshape(-1, 1, 1, 1) * torch.rand(1, generator=g).item()
    _, l2 = sparsity_losses(psi.clamp(0, 1), lams, groups)
    assert l2.item() == 0.0


def test_sparsity_groups_average_by_lambda():
    psi = _const_maps([0.1, 0.3, 0.2, 0.2])
    lams = torch.tensor([0.2, 0.2], dtype=torch.float64)
    l1, _ = sparsity_losses(psi, lams, torch.tensor([0, 0, 1, 1]))
    assert l1.item() == pytest.approx(0.0, abs=1e-12)


def test_short_batch_ignores_missing_groups():
    l1, l2 = sparsity_losses(_const_maps([0.5, 0.5]), torch.full((6,), 0.5, dtype=torch.float64), lambda_groups(2, 6))
    assert math.isfinite(l1.item()) and l1.item() == pytest.approx(0.0, abs=1e-12)


def test_beta_schedule():
    assert beta(0) == 1.0
    assert beta(50) == 0.5
    assert beta(100) == 0.0
    assert beta(250) == 0.0
    with pytest.raises(ValueError):
        beta(-1)


class _Oracle(torch.nn.Module):
    """Predicts the given actions with certainty regardless of input."""

    def __init__(self, actions, n=3):
        super().__init__()
        self.logits = torch.full((len(actions), n), -1e4, dtype=torch.float64)
        self.logits[torch.arange(len(actions)), actions] = 0.0

    def forward(self, f):
        return self.logits


def test_total_loss_zero_for_perfect_everything():
    lam = 0.3
    net = CTRNet(Arch.toy()).double()
    last = net.head.pointwise[-1]
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)  # the logit(lambda) shift alone gives mean lambda
    actions = torch.tensor([0, 2, 1, 1, 0, 2])
    f = _rand(0, (6, 32, 21, 21))
    loss, rep = total_loss(net, _Oracle(actions), f, _rand(1, (6, 32, 21, 21)), actions,
                           torch.full((6,), lam, dtype=torch.float64), epoch=0)
    assert rep.ap_blend == 0.0 and rep.ap == 0.0
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_source_free_path_equals_masked_cross_entropy():
    torch.manual_seed(0)
    net = CTRNet(Arch.toy()).double()
    ap = ActionPredictor(Arch.toy()).double()
    f = _rand(2, (6, 32, 21, 21))
    actions = torch.tensor([0, 1, 2, 0, 1, 2])
    lams = torch.linspace(0.05, 0.9, 6, dtype=torch.float64)
    _, rep = total_loss(net, ap, f, _rand(3, (6, 32, 21, 21)), actions, lams, epoch=3, use_blend=False)
    psi = net.attend(f, lams[lambda_groups(6, 6)])
    assert torch.equal(blend(f, psi, torch.zeros_like(f), torch.ones_like(psi)), f * psi)
    assert rep.ap_blend == pytest.approx(F.cross_entropy(ap(f * psi), actions).item(), abs=1e-12)


def test_total_loss_weighting():
    torch.manual_seed(1)
    net = CTRNet(Arch.toy()).double()
    ap = ActionPredictor(Arch.toy()).double()
    f, fs = _rand(4, (6, 32, 21, 21)), _rand(5, (6, 32, 21, 21))
    actions = torch.tensor([0, 1, 2, 0, 1, 2])
    lams = torch.linspace(0.05, 0.9, 6, dtype=torch.float64)
    for epoch in (0, 40, 100, 170):
        loss, r = total_loss(net, ap, f, fs, actions, lams, epoch)
        b = beta(epoch)
        assert r.beta == b
        assert loss.item() == pytest.approx(r.ap_blend + r.ap + b * r.lambda1 + (1 - b) * r.lambda2, rel=1e-12)


@pytest.mark.parametrize("probe", range(5))
def test_total_loss_gradient(probe):
    torch.manual_seed(probe)
    net = CTRNet(TINY).double()
    ap = ActionPredictor(TINY).double()
    x = torch.rand(6, 4, 16, 16, dtype=torch.float64)
    xs = torch.rand(6, 4, 16, 16, dtype=torch.float64)
    actions = torch.tensor([0, 1, 2, 2, 1, 0])
    lams = torch.linspace(0.1, 0.9, 6, dtype=torch.float64)
    params = list(net.parameters())

    def fn():
        return total_loss(net, ap, net.encoder(x), net.encoder(xs), actions, lams, epoch=60)[0]

    assert directional_check(fn, params, probe) < 1e-3


def test_lambda_sampling_log_uniform_and_seeded():
    a = sample_lambdas(torch.Generator().manual_seed(0), 20000, 0.01, 1.0)
    b = sample_lambdas(torch.Generator().manual_seed(0), 20000, 0.01, 1.0)
    assert torch.equal(a, b)
    assert a.min() >= 0.01 and a.max() <= 1.0
    # log10 is uniform on [-2, 0]: mean -1, quartiles at -1.5 and -0.5
    lg = torch.log10(a.double())
    assert lg.mean().item() == pytest.approx(-1.0, abs=0.02)
    assert (lg < -1.5).double().mean().item() == pytest.approx(0.25, abs=0.015)


@given(st.integers(2, 200), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_sources_differ_from_targets(n, seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randint(0, n, (64,), generator=g)
    s = sample_sources(g, t, n)
    assert torch.all(s != t)
    assert s.min() >= 0 and s.max() < n


def _tiny_data(n=24, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 4, 16, 16, generator=g), torch.randint(0, 3, (n,), generator=g)


def test_train_ctr_deterministic_and_logged(tmp_path):
    x, y = _tiny_data()
    enc = Encoder(4, 4)
    cfg = CtrConfig(epochs=3, batch_size=8, seed=5)
    r1 = train_ctr(x, y, enc, cfg, TINY, log_path=tmp_path / "a.csv")
    r2 = train_ctr(x, y, enc, cfg, TINY, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["epoch", "total", "ap_blend", "ap", "lambda1", "lambda2", "beta"]
    assert len(rows) == 4
    assert [r.beta for r in r1.reports] == [1.0, 0.99, 0.98]
    for p, q in zip(r1.ctr.parameters(), r2.ctr.parameters()):
        assert torch.equal(p, q)


def test_train_ctr_frozen_encoder_untouched():
    x, y = _tiny_data()
    enc = Encoder(4, 4)
    res = train_ctr(x, y, enc, CtrConfig(epochs=2, batch_size=8, finetune_encoder=False), TINY)
    for p, q in zip(enc.parameters(), res.ctr.encoder.parameters()):
        assert torch.equal(p, q)


def test_train_ctr_reports_divergence():
    x, y = _tiny_data()
    enc = Encoder(4, 4)
    feats = enc(x).detach()
    feats[3] = float("inf")
    with pytest.raises(TrainingError, match="epoch 0"):
        train_ctr(None, y, enc, CtrConfig(epochs=1, batch_size=8, finetune_encoder=False), TINY, features=feats)
