import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ctrattn.nets import (
    ActionPredictor,
    Arch,
    Autoencoder,
    BlurPool2d,
    CTRNet,
    ContextHead,
    DuelingQNet,
    Encoder,
    NumericError,
    TIOANet,
    binomial_kernel,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from ctrattn.toy import ToyConfig, generate_toy_replay

TINY = Arch(frame_size=16, feature_channels=4, pointwise=(6, 4), decoder_channels=(4, 4),
            ap_channels=(4, 4), ap_hidden=8, q_channels=(4, 4), q_hidden=8)


def directional_check(fn, params, seed, h=1e-6):
    """Relative error between analytic and central-difference directional derivatives."""
    g = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
    for p in params:
        p.grad = None
    fn().backward()
    analytic = sum((p.grad * d).sum() for p, d in zip(params, dirs)).item()
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        up = fn().item()
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        down = fn().item()
        for p, d in zip(params, dirs):
            p.add_(h * d)
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)


def test_encoder_output_shape_full_size():
    enc = Encoder()
    assert enc(torch.rand(2, 4, 84, 84)).shape == (2, 32, 21, 21)


def test_binomial_kernel_normalized():
    k = binomial_kernel()
    assert torch.all(k >= 0)
    assert k.sum().item() == pytest.approx(1.0, abs=1e-7)
    bp = BlurPool2d(3)
    assert torch.allclose(bp(torch.ones(1, 3, 8, 8))[..., 1:-1, 1:-1], torch.ones(1, 3, 2, 2))


def test_zero_state_zero_bias_gives_zero_features():
    enc = Encoder()
    for m in enc.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.bias)
    assert torch.count_nonzero(enc(torch.zeros(1, 4, 84, 84))) == 0


def test_encode_rejects_non_finite_parameters():
    enc = Encoder()
    with torch.no_grad():
        enc.conv2.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        encode(np.zeros((1, 4, 84, 84), np.float32), enc)


def _toy_states(n=20):
    mem, _ = generate_toy_replay(ToyConfig(), 200, 13, "human")
    idx = np.linspace(0, len(mem) - 1, n).astype(int)
    return torch.as_tensor(mem.states(idx))


def _shift_mismatch(enc, x, px):
    shifted = torch.roll(x, shifts=px, dims=-1)
    with torch.no_grad():
        a = enc(x)
        b = enc(shifted)
    if px % 4 == 0:
        c = px // 4
        m = 4  # interior margin beyond the receptive field of the wrapped border
        return (b[..., m:-m, m + c : -m] - a[..., m:-m, m : -m - c]).abs().mean().item()
    # sub-stride shifts: compare pooled descriptors (shift-stable for an alias-free encoder)
    return (b.mean(dim=(-2, -1)) - a.mean(dim=(-2, -1))).abs().mean().item() + (
        b.amax(dim=(-2, -1)) - a.amax(dim=(-2, -1))
    ).abs().mean().item()


def _encoder_pair(seed):
    torch.manual_seed(seed)
    blur = Encoder(antialias=True)
    torch.manual_seed(seed)
    plain = Encoder(antialias=False)
    return blur, plain


def test_four_pixel_shift_antialiased_not_worse():
    x = _toy_states()
    blur, plain = _encoder_pair(0)
    mb, mp = _shift_mismatch(blur, x, 4), _shift_mismatch(plain, x, 4)
    assert mb <= mp + 1e-6


@pytest.mark.parametrize("px", [1, 2, 3])
def test_sub_stride_shift_antialiased_more_stable(px):
    x = _toy_states()
    wins = 0
    for seed in range(3):
        blur, plain = _encoder_pair(seed)
        wins += _shift_mismatch(blur, x, px) < _shift_mismatch(plain, x, px)
    assert wins >= 2


def test_ctr_output_bounds_and_determinism():
    torch.manual_seed(1)
    net = CTRNet(Arch.toy())
    x = torch.rand(3, 4, 84, 84)
    m1 = net(x, 0.3)
    m2 = net(x, 0.3)
    assert m1.shape == (3, 1, 21, 21)
    assert torch.equal(m1, m2)
    assert m1.min() >= 0 and m1.max() <= 1


@pytest.mark.parametrize("lam", [-0.1, 1.5, float("nan")])
def test_ctr_rejects_bad_lambda(lam):
    net = CTRNet(Arch.toy())
    with pytest.raises(ValueError):
        net(torch.rand(1, 4, 84, 84), lam)


def test_lambda_reaches_output():
    torch.manual_seed(2)
    net = CTRNet(Arch.toy())
    lam = torch.tensor([0.3], requires_grad=True)
    net(torch.rand(1, 4, 84, 84), lam).sum().backward()
    assert lam.grad.abs().item() > 0


def test_zero_head_gives_half():
    net = CTRNet(Arch.toy())
    for p in net.head.pointwise[-1].parameters():
        torch.nn.init.zeros_(p)
    out = net(torch.rand(2, 4, 84, 84), 0.5)
    assert torch.all(out == 0.5)


def test_dilations_must_increase():
    with pytest.raises(ValueError):
        ContextHead(dilations=(1, 4, 2, 8))


def test_action_predictor_simplex():
    torch.manual_seed(3)
    ap = ActionPredictor(Arch.toy())
    p = ap.probs(torch.randn(5, 32, 21, 21))
    assert p.shape == (5, 3)
    assert torch.allclose(p.sum(1), torch.ones(5), atol=1e-6)


def test_zero_logits_uniform_and_perfect_ce_zero():
    assert torch.allclose(torch.softmax(torch.zeros(1, 3), 1), torch.full((1, 3), 1 / 3))
    logits = torch.tensor([[0.0, -1e4, -1e4]], dtype=torch.float64)
    assert F.cross_entropy(logits, torch.tensor([0])).item() == 0.0


def test_tioa_map_sums_to_one():
    torch.manual_seed(4)
    net = TIOANet(Arch.toy())
    out = net(torch.rand(4, 4, 84, 84))
    assert out.shape == (4, 21, 21)
    assert torch.allclose(out.sum((1, 2)), torch.ones(4), atol=1e-6)


def test_autoencoder_shape():
    assert Autoencoder(Arch.toy())(torch.rand(2, 4, 84, 84)).shape == (2, 4, 84, 84)


def _tiny_blocks(seed):
    torch.manual_seed(seed)
    x = torch.rand(2, 4, 16, 16, dtype=torch.float64)
    f = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    ctr = CTRNet(TINY).double()
    return {
        "encoder": (Encoder(4, 4).double(), lambda m: m(x).pow(2).sum()),
        "head": (ctr.head, lambda m: torch.sigmoid(m(f, torch.tensor([0.2, 0.7], dtype=torch.float64))).sum()),
        "predictor": (ActionPredictor(TINY).double(), lambda m: F.log_softmax(m(f), 1)[:, 1].sum()),
        "dueling": (DuelingQNet(TINY).double(), lambda m: m(f).pow(2).sum()),
        "decoder": (Autoencoder(TINY).double(), lambda m: m(x).pow(2).mean()),
        "gaze": (TIOANet(TINY).double(), lambda m: (m(x) * torch.arange(16.0, dtype=torch.float64).reshape(4, 4)).sum()),
    }


@pytest.mark.parametrize("block", ["encoder", "head", "predictor", "dueling", "decoder", "gaze"])
def test_block_gradients_match_finite_differences(block):
    for seed in range(10):
        module, fn = _tiny_blocks(seed)[block]
        params = [p for p in module.parameters() if p.requires_grad]
        assert directional_check(lambda: fn(module), params, seed) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(5)
    net = CTRNet(Arch.toy())
    ap = ActionPredictor(Arch.toy())
    path = save_checkpoint(tmp_path / "m.npz", {"ctr": net, "ap": ap}, {"arch": Arch.toy().to_dict(), "lam": 0.1})
    states, meta = load_checkpoint(path)
    arch = Arch.from_dict(meta["arch"])
    assert arch == Arch.toy()
    net2 = CTRNet(arch)
    net2.load_state_dict(states["ctr"])
    x = torch.rand(1, 4, 84, 84)
    assert torch.equal(net(x, 0.1), net2(x, 0.1))
    assert meta["lam"] == 0.1


def test_checkpoint_rejects_unknown_format(tmp_path):
    import json

    np.savez(tmp_path / "bad.npz", __manifest__=np.frombuffer(json.dumps({"format": "x"}).encode(), np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")


def test_copied_encoder_bit_identical():
    torch.manual_seed(6)
    ae = Autoencoder(Arch.toy())
    ctr = CTRNet(Arch.toy())
    ctr.encoder.load_state_dict(ae.encoder.state_dict())
    x = torch.rand(3, 4, 84, 84)
    assert torch.equal(encode(x, ae.encoder), encode(x, ctr.encoder))
