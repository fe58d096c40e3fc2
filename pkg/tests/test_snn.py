import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from oracles import central_difference_grads
from snnbd.errors import EmptyDataset, ShapeMismatch
from snnbd.events import SampleSet, synth_dataset
from snnbd.snn import (LIF, LifParams, MaxPool2x2, ModelConfig, SeqDropout, SeqFold, TrainConfig, Voting, build_model,
                       evaluate, evaluate_asr, forward, lif_step, lif_unrolled, load_checkpoint, save_checkpoint,
                       surrogate_derivative, train, write_train_log)

TINY = ModelConfig(width=4, input_size=8, T=4, hidden=20)


def test_lif_rest_stays_at_rest():
    u, s = lif_step(np.zeros(3), np.zeros(3))
    assert not u.any() and not s.any()


def test_lif_hand_trace_spike_and_reset():
    p = LifParams(lam=0.5, u_th=1.0, u0=0.0)
    u, s = lif_step(np.array([0.8]), np.array([0.7]), p)
    assert s.tolist() == [1.0] and u.tolist() == [0.0]
    ut, st_ = lif_step(torch.tensor([0.8]), torch.tensor([0.7]), p)
    assert st_.item() == 1.0 and ut.item() == 0.0


def test_lif_hand_trace_sub_threshold():
    # h = 0.5 * 0.6 + 0.3 = 0.6 < 1
    u, s = lif_step(np.array([0.6]), np.array([0.3]), LifParams(lam=0.5))
    assert s.tolist() == [0.0] and u.tolist() == [0.6]


def test_integrate_and_fire_reduction():
    rng = np.random.default_rng(0)
    inputs = rng.normal(size=(100, 7))
    p = LifParams(lam=1.0, u_th=math.inf)
    u = np.zeros(7)
    for t in range(100):
        u, s = lif_step(u, inputs[t], p)
        assert not s.any()
        np.testing.assert_array_equal(u, np.cumsum(inputs[:t + 1], axis=0)[-1])
    spikes = lif_unrolled(torch.as_tensor(inputs), p)
    assert not spikes.any()


@given(st.floats(0.05, 1.0), st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 0.5))
def test_reset_invariant(lam, u, x, u0):
    p = LifParams(lam=lam, u_th=1.0, u0=u0)
    u_next, s = lif_step(np.array([u]), np.array([x]), p)
    if s[0]:
        assert u_next[0] == u0
    else:
        assert u_next[0] == lam * u + x


def test_surrogate_values():
    assert surrogate_derivative(0.0, 2.0) == 1.0
    v = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(surrogate_derivative(v, 2.0), surrogate_derivative(-v, 2.0))
    assert (surrogate_derivative(v, 2.0) > 0).all()
    assert surrogate_derivative(v, 2.0).argmax() == 50
    assert surrogate_derivative(1e6, 2.0) < 1e-12


def test_fused_lif_matches_unrolled():
    torch.manual_seed(0)
    x = (torch.randn(6, 3, 5, 4, 4, dtype=torch.float64) * 1.2).requires_grad_()
    for smooth in (False, True):
        a = LIF(LifParams(), smooth)(x)
        b = lif_unrolled(x, LifParams(), smooth)
        np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), atol=1e-12)
        w = torch.randn_like(a)
        ga, = torch.autograd.grad((a * w).sum(), x)
        gb, = torch.autograd.grad((b * w).sum(), x)
        np.testing.assert_allclose(ga.numpy(), gb.numpy(), rtol=1e-10, atol=1e-12)


def test_fused_lif_channels_last_input():
    torch.manual_seed(1)
    x = torch.randn(4, 2, 3, 5, 5, dtype=torch.float64)
    cl = x.permute(0, 1, 3, 4, 2).contiguous().permute(0, 1, 4, 2, 3)
    np.testing.assert_array_equal(LIF()(cl).numpy(), LIF()(x).numpy())


class TwoLayer(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = SeqFold(nn.Linear(6, 12))
        self.lif1 = LIF(LifParams(alpha=1.0), smooth=True)
        self.fc2 = SeqFold(nn.Linear(12, 4))
        self.lif2 = LIF(LifParams(alpha=1.0), smooth=True)

    def forward(self, x):
        return self.lif2(self.fc2(self.lif1(self.fc1(x)))).mean(0)


def gradient_check(n_params=120, seed=0):
    """Max relative error of backprop against central differences on a smooth 2-layer SNN."""
    torch.manual_seed(seed)
    net = TwoLayer().double()
    x = torch.randn(5, 3, 6, dtype=torch.float64) * 2
    target = torch.randn(3, 4, dtype=torch.float64)

    def loss_fn():
        return ((net(x) - target) ** 2).sum()

    params = list(net.parameters())
    net.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    sizes = [p.numel() for p in params]
    picks = set()
    while len(picks) < n_params:
        ti = int(rng.integers(len(params)))
        picks.add((ti, int(rng.integers(sizes[ti]))))
    picks = sorted(picks)
    analytic = np.array([params[ti].grad.view(-1)[fi].item() for ti, fi in picks])
    numeric = central_difference_grads(loss_fn, params, picks)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return len(picks), float(rel.max())


def test_gradient_check():
    n, err = gradient_check()
    assert n >= 100
    assert err <= 1e-4


@given(st.integers(0, 2 ** 16))
@settings(max_examples=25)
def test_voting_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 40, generator=g)
    perm = torch.cat([torch.randperm(10, generator=g) + 10 * k for k in range(4)])
    vote = Voting(4)
    torch.testing.assert_close(vote(x), vote(x[:, perm]), rtol=1e-6, atol=1e-7)
    torch.testing.assert_close(vote(x)[:, 1], x[:, 10:20].mean(-1))


def test_voting_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Voting(10)(torch.zeros(2, 99))


def test_zero_input_equal_scores():
    model = build_model(TINY, seed=3)
    scores = forward(model, np.zeros((4, 2, 8, 8)))
    assert scores.shape == (10,)
    assert (scores == scores[0]).all()


def test_forward_deterministic_and_shaped():
    model = build_model(TINY, seed=0)
    x = np.random.default_rng(0).poisson(2.0, size=(2, 4, 2, 8, 8)).astype(np.float32)
    x[1] = x[0]
    a = forward(model, x)
    b = forward(model, x)
    assert a.shape == (2, 10)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], a[1])


@pytest.mark.parametrize("shape", [(1, 3, 2, 8, 8), (1, 4, 2, 8, 4), (4, 2, 8, 8, 1)])
def test_forward_shape_mismatch(shape):
    with pytest.raises(ShapeMismatch):
        forward(build_model(TINY), np.zeros(shape))


@pytest.mark.parametrize("arch,blocks", [("nmnist", 2), ("cifar10dvs", 4), ("gesture", 5)])
def test_architectures(arch, blocks):
    cfg = ModelConfig(arch=arch, width=4, input_size=32, T=2, num_classes=11 if arch == "gesture" else 10)
    model = build_model(cfg)
    assert len(model.blocks) == blocks
    assert forward(model, np.zeros((2, 2, 32, 32))).shape == (cfg.num_classes,)
    dropouts = sum(isinstance(m, SeqDropout) for m in model.head)
    assert dropouts == (1 if arch == "cifar10dvs" else 2)


def test_dropout_mask_shared_over_time():
    torch.manual_seed(0)
    y = SeqDropout(0.5).train()(torch.ones(5, 3, 7))
    assert (y == y[0]).all()


def tiny_data(n_per_class=4, seed=0):
    return synth_dataset(10, n_per_class, T=4, H=8, W=8, seed=seed)


def test_training_deterministic():
    data = tiny_data()
    cfg = TrainConfig(epochs=2, batch_size=8, seed=5)
    a = train(build_model(TINY, seed=1), data, cfg)
    b = train(build_model(TINY, seed=1), data, cfg)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    for (na, pa), (nb, pb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb)


def test_first_epoch_loss_decreases():
    data = synth_dataset(10, 100, seed=0)
    result = train(build_model(ModelConfig(), seed=0), data, TrainConfig(epochs=1, seed=0))
    losses = result.first_epoch_batch_losses
    assert np.mean(losses[-5:]) < losses[0] - 0.02


def test_train_log_csv(tmp_path):
    write_train_log(tmp_path / "log.csv", [{"epoch": 1, "loss": 0.5, "train_acc": 0.9}])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines == ["epoch,loss,clean_acc", "1,0.5,"]


def test_checkpoint_round_trip(tmp_path):
    model = train(build_model(TINY, seed=2), tiny_data(), TrainConfig(epochs=1, batch_size=8)).model
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.cfg == model.cfg
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    x = tiny_data(1, seed=9).frames
    np.testing.assert_array_equal(forward(model, x), forward(loaded, x))
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"SNNBDCKP"


class Constant(nn.Module):
    def __init__(self, label, num_classes=10):
        super().__init__()
        self.label, self.num_classes = label, num_classes

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.num_classes)
        out[:, self.label] = 1
        return out


class RandomScorer(nn.Module):
    def __init__(self, seed=0):
        super().__init__()
        self.gen = torch.Generator().manual_seed(seed)

    def forward(self, x):
        return torch.rand(x.shape[0], 10, generator=self.gen)


def test_constant_scorer_asr():
    data = tiny_data()
    asr_set = SampleSet(data.frames, np.full(len(data), 3), 10, {"target_label": 3})
    assert evaluate_asr(Constant(3), asr_set) == 1.0
    assert evaluate_asr(Constant(4), asr_set, 3) == 0.0


def test_random_scorer_chance():
    data = SampleSet(np.zeros((2000, 1, 1, 1, 1), np.float32), np.arange(2000) % 10, 10)
    acc = evaluate(RandomScorer(), data)
    # 4 binomial standard deviations around 0.1
    assert abs(acc - 0.1) < 4 * math.sqrt(0.09 / 2000)


def test_empty_dataset():
    empty = SampleSet(np.zeros((0, 4, 2, 8, 8), np.float32), np.zeros(0, np.int64), 10)
    with pytest.raises(EmptyDataset):
        evaluate(build_model(TINY), empty)


@pytest.mark.parametrize("shape,binary", [((3, 4, 6, 8), False), ((5, 2, 3, 8, 8), True), ((2, 3, 7, 9), True),
                                          ((2, 3, 4, 4), None)])
def test_spike_pool_matches_torch(shape, binary):
    torch.manual_seed(0)
    if binary is None:
        x = torch.zeros(shape)
    else:
        x = (torch.rand(shape) > 0.6).float() if binary else torch.randn(shape, dtype=torch.float64)
    a, b = x.clone().requires_grad_(), x.clone().requires_grad_()
    ya = MaxPool2x2.apply(a)
    yb = torch.nn.functional.max_pool2d(b.reshape(-1, 1, *shape[-2:]), 2).view(ya.shape)
    w = torch.randn_like(ya)
    (ya * w).sum().backward()
    (yb * w).sum().backward()
    assert torch.equal(ya, yb) and torch.equal(a.grad, b.grad)
