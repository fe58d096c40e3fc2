import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import brute_force_channel_means
from snnbd.defense import (DEFENSE_COLUMNS, ChannelRanking, DefenseConfig, channel_activation_means, fine_prune,
                           fine_tune, num_pruned, prune, rank_channel_activations, run_defenses,
                           write_defense_csv)
from snnbd.errors import EmptyDataset
from snnbd.events import SampleSet, synth_dataset
from snnbd.poison import PoisonConfig, TriggerSpec, build_asr_set
from snnbd.snn import ModelConfig, TrainConfig, build_model, forward, train

TOY = ModelConfig(width=4, input_size=8, T=4, hidden=20)


def toy_data(n_per_class=3, seed=0):
    return synth_dataset(10, n_per_class, T=4, H=8, W=8, seed=seed, peak_rate=4.0)


def hand_set_model():
    """4-channel last block: channel 2 dead, the others with graded gains."""
    model = build_model(TOY, seed=0)
    with torch.no_grad():
        for block in model.blocks:
            block.conv.weight.fill_(0.1)
        w = model.last_block.conv.weight
        for c, gain in enumerate([0.02, 0.05, 0.0, 0.03]):
            w[c] = gain
    return model.eval()


def test_dead_channel_ranks_first():
    ranking = rank_channel_activations(hand_set_model(), toy_data())
    assert ranking.order[0] == 2 and ranking.means[2] == 0


def test_ranking_matches_brute_force():
    model, data = hand_set_model(), toy_data()
    ranking = rank_channel_activations(model, data)
    oracle = brute_force_channel_means(model, data.frames)
    np.testing.assert_allclose(ranking.means, oracle, rtol=0, atol=1e-12)
    assert ranking.order.tolist() == sorted(range(4), key=lambda c: (oracle[c], c))
    assert len(set(oracle.tolist())) == 4  # the toy actually discriminates
    assert ranking.order.tolist() == [2, 0, 3, 1]


def test_ranking_order_invariant():
    model, data = hand_set_model(), toy_data()
    perm = np.random.default_rng(0).permutation(len(data))
    a = channel_activation_means(model, data, batch_size=7)
    b = channel_activation_means(model, data.subset(perm), batch_size=4)
    np.testing.assert_array_equal(a, b)


def test_ties_break_to_lower_index():
    model = build_model(TOY)
    with torch.no_grad():
        model.last_block.conv.weight.zero_()
    ranking = rank_channel_activations(model, toy_data())
    assert ranking.order.tolist() == [0, 1, 2, 3]
    assert np.all(np.diff(ranking.sorted_means) >= 0)


def test_empty_clean_set():
    empty = SampleSet(np.zeros((0, 4, 2, 8, 8), np.float32), np.zeros(0, np.int64), 10)
    with pytest.raises(EmptyDataset):
        rank_channel_activations(build_model(TOY), empty)


@pytest.mark.parametrize("tau,C,k", [(0.8, 32, 26), (0.0, 32, 0), (0.3, 10, 3), (0.5, 4, 2), (0.99, 4, 4)])
def test_num_pruned(tau, C, k):
    assert num_pruned(tau, C) == k


def test_prune_masks_lowest_channels():
    model = build_model(ModelConfig(width=32, input_size=8, T=2, hidden=20))
    means = np.random.default_rng(0).random(32)
    ranking = ChannelRanking(np.argsort(means, kind="stable"), means)
    pruned = prune(model, ranking, 0.8)
    assert len(pruned.pruned_channels) == 26
    assert sorted(pruned.pruned_channels) == sorted(np.argsort(means)[:26].tolist())
    assert int((pruned.last_block.mask.mask == 0).sum()) == 26
    assert bool((model.last_block.mask.mask == 1).all())  # original untouched


def test_tau_zero_is_identity():
    model = hand_set_model()
    pruned = prune(model, rank_channel_activations(model, toy_data()), 0.0)
    x = toy_data(2, seed=5).frames
    np.testing.assert_array_equal(forward(model, x), forward(pruned, x))


def last_block_spikes(model, frames):
    lif = model.last_block.lif
    lif.record = True
    forward(model, frames)
    lif.record = False
    return lif.last_spikes


@given(st.floats(0.0, 0.95), st.integers(0, 1000))
@settings(max_examples=15)
def test_pruning_silences_and_never_adds_spikes(tau, seed):
    model = hand_set_model()
    pruned = prune(model, rank_channel_activations(model, toy_data()), tau)
    x = np.random.default_rng(seed).poisson(3.0, size=(3, 4, 2, 8, 8)).astype(np.float32)
    before, after = last_block_spikes(model, x), last_block_spikes(pruned, x)
    if pruned.pruned_channels:
        assert after[:, :, pruned.pruned_channels].sum() == 0
    assert bool((after <= before).all())


def test_fine_tune_epochs():
    assert DefenseConfig().fine_tune_epochs(40) == 4
    assert DefenseConfig().fine_tune_epochs(10) == 1
    assert DefenseConfig(ft_epochs=2).fine_tune_epochs(10) == 2
    assert DefenseConfig().fine_tune_epochs(3) == 1
    assert DefenseConfig().fine_tune_epochs(25) == 3  # 2.5 rounds half up
    with pytest.raises(ValueError):
        DefenseConfig(tau=1.0)
    with pytest.raises(ValueError):
        DefenseConfig(ft_epoch_fraction=0)


def test_fine_prune_tau_zero_equals_fine_tune():
    data = toy_data(4)
    model = train(build_model(TOY, seed=1), data, TrainConfig(epochs=1, batch_size=8)).model
    cfg = DefenseConfig(tau=0.0, ft_epochs=2)
    tcfg = TrainConfig(epochs=10, batch_size=8, seed=3)
    ft = fine_tune(model, data, 10, tcfg, cfg)
    fp = fine_prune(model, rank_channel_activations(model, data), data, 10, tcfg, cfg)
    assert fp.pruned_channels == [] and fp.ft_epochs == 2
    for (k, a), (_, b) in zip(ft.model.state_dict().items(), fp.model.state_dict().items()):
        assert torch.equal(a, b), k


def test_fine_prune_reports_all_stages():
    data = toy_data(4)
    model = train(build_model(TOY, seed=1), data, TrainConfig(epochs=1, batch_size=8)).model
    cfg = PoisonConfig(0.1, 0, TriggerSpec(polarity=3, location="full", size=100))
    asr = build_asr_set(data, cfg)
    fp = fine_prune(model, rank_channel_activations(model, data), data, 10, TrainConfig(batch_size=8),
                    DefenseConfig(tau=0.5), test_set=data, asr_set=asr, target_label=0)
    for stage in (fp.before, fp.pruned, fp.tuned):
        assert 0 <= stage.clean_acc <= 1 and 0 <= stage.asr <= 1
    assert len(fp.pruned_channels) == 2


def test_run_defenses_row(tmp_path):
    data = toy_data(4)
    model = train(build_model(TOY, seed=1), data, TrainConfig(epochs=1, batch_size=8)).model
    asr = build_asr_set(data, PoisonConfig(0.1, 0, TriggerSpec(location="full", size=100)))
    row = run_defenses(model, data, data, asr, 0, 10, TrainConfig(batch_size=8), DefenseConfig(tau=0.5))
    assert row["ft_epochs"] == 1 and len(row["pruned_channels"]) == 2
    row.update(dataset="synthetic", size=1.0, attack="flashy", poisoned_frames=3)
    write_defense_csv(tmp_path / "d.csv", [row])
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header.split(",") == DEFENSE_COLUMNS
