"""Pruning, fine-tuning and fine-pruning against backdoored SNNs.

Pruning works on output channels of the last conv block. Channels are ranked
by their mean spike rate on clean data and the least active ones are masked:
the block's channel mask and batch-norm affine terms are zeroed, together
with the outgoing weights into the first dense layer. Masking keeps the model
shape, so checkpoints stay compatible and pruning can be swept cheaply.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from snnbd.errors import EmptyDataset
from snnbd.events import SampleSet
from snnbd.snn import SpikingConvNet, TrainConfig, TrainResult, _as_tensor, evaluate, evaluate_asr, train


@dataclass(frozen=True)
class DefenseConfig:
    tau: float = 0.8
    ft_epoch_fraction: float = 0.10
    ft_epochs: int | None = None  # explicit override of the fraction rule

    def __post_init__(self):
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if self.ft_epoch_fraction <= 0:
            raise ValueError(f"ft_epoch_fraction must be positive, got {self.ft_epoch_fraction}")
        if self.ft_epochs is not None and self.ft_epochs < 1:
            raise ValueError(f"ft_epochs must be >= 1, got {self.ft_epochs}")

    def fine_tune_epochs(self, original_epochs: int) -> int:
        if original_epochs < 1:
            raise ValueError(f"original_epochs must be >= 1, got {original_epochs}")
        if self.ft_epochs is not None:
            return self.ft_epochs
        return max(1, int(math.floor(self.ft_epoch_fraction * original_epochs + 0.5)))


@dataclass(frozen=True)
class ChannelRanking:
    order: np.ndarray  # channel indices, least active first
    means: np.ndarray  # mean activation per channel, indexed by channel

    @property
    def sorted_means(self) -> np.ndarray:
        return self.means[self.order]


def channel_activation_means(model: SpikingConvNet, dataset: SampleSet, batch_size: int = 64) -> np.ndarray:
    """Mean spike output per channel of the last conv layer.

    Averaged over samples, time steps and spatial positions. Spike counts are
    accumulated as exact integers so the result does not depend on order.
    """
    if len(dataset) == 0:
        raise EmptyDataset("activation ranking needs at least one clean sample")
    lif = model.last_block.lif
    was_training = model.training
    model.eval()
    totals = np.zeros(model.cfg.width, dtype=np.int64)
    cells = 0
    lif.record = True
    try:
        with torch.no_grad():
            for k in range(0, len(dataset), batch_size):
                model(_as_tensor(dataset.frames[k:k + batch_size]))
                spikes = lif.last_spikes  # (T, B, C, H, W)
                totals += spikes.sum(dim=(0, 1, 3, 4)).to(torch.int64).numpy()
                cells += spikes.numel() // spikes.shape[2]
    finally:
        lif.record = False
        lif.last_spikes = None
        model.train(was_training)
    return totals / cells


def rank_channel_activations(model: SpikingConvNet, clean_set: SampleSet, batch_size: int = 64) -> ChannelRanking:
    means = channel_activation_means(model, clean_set, batch_size)
    order = np.lexsort((np.arange(len(means)), means))
    return ChannelRanking(order, means)


def num_pruned(tau: float, channels: int) -> int:
    # round first so e.g. 0.3 * 10 does not ceil to 4
    return int(math.ceil(round(tau * channels, 9)))


def prune(model: SpikingConvNet, ranking: ChannelRanking, tau: float) -> SpikingConvNet:
    """Copy of ``model`` with the ``ceil(tau * C)`` least active channels masked."""
    if not 0 <= tau < 1:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    pruned = copy.deepcopy(model)
    k = num_pruned(tau, len(ranking.order))
    channels = np.sort(ranking.order[:k])
    pruned.pruned_channels = channels.tolist()
    if k == 0:
        return pruned
    block = pruned.last_block
    idx = torch.as_tensor(channels)
    with torch.no_grad():
        block.mask.mask[idx] = 0
        block.bn.weight[idx] = 0
        block.bn.bias[idx] = 0
        first_dense = next(m.module for m in pruned.head if isinstance(getattr(m, "module", None), torch.nn.Linear))
        per_channel = first_dense.in_features // model.cfg.width
        cols = (idx[:, None] * per_channel + torch.arange(per_channel)).reshape(-1)
        first_dense.weight[:, cols] = 0
    return pruned


def fine_tune(model: SpikingConvNet, clean_set: SampleSet, original_epochs: int, train_cfg: TrainConfig,
              cfg: DefenseConfig = DefenseConfig(), eval_set: SampleSet | None = None) -> TrainResult:
    """Continue training a copy of ``model`` on clean data with a fresh optimizer."""
    tuned = copy.deepcopy(model)
    epochs = cfg.fine_tune_epochs(original_epochs)
    ft_cfg = TrainConfig(epochs=epochs, learning_rate=train_cfg.learning_rate,
                         batch_size=train_cfg.batch_size, seed=train_cfg.seed)
    return train(tuned, clean_set, ft_cfg, eval_set=eval_set)


@dataclass
class StageMetrics:
    clean_acc: float | None = None
    asr: float | None = None


@dataclass
class FinePruneResult:
    model: SpikingConvNet
    pruned_channels: list[int]
    ft_epochs: int
    before: StageMetrics = field(default_factory=StageMetrics)
    pruned: StageMetrics = field(default_factory=StageMetrics)
    tuned: StageMetrics = field(default_factory=StageMetrics)
    log: list[dict] = field(default_factory=list)


def _metrics(model, test_set, asr_set, target) -> StageMetrics:
    m = StageMetrics()
    if test_set is not None:
        m.clean_acc = evaluate(model, test_set)
    if asr_set is not None:
        m.asr = evaluate_asr(model, asr_set, target)
    return m


def fine_prune(model: SpikingConvNet, ranking: ChannelRanking, clean_set: SampleSet, original_epochs: int,
               train_cfg: TrainConfig, cfg: DefenseConfig = DefenseConfig(), *, test_set: SampleSet | None = None,
               asr_set: SampleSet | None = None, target_label: int | None = None) -> FinePruneResult:
    """Prune, then fine-tune the pruned copy; metrics recorded at each stage."""
    pruned = prune(model, ranking, cfg.tau)
    result = fine_tune(pruned, clean_set, original_epochs, train_cfg, cfg)
    result.model.pruned_channels = pruned.pruned_channels
    return FinePruneResult(
        model=result.model,
        pruned_channels=pruned.pruned_channels,
        ft_epochs=len(result.log),
        before=_metrics(model, test_set, asr_set, target_label),
        pruned=_metrics(pruned, test_set, asr_set, target_label),
        tuned=_metrics(result.model, test_set, asr_set, target_label),
        log=result.log,
    )


DEFENSE_COLUMNS = ["dataset", "size", "attack", "poisoned_frames", "initial_ca", "initial_asr", "tau",
                   "pruned_ca", "pruned_asr", "ft_epochs", "ft_ca", "ft_asr", "fp_ca", "fp_asr"]


def run_defenses(model: SpikingConvNet, clean_set: SampleSet, test_set: SampleSet, asr_set: SampleSet,
                 target_label: int, original_epochs: int, train_cfg: TrainConfig,
                 cfg: DefenseConfig = DefenseConfig()) -> dict:
    """Pruning, fine-tuning and fine-pruning from the same starting model.

    Returns one defense-table row (without the descriptive columns) with
    accuracies and ASRs as fractions.
    """
    ranking = rank_channel_activations(model, clean_set)
    pruned = prune(model, ranking, cfg.tau)
    tuned = fine_tune(model, clean_set, original_epochs, train_cfg, cfg)
    fp = fine_prune(model, ranking, clean_set, original_epochs, train_cfg, cfg,
                    test_set=test_set, asr_set=asr_set, target_label=target_label)
    return {
        "initial_ca": fp.before.clean_acc,
        "initial_asr": fp.before.asr,
        "tau": cfg.tau,
        "pruned_ca": fp.pruned.clean_acc,
        "pruned_asr": fp.pruned.asr,
        "ft_epochs": len(tuned.log),
        "ft_ca": evaluate(tuned.model, test_set),
        "ft_asr": evaluate_asr(tuned.model, asr_set, target_label),
        "fp_ca": fp.tuned.clean_acc,
        "fp_asr": fp.tuned.asr,
        "pruned_channels": pruned.pruned_channels,
    }


def write_defense_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DEFENSE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
