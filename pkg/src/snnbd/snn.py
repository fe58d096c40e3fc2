"""Spiking conv nets with LIF neurons and surrogate-gradient training.

Tensors inside the network are time-major, ``(T, B, ...)``. Stateless layers
(conv, batch norm, pooling, linear) run on all steps at once by folding time
into the batch; only the LIF layers iterate over time.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from snnbd import _lif_kernels
from snnbd.errors import EmptyDataset, ShapeMismatch
from snnbd.events import SampleSet

log = logging.getLogger(__name__)

VOTE_GROUP = 10
ARCHITECTURES = {"nmnist": 2, "cifar10dvs": 4, "gesture": 5}


@dataclass(frozen=True)
class LifParams:
    lam: float = 0.5
    u_th: float = 1.0
    u0: float = 0.0
    alpha: float = 2.0

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError(f"leak factor must be in (0, 1], got {self.lam}")
        if not self.u_th > self.u0:
            raise ValueError(f"threshold {self.u_th} must exceed resting potential {self.u0}")


def surrogate_derivative(v, alpha: float = 2.0):
    """Arctangent surrogate ``alpha / (2 (1 + (pi alpha v / 2)^2))``."""
    return alpha / (2 * (1 + (math.pi * alpha * v / 2) ** 2))


def smooth_spike(v, alpha: float = 2.0):
    """The smooth step whose derivative is :func:`surrogate_derivative`."""
    return torch.atan(math.pi * alpha * v / 2) / math.pi + 0.5


class ArctanSpike(torch.autograd.Function):
    """Heaviside forward (or its smooth stand-in), arctan surrogate backward."""

    @staticmethod
    def forward(ctx, v, alpha, smooth):
        ctx.save_for_backward(v)
        ctx.alpha = alpha
        if smooth:
            return smooth_spike(v, alpha)
        return (v >= 0).to(v.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (v,) = ctx.saved_tensors
        return grad_output * surrogate_derivative(v, ctx.alpha), None, None


def spike_fn(v, alpha: float = 2.0, smooth: bool = False):
    return ArctanSpike.apply(v, alpha, smooth)


def lif_step(u, input_current, params: LifParams = LifParams(), smooth: bool = False):
    """One LIF update with same-step reset.

    ``h = lam * u + input``; spike where ``h >= u_th``; the membrane after the
    step is ``(1 - s) * h + s * u0``.
    """
    h = params.lam * u + input_current
    if torch.is_tensor(h):
        s = spike_fn(h - params.u_th, params.alpha, smooth)
    else:
        s = np.asarray(h >= params.u_th, dtype=float)
    u_next = (1 - s) * h + s * params.u0
    return u_next, s


class LifSequence(torch.autograd.Function):
    """All T steps of a LIF layer with a hand-written BPTT backward.

    Matches unrolling :func:`lif_step` under autograd, reset path included:
    with ``g = sigma'(h - u_th)``,
    ``dL/dh_t = dL/ds_t * g + dL/du_t * ((1 - s_t) - (h_t - u0) * g)`` and
    ``dL/du_{t-1} = lam * dL/dh_t``.
    """

    @staticmethod
    def forward(ctx, x, lam, u_th, u0, alpha, smooth):
        # work in memory order so channels-last inputs need no copy
        order = _memory_order(x)
        xp = x.detach().permute(order).contiguous()
        x2 = xp.view(xp.shape[0], -1).numpy()
        h, s = np.empty_like(x2), np.empty_like(x2)
        _lif_kernels.lif_forward(x2, lam, u_th, u0, alpha, smooth, h, s)
        h_all, s_all = torch.from_numpy(h), torch.from_numpy(s)
        ctx.save_for_backward(h_all, s_all)
        ctx.consts = (lam, u_th, u0, alpha)
        ctx.order = order
        ctx.physical_shape = xp.shape
        return _restore(s_all, xp.shape, order)

    @staticmethod
    def backward(ctx, grad_s):
        h_all, s_all = ctx.saved_tensors
        lam, u_th, u0, alpha = ctx.consts
        gs = grad_s.permute(ctx.order).contiguous().view(h_all.shape).numpy()
        gx = np.empty_like(gs)
        _lif_kernels.lif_backward(h_all.numpy(), s_all.numpy(), gs, lam, u_th, u0, alpha, gx)
        return _restore(torch.from_numpy(gx), ctx.physical_shape, ctx.order), None, None, None, None, None


def _memory_order(x) -> list[int]:
    """Dimension permutation (time first) that makes ``x`` contiguous, if any."""
    rest = sorted(range(1, x.dim()), key=lambda d: (-x.stride(d), d))
    return [0] + rest


def _restore(flat, physical_shape, order):
    inverse = [order.index(d) for d in range(len(order))]
    return flat.view(physical_shape).permute(inverse)


class LIF(nn.Module):
    """Multi-step LIF layer over ``(T, ...)`` input; state starts at ``u0`` on every call."""

    def __init__(self, params: LifParams = LifParams(), smooth: bool = False):
        super().__init__()
        self.params = params
        self.smooth = smooth
        self.record = False
        self.last_spikes = None

    def forward(self, x):
        p = self.params
        spikes = LifSequence.apply(x, p.lam, p.u_th, p.u0, p.alpha, self.smooth)
        if self.record:
            self.last_spikes = spikes.detach()
        return spikes


def lif_unrolled(x, params: LifParams = LifParams(), smooth: bool = False):
    """Reference multi-step LIF built from :func:`lif_step` under plain autograd."""
    u = torch.full_like(x[0], params.u0)
    out = []
    for x_t in x.unbind(0):
        u, s = lif_step(u, x_t, params, smooth)
        out.append(s)
    return torch.stack(out)


class SeqFold(nn.Module):
    """Apply a stateless module to ``(T, B, ...)`` by folding T into the batch."""

    def __init__(self, module: nn.Module):
        super().__init__()
        self.module = module

    def forward(self, x):
        T, B = x.shape[:2]
        y = self.module(x.flatten(0, 1))
        return y.view(T, B, *y.shape[1:])


class SeqDropout(nn.Module):
    """Dropout with one mask per sample shared across all time steps."""

    def __init__(self, p: float = 0.5):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        keep = torch.empty_like(x[0]).bernoulli_(1 - self.p) / (1 - self.p)
        return x * keep


class ChannelMask(nn.Module):
    """Per-channel multiplicative mask; pruned channels carry 0."""

    def __init__(self, channels: int):
        super().__init__()
        self.register_buffer("mask", torch.ones(channels))

    def forward(self, x):
        if bool(self.mask.all()):
            return x
        return x * self.mask.view(1, -1, *([1] * (x.dim() - 2)))


class MaxPool2x2(torch.autograd.Function):
    """2x2 max pooling over the last two axes; ties go to the first element like ``nn.MaxPool2d``."""

    @staticmethod
    def forward(ctx, x):
        *lead, H, W = x.shape
        x3 = x.detach().contiguous().view(-1, H, W)
        out = np.empty((x3.shape[0], H // 2, W // 2), dtype=x3.numpy().dtype)
        arg = np.empty(out.shape, dtype=np.int8)
        _lif_kernels.maxpool2_forward(x3.numpy(), out, arg)
        ctx.arg = arg
        ctx.in_shape = (H, W)
        return torch.from_numpy(out).view(*lead, H // 2, W // 2)

    @staticmethod
    def backward(ctx, grad_out):
        H, W = ctx.in_shape
        g = grad_out.contiguous().view(-1, H // 2, W // 2).numpy()
        alloc = np.empty if H % 2 == 0 and W % 2 == 0 else np.zeros
        grad_in = alloc((g.shape[0], H, W), dtype=g.dtype)
        _lif_kernels.maxpool2_backward(g, ctx.arg, grad_in)
        return torch.from_numpy(grad_in).view(*grad_out.shape[:-2], H, W)


class SpikePool(nn.Module):
    def forward(self, x):
        return MaxPool2x2.apply(x)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, params: LifParams, smooth: bool = False):
        super().__init__()
        self.stateless = SeqFold(nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            ChannelMask(cout),
        ))
        self.lif = LIF(params, smooth)
        self.pool = SpikePool()

    @property
    def conv(self) -> nn.Conv2d:
        return self.stateless.module[0]

    @property
    def bn(self) -> nn.BatchNorm2d:
        return self.stateless.module[1]

    @property
    def mask(self) -> ChannelMask:
        return self.stateless.module[2]

    def forward(self, x):
        return self.pool(self.lif(self.stateless(x)))


class Voting(nn.Module):
    """Average consecutive groups of ``VOTE_GROUP`` features into class scores."""

    def __init__(self, num_classes: int, group: int = VOTE_GROUP):
        super().__init__()
        self.num_classes = num_classes
        self.group = group

    def forward(self, x):
        if x.shape[-1] != self.num_classes * self.group:
            raise ShapeMismatch(f"voting expects {self.num_classes * self.group} features, got {x.shape[-1]}")
        return x.view(*x.shape[:-1], self.num_classes, self.group).mean(-1)


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "nmnist"
    num_classes: int = 10
    in_channels: int = 2
    input_size: int = 32
    width: int = 32
    hidden: int | None = None
    T: int = 16
    dropout: float = 0.5
    lif: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {sorted(ARCHITECTURES)}")
        blocks = ARCHITECTURES[self.arch]
        if self.input_size % (2 ** blocks):
            raise ShapeMismatch(f"input size {self.input_size} not divisible by 2^{blocks}")

    @property
    def hidden_features(self) -> int:
        if self.hidden is not None:
            return self.hidden
        # full-width defaults: nmnist 2048, others 512 (at 128 channels)
        base = 2048 if self.arch == "nmnist" else 512
        return max(VOTE_GROUP, base * self.width // 128)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lif"] = asdict(self.lif)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["lif"] = LifParams(**d.get("lif", {}))
        return cls(**d)


class SpikingConvNet(nn.Module):
    """Conv-SNN in the N-MNIST (2 blocks), CIFAR10-DVS (4) or Gesture (5) layout."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), smooth: bool = False):
        super().__init__()
        self.cfg = cfg
        nblocks = ARCHITECTURES[cfg.arch]
        blocks, cin = [], cfg.in_channels
        for _ in range(nblocks):
            blocks.append(ConvBlock(cin, cfg.width, cfg.lif, smooth))
            cin = cfg.width
        self.blocks = nn.ModuleList(blocks)
        side = cfg.input_size // 2 ** nblocks
        flat = cfg.width * side * side
        hidden = cfg.hidden_features
        out = cfg.num_classes * VOTE_GROUP
        head = [SeqFold(nn.Flatten()), SeqDropout(cfg.dropout), SeqFold(nn.Linear(flat, hidden, bias=False)),
                LIF(cfg.lif, smooth)]
        if cfg.arch != "cifar10dvs":
            head.append(SeqDropout(cfg.dropout))
        head += [SeqFold(nn.Linear(hidden, out, bias=False)), LIF(cfg.lif, smooth), Voting(cfg.num_classes)]
        self.head = nn.Sequential(*head)

    @property
    def last_block(self) -> ConvBlock:
        return self.blocks[-1]

    def check_input(self, x):
        c = self.cfg
        expected = (c.T, c.in_channels, c.input_size, c.input_size)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatch(f"expected input (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def forward(self, x):
        """``x`` is ``(B, T, C, H, W)``; returns time-averaged class scores ``(B, classes)``."""
        self.check_input(x)
        h = x.transpose(0, 1)
        for block in self.blocks:
            h = block(h)
        return self.head(h).mean(0)


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, smooth: bool = False) -> SpikingConvNet:
    torch.manual_seed(seed)
    return SpikingConvNet(cfg, smooth)


def _as_tensor(frames) -> torch.Tensor:
    return torch.as_tensor(np.asarray(frames, dtype=np.float32))


def forward(model: nn.Module, frames) -> np.ndarray:
    """Inference-mode scores for one ``(T, C, H, W)`` sample or a batch."""
    x = _as_tensor(frames)
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        scores = model(x)
    model.train(was_training)
    scores = scores.numpy()
    return scores[0] if single else scores


def predict(model: nn.Module, dataset: SampleSet, batch_size: int = 64) -> np.ndarray:
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    preds = [forward(model, dataset.frames[k:k + batch_size]).argmax(-1) for k in range(0, len(dataset), batch_size)]
    return np.concatenate(preds)


def evaluate(model: nn.Module, dataset: SampleSet, batch_size: int = 64) -> float:
    """Fraction of samples whose argmax score matches the label."""
    return float(np.mean(predict(model, dataset, batch_size) == dataset.labels))


def evaluate_asr(model: nn.Module, asr_set: SampleSet, target_label: int | None = None, batch_size: int = 64) -> float:
    """Fraction of triggered samples classified as the target label."""
    if target_label is None:
        target_label = int(asr_set.meta.get("target_label", asr_set.labels[0] if len(asr_set) else 0))
    return float(np.mean(predict(model, asr_set, batch_size) == target_label))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class TrainResult:
    model: SpikingConvNet
    log: list[dict]
    first_epoch_batch_losses: list[float]


def train(model: SpikingConvNet, dataset: SampleSet, cfg: TrainConfig = TrainConfig(),
          eval_set: SampleSet | None = None) -> TrainResult:
    """Adam on cross-entropy of time-averaged scores over the (possibly mixed) set.

    Trains ``model`` in place. The log has one row per epoch with mean loss,
    training accuracy and, when ``eval_set`` is given, clean accuracy.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if dataset.labels.max() >= model.cfg.num_classes:
        raise ValueError("dataset labels exceed the model's class count")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    x_all = _as_tensor(dataset.frames)
    y_all = torch.as_tensor(dataset.labels)
    rows, first_losses = [], []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.as_tensor(rng.permutation(len(dataset)))
        total, correct, loss_sum = 0, 0, 0.0
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            scores = model(x)
            loss = loss_fn(scores, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if epoch == 1:
                first_losses.append(loss.item())
            loss_sum += loss.item() * len(idx)
            correct += int((scores.argmax(-1) == y).sum())
            total += len(idx)
        row = {"epoch": epoch, "loss": loss_sum / total, "train_acc": correct / total}
        if eval_set is not None:
            row["clean_acc"] = evaluate(model, eval_set)
        log.info("epoch %d: %s", epoch, row)
        rows.append(row)
    model.eval()
    return TrainResult(model, rows, first_losses)


def write_train_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "clean_acc"], extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({"clean_acc": "", **r})


CHECKPOINT_MAGIC = b"SNNBDCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: SpikingConvNet) -> None:
    """Header (magic, version, JSON index) followed by little-endian float32 tensors."""
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": str(tensor.dtype)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"model": model.cfg.to_dict(), "tensors": index}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> SpikingConvNet:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    model = SpikingConvNet(ModelConfig.from_dict(header["model"]))
    state = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
        dtype = getattr(torch, entry["dtype"].removeprefix("torch."))
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model
