"""Framed, Strobing and Flashy trigger injection and dataset poisoning.

A trigger is written into ``d`` selected frames spaced ``g + 1`` apart starting
at frame ``i``. With ``g = 0`` this is the contiguous Framed trigger; with
``g > 0`` it is the Strobing trigger, and a Flashy trigger is a Strobing
trigger that covers the whole frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from snnbd.errors import EmptyPool, InvalidSize, OutOfRange
from snnbd.events import SampleSet

LOCATIONS = ("top-left", "top-right", "middle", "bottom-left", "bottom-right", "full")
START_PRESETS = ("start", "middle", "end")


def _round_half_up(x: float) -> int:
    # snap float noise first so 0.15 * 10 counts as 1.5
    return int(math.floor(round(x, 9) + 0.5))


@dataclass(frozen=True)
class TriggerSpec:
    polarity: int = 3
    location: str = "top-left"
    size: float = 10.0
    start: int = 0
    duration: int = 1
    gap: int = 0
    magnitude: float = 1.0

    def __post_init__(self):
        if self.polarity not in (0, 1, 2, 3):
            raise ValueError(f"polarity must be in 0..3, got {self.polarity}")
        if self.location not in LOCATIONS:
            raise ValueError(f"unknown location {self.location!r}; expected one of {LOCATIONS}")
        if not 0 < self.size <= 100:
            raise InvalidSize(f"size must be in (0, 100], got {self.size}")
        if self.start < 0 or self.duration < 1 or self.gap < 0:
            raise OutOfRange(f"need start >= 0, duration >= 1, gap >= 0; got {self.start}, {self.duration}, {self.gap}")

    @property
    def window(self) -> int:
        """Frames spanned from the first to the last poisoned frame."""
        return window_length(self.duration, self.gap)

    def frames(self, T: int) -> list[int]:
        return select_poison_frames(self.start, self.duration, self.gap, T)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PoisonConfig:
    epsilon: float
    target_label: int
    trigger: TriggerSpec

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.target_label < 0:
            raise ValueError(f"target_label must be non-negative, got {self.target_label}")


def window_length(duration: int, gap: int) -> int:
    return duration + (duration - 1) * gap


def start_for_preset(preset: str, duration: int, gap: int, T: int) -> int:
    """Map a start/middle/end placement to a first-frame index."""
    w = window_length(duration, gap)
    if w > T:
        raise OutOfRange(f"trigger window of {w} frames does not fit in T={T}")
    if preset == "start":
        return 0
    if preset == "middle":
        return (T - w) // 2
    if preset == "end":
        return T - w
    raise ValueError(f"unknown start preset {preset!r}; expected one of {START_PRESETS}")


def make_trigger_mask(location: str, size: float, H: int, W: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of a square trigger covering about ``size`` percent."""
    if not 0 < size <= 100:
        raise InvalidSize(f"size must be in (0, 100], got {size}")
    if location not in LOCATIONS:
        raise ValueError(f"unknown location {location!r}")
    mask = np.zeros((H, W), dtype=bool)
    if location == "full" or size == 100:
        mask[:] = True
        return mask
    side = max(1, _round_half_up(math.sqrt(size / 100) * min(H, W)))
    if location == "top-left":
        top, left = 0, 0
    elif location == "top-right":
        top, left = 0, W - side
    elif location == "bottom-left":
        top, left = H - side, 0
    elif location == "bottom-right":
        top, left = H - side, W - side
    else:
        top, left = (H - side) // 2, (W - side) // 2
    mask[top:top + side, left:left + side] = True
    return mask


def select_poison_frames(i: int, d: int, g: int, T: int) -> list[int]:
    if i < 0 or d < 1 or g < 0:
        raise OutOfRange(f"need i >= 0, d >= 1, g >= 0; got i={i}, d={d}, g={g}")
    last = i + (d - 1) * (g + 1)
    if last >= T:
        raise OutOfRange(f"last poisoned frame {last} does not fit in T={T}")
    return list(range(i, last + 1, g + 1))


def apply_trigger(frames: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Return a copy of ``frames`` with the trigger written in.

    ``frames`` is ``(T, 2, H, W)`` or a batch ``(N, T, 2, H, W)``. Masked cells
    of the selected frames are overwritten per polarity code: 1 writes the ON
    channel, 2 the OFF channel, 3 both, and 0 erases both channels.
    """
    T, _, H, W = frames.shape[-4:]
    ts = spec.frames(T)
    mask = make_trigger_mask(spec.location, spec.size, H, W)
    out = np.array(frames, copy=True)
    channels = {0: (0, 1), 1: (0,), 2: (1,), 3: (0, 1)}[spec.polarity]
    value = 0.0 if spec.polarity == 0 else spec.magnitude
    for t in ts:
        for ch in channels:
            out[..., t, ch, mask] = value
    return out


def poison_dataset(dataset: SampleSet, cfg: PoisonConfig, seed: int = 0) -> tuple[SampleSet, np.ndarray]:
    """Dirty-label poisoning of ``round(epsilon * n)`` uniformly chosen samples.

    Returns the mixed training set and the sorted poisoned indices.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot poison an empty dataset")
    if cfg.target_label >= dataset.num_classes:
        raise ValueError(f"target label {cfg.target_label} outside {dataset.num_classes} classes")
    m = _round_half_up(cfg.epsilon * n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    out = dataset.copy()
    if m:
        out.frames[idx] = apply_trigger(dataset.frames[idx], cfg.trigger)
        out.labels[idx] = cfg.target_label
    out.meta["poison_index"] = idx.tolist()
    return out, idx


def build_asr_set(test_set: SampleSet, cfg: PoisonConfig, pool: SampleSet | None = None) -> SampleSet:
    """Fully triggered evaluation set relabelled to the target class.

    Samples originally of the target class are dropped and replaced, in pool
    order, by pool samples of other classes. Without enough replacements the
    set shrinks. ``meta["original_labels"]`` keeps the pre-relabel labels.
    """
    target = cfg.target_label
    keep = np.flatnonzero(test_set.labels != target)
    n_missing = len(test_set) - len(keep)
    frames = [test_set.frames[keep]]
    original = [test_set.labels[keep]]
    if n_missing and pool is not None:
        extra = np.flatnonzero(pool.labels != target)[:n_missing]
        frames.append(pool.frames[extra])
        original.append(pool.labels[extra])
    original = np.concatenate(original)
    if len(original) == 0:
        raise EmptyPool(f"no held-out sample with label other than target {target}")
    triggered = apply_trigger(np.concatenate(frames), cfg.trigger)
    meta = {"original_labels": original.tolist(), "target_label": target,
            "replaced": int(len(original) - len(keep)), "requested": len(test_set)}
    return SampleSet(triggered, np.full(len(original), target), test_set.num_classes, meta)


def write_poison_index(path, indices) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(str(int(k)) for k in indices))
        if len(indices):
            fh.write("\n")


def read_poison_index(path) -> list[int]:
    with open(path) as fh:
        return [int(line) for line in fh if line.strip()]
