"""Event streams, N-MNIST style AER parsing and frame accumulation.

Frames are plain ``float32`` arrays of shape ``(T, 2, H, W)``; channel 0 holds
ON counts and channel 1 holds OFF counts. Datasets are stored as a
:class:`SampleSet`, which keeps all frames in one contiguous array so that
poisoning and training can work on batches without copying.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from snnbd.errors import CoordinateOutOfBounds, InvalidGeometry, TruncatedRecord

RECORD_BYTES = 5
TIMESTAMP_BITS = 23
TIMESTAMP_MASK = (1 << TIMESTAMP_BITS) - 1

FRAME_MAGIC = "SNNBDFRM"
FRAME_VERSION = 1


class Polarity(enum.IntEnum):
    OFF = 0
    ON = 1


class Event(NamedTuple):
    x: int
    y: int
    polarity: Polarity
    timestamp: int  # microseconds


@dataclass(frozen=True)
class EventStream:
    """Columnar event storage; arrays are read-only after construction."""

    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    timestamp: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        cols = {}
        for name, dtype in (("x", np.int64), ("y", np.int64), ("polarity", np.int8), ("timestamp", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            arr.setflags(write=False)
            cols[name] = arr
            object.__setattr__(self, name, arr)
        n = {len(a) for a in cols.values()}
        if len(n) > 1:
            raise ValueError("event columns differ in length")
        if self.width <= 0 or self.height <= 0:
            raise InvalidGeometry(f"sensor size must be positive, got {self.width}x{self.height}")
        bad = (cols["x"] < 0) | (cols["x"] >= self.width) | (cols["y"] < 0) | (cols["y"] >= self.height)
        if bad.any():
            k = int(np.argmax(bad))
            raise CoordinateOutOfBounds(
                f"event {k} at ({cols['x'][k]}, {cols['y'][k]}) outside {self.width}x{self.height}"
            )

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), width, height)

    @classmethod
    def from_events(cls, events, width: int, height: int) -> "EventStream":
        events = list(events)
        if not events:
            return cls.empty(width, height)
        x, y, p, t = zip(*events)
        return cls(np.array(x), np.array(y), np.array([int(v) for v in p]), np.array(t), width, height)

    def __len__(self) -> int:
        return len(self.timestamp)

    def __iter__(self) -> Iterator[Event]:
        for x, y, p, t in zip(self.x, self.y, self.polarity, self.timestamp):
            yield Event(int(x), int(y), Polarity(int(p)), int(t))

    def __getitem__(self, k: int) -> Event:
        return Event(int(self.x[k]), int(self.y[k]), Polarity(int(self.polarity[k])), int(self.timestamp[k]))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamp) >= 0))


def parse_aer_nmnist(data: bytes, width: int, height: int) -> EventStream:
    """Decode 5-byte N-MNIST event words.

    Byte 0 is x, byte 1 is y, the top bit of byte 2 is the polarity (1 = ON)
    and the remaining 23 bits (big-endian) are the timestamp in microseconds.
    """
    if width <= 0 or height <= 0:
        raise InvalidGeometry(f"sensor size must be positive, got {width}x{height}")
    if len(data) % RECORD_BYTES:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of {RECORD_BYTES}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES).astype(np.int64)
    x = raw[:, 0]
    y = raw[:, 1]
    polarity = raw[:, 2] >> 7
    timestamp = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    return EventStream(x, y, polarity, timestamp, width, height)


def serialize_aer_nmnist(stream: EventStream) -> bytes:
    """Inverse of :func:`parse_aer_nmnist`."""
    if len(stream) and (stream.x.max() > 255 or stream.y.max() > 255):
        raise CoordinateOutOfBounds("AER addresses are limited to 8 bits")
    if len(stream) and (stream.timestamp.min() < 0 or stream.timestamp.max() > TIMESTAMP_MASK):
        raise OverflowError("timestamp does not fit in 23 bits")
    out = np.empty((len(stream), RECORD_BYTES), dtype=np.uint8)
    t = stream.timestamp
    out[:, 0] = stream.x
    out[:, 1] = stream.y
    out[:, 2] = (stream.polarity.astype(np.int64) << 7) | ((t >> 16) & 0x7F)
    out[:, 3] = (t >> 8) & 0xFF
    out[:, 4] = t & 0xFF
    return out.tobytes()


def frame_indices(timestamps: np.ndarray, T: int, t_range: tuple[int, int] | None = None) -> np.ndarray:
    """Equal-duration bin index in ``[0, T)`` for each timestamp.

    Bins cover the stream's own span unless ``t_range = (start, end)`` fixes
    them. Events on an interior boundary go to the later window and the final
    timestamp goes to the last window. A zero-length span puts everything in
    frame 0.
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if timestamps.size == 0:
        return np.zeros(0, dtype=np.int64)
    if t_range is None:
        t0, span = timestamps.min(), int(timestamps.max() - timestamps.min())
    else:
        t0, span = int(t_range[0]), int(t_range[1] - t_range[0])
        if span < 0 or timestamps.min() < t0 or timestamps.max() > t_range[1]:
            raise ValueError(f"timestamps fall outside t_range {t_range}")
    if span == 0:
        return np.zeros(timestamps.shape, dtype=np.int64)
    # integer arithmetic keeps boundary placement exact
    idx = (timestamps - t0) * T // span
    return np.minimum(idx, T - 1)


def accumulate_frames(stream: EventStream, T: int, t_range: tuple[int, int] | None = None) -> np.ndarray:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    frames = np.zeros((T, 2, stream.height, stream.width), dtype=np.float32)
    if len(stream) == 0:
        return frames
    t_idx = frame_indices(stream.timestamp, T, t_range)
    channel = np.where(stream.polarity == Polarity.ON, 0, 1)
    np.add.at(frames, (t_idx, channel, stream.y, stream.x), 1.0)
    return frames


def crop_and_downscale(frames: np.ndarray, crop: tuple[int, int, int, int], factor: int) -> np.ndarray:
    """Crop ``(top, left, height, width)`` then sum-pool ``factor x factor`` blocks."""
    top, left, h, w = crop
    T, C, H, W = frames.shape
    if factor < 1:
        raise InvalidGeometry(f"factor must be >= 1, got {factor}")
    if top < 0 or left < 0 or h <= 0 or w <= 0 or top + h > H or left + w > W:
        raise InvalidGeometry(f"crop {crop} outside {H}x{W} frame")
    if h % factor or w % factor:
        raise InvalidGeometry(f"crop {h}x{w} not divisible by factor {factor}")
    region = frames[:, :, top:top + h, left:left + w]
    pooled = region.reshape(T, C, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    return pooled.astype(frames.dtype, copy=False)


class Sample(NamedTuple):
    frames: np.ndarray
    label: int


@dataclass
class SampleSet:
    """A labelled collection of frame tensors stacked as ``(N, T, 2, H, W)``."""

    frames: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 5:
            raise InvalidGeometry(f"expected (N, T, 2, H, W) frames, got shape {self.frames.shape}")
        if len(self.frames) != len(self.labels):
            raise ValueError("frames and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    @classmethod
    def from_samples(cls, samples, num_classes: int) -> "SampleSet":
        samples = list(samples)
        frames = np.stack([s.frames for s in samples])
        return cls(frames, np.array([s.label for s in samples]), num_classes)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, k: int) -> Sample:
        return Sample(self.frames[k], int(self.labels[k]))

    def __iter__(self) -> Iterator[Sample]:
        for k in range(len(self)):
            yield self[k]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape[1:])

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=np.int64)
        return SampleSet(self.frames[indices], self.labels[indices], self.num_classes, dict(self.meta))

    def copy(self) -> "SampleSet":
        return SampleSet(self.frames.copy(), self.labels.copy(), self.num_classes, dict(self.meta))


def synth_dataset(
    num_classes: int = 10,
    samples_per_class: int = 100,
    T: int = 16,
    H: int = 32,
    W: int = 32,
    seed: int = 0,
    *,
    peak_rate: float = 2.0,
    blob_sigma: float = 2.0,
    noise_rate: float = 0.02,
) -> SampleSet:
    """Desk-scale stand-in for N-MNIST / DVS128-Gesture.

    Every class is a Gaussian blob of events travelling along its own
    direction (evenly spaced angles) across the sensor. ON events sit on the
    blob's current position and OFF events on its previous one, so opposite
    directions share a path but differ in temporal order and polarity layout.
    Per-sample jitter of start point and speed plus sparse background noise
    keep samples distinct. Counts are Poisson draws, hence integers.
    """
    for name, v in (("num_classes", num_classes), ("samples_per_class", samples_per_class),
                    ("T", T), ("H", H), ("W", W)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)

    angle = 2 * np.pi * labels / num_classes
    direction = np.stack([np.sin(angle), np.cos(angle)], axis=1)  # (dy, dx)
    span = 0.55 * min(H, W) * rng.uniform(0.85, 1.15, size=n)
    centre = np.array([(H - 1) / 2, (W - 1) / 2]) + rng.normal(0, 1.0, size=(n, 2))
    start = centre - direction * (span / 2)[:, None]
    step = direction * (span / max(T - 1, 1))[:, None]

    ys = np.arange(H)[None, :, None]
    xs = np.arange(W)[None, None, :]
    frames = np.empty((n, T, 2, H, W), dtype=np.float32)
    for t in range(T):
        pos = start + step * t
        prev = pos - step
        for ch, p in ((0, pos), (1, prev)):
            d2 = (ys - p[:, 0, None, None]) ** 2 + (xs - p[:, 1, None, None]) ** 2
            rate = peak_rate * np.exp(-d2 / (2 * blob_sigma ** 2)) + noise_rate
            frames[:, t, ch] = rng.poisson(rate)
    return SampleSet(frames, labels, num_classes, {"source": "synthetic", "seed": seed})


def save_frames(path: str | os.PathLike, frames: np.ndarray, label: int = -1, seed: int = -1) -> None:
    """Write a frame tensor with a one-line text header followed by LE float32 data."""
    T, C, H, W = frames.shape
    header = f"{FRAME_MAGIC} {FRAME_VERSION} {T} {C} {H} {W} {label} {seed}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_frames(path: str | os.PathLike) -> tuple[np.ndarray, int, int]:
    """Read a file written by :func:`save_frames`; returns ``(frames, label, seed)``."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if len(header) != 8 or header[0] != FRAME_MAGIC:
        raise ValueError(f"{path}: not a frame tensor file")
    if int(header[1]) != FRAME_VERSION:
        raise ValueError(f"{path}: unsupported frame file version {header[1]}")
    T, C, H, W, label, seed = (int(v) for v in header[2:])
    frames = np.frombuffer(payload, dtype="<f4")
    if frames.size != T * C * H * W:
        raise TruncatedRecord(f"{path}: expected {T * C * H * W} floats, found {frames.size}")
    return frames.reshape(T, C, H, W).astype(np.float32), label, seed


def load_aer_directory(
    root: str | os.PathLike,
    T: int,
    width: int = 34,
    height: int = 34,
    *,
    crop: tuple[int, int, int, int] | None = None,
    factor: int = 1,
) -> SampleSet:
    """Load ``root/<class>/<sample>.bin`` AER recordings into frames.

    Class directories are sorted by name and numbered from 0.
    """
    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    frames, labels = [], []
    for label, cdir in enumerate(classes):
        for f in sorted(cdir.glob("*.bin")):
            stream = parse_aer_nmnist(f.read_bytes(), width, height)
            x = accumulate_frames(stream, T)
            if crop is not None or factor != 1:
                x = crop_and_downscale(x, crop or (0, 0, height, width), factor)
            frames.append(x)
            labels.append(label)
    meta = {"source": str(root), "classes": [c.name for c in classes]}
    return SampleSet(np.stack(frames), np.array(labels), len(classes), meta)
