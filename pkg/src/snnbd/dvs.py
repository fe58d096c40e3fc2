"""Behavioural DVS pixel simulator.

Each pixel keeps the log intensity at its last event as a reference. A sample
whose log intensity has moved at least ``theta_on`` above (``theta_off``
below) the reference emits an ON (OFF) event and becomes the new reference;
the pixel then ignores input for the refractory period. Reference updates are
instantaneous, so a static pattern fires once at onset and is then invisible,
while a pattern that switches off and on again fires on every reappearance.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from snnbd.errors import InvalidBias, NonPositiveLuminance
from snnbd.events import EventStream, Polarity

# log-intensity units per bias unit, and microseconds per refractory bias unit
THRESHOLD_PER_BIAS = 0.01
REFRACTORY_US_PER_BIAS = 10.0


@dataclass(frozen=True)
class DvsBiases:
    """Device bias settings; defaults are the values used for the real captures."""

    diff: float = 80
    diff_on: float = 130
    diff_off: float = 35
    fo: float = 74
    hpf: float = 0
    refr: float = 68


def bias_to_thresholds(biases: DvsBiases) -> tuple[float, float, float]:
    """Return ``(theta_on, theta_off, refractory_us)`` via a fixed linear map."""
    if not biases.diff_off < biases.diff < biases.diff_on:
        raise InvalidBias(
            f"need diff_off < diff < diff_on, got {biases.diff_off}, {biases.diff}, {biases.diff_on}"
        )
    if biases.refr < 0:
        raise InvalidBias(f"refractory bias must be non-negative, got {biases.refr}")
    theta_on = THRESHOLD_PER_BIAS * (biases.diff_on - biases.diff)
    theta_off = THRESHOLD_PER_BIAS * (biases.diff - biases.diff_off)
    return theta_on, theta_off, REFRACTORY_US_PER_BIAS * biases.refr


@dataclass(frozen=True)
class LuminanceScene:
    frames: np.ndarray  # (N, H, W)
    frame_interval: float  # microseconds

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or len(frames) == 0:
            raise ValueError(f"scene must be a non-empty (N, H, W) array, got shape {frames.shape}")
        if self.frame_interval <= 0:
            raise ValueError(f"frame interval must be positive, got {self.frame_interval}")
        object.__setattr__(self, "frames", frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def duration(self) -> float:
        return len(self.frames) * self.frame_interval


def _log_luminance(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if np.any(~(values > 0)):
        raise NonPositiveLuminance("luminance must be strictly positive everywhere")
    return np.log(values)


def _simulate(log_i: np.ndarray, frame_interval: float, theta_on: float, theta_off: float,
              refractory: float, lowpass: float | None):
    """Vectorised over the trailing axes; returns a list of (k, polarity, flat index) arrays."""
    n = log_i.shape[0]
    flat = log_i.reshape(n, -1)
    signal = flat[0].copy()
    ref = signal.copy()
    last = np.full(flat.shape[1], -np.inf)
    out = []
    for k in range(1, n):
        if lowpass is None:
            signal = flat[k]
        else:
            signal = signal + lowpass * (flat[k] - signal)
        t = k * frame_interval
        ready = (t - last) >= refractory
        on = ready & (signal - ref >= theta_on)
        off = ready & (ref - signal >= theta_off)
        fired = on | off
        if fired.any():
            ref = np.where(fired, signal, ref)
            last = np.where(fired, t, last)
            for mask, pol in ((on, Polarity.ON), (off, Polarity.OFF)):
                idx = np.flatnonzero(mask)
                if idx.size:
                    out.append((k, pol, idx))
    return out


def simulate_pixel(trace, biases: DvsBiases = DvsBiases(), frame_interval: float = 1000.0,
                   lowpass: float | None = None) -> list[tuple[Polarity, float]]:
    """Events ``(polarity, time_us)`` for one pixel's luminance samples.

    Sample ``k`` is taken at ``k * frame_interval``; the first sample sets the
    initial reference. ``lowpass`` is an optional smoothing coefficient in
    (0, 1] applied to log intensity (off by default).
    """
    theta_on, theta_off, refractory = bias_to_thresholds(biases)
    log_i = _log_luminance(trace).reshape(-1, 1)
    events = _simulate(log_i, frame_interval, theta_on, theta_off, refractory, lowpass)
    return [(pol, k * frame_interval) for k, pol, _ in events]


def simulate_scene(scene: LuminanceScene, biases: DvsBiases = DvsBiases(), *, lowpass: float | None = None,
                   noise_rate_hz: float = 0.0, seed: int = 0) -> EventStream:
    """Run every pixel independently and merge into one time-ordered stream.

    Ties in time are ordered by ``(y, x, polarity)``. ``noise_rate_hz`` adds
    seeded Poisson background events per pixel that do not touch the pixel
    state.
    """
    theta_on, theta_off, refractory = bias_to_thresholds(biases)
    log_i = _log_luminance(scene.frames)
    H, W = scene.height, scene.width
    events = _simulate(log_i, scene.frame_interval, theta_on, theta_off, refractory, lowpass)
    ts, ys, xs, ps = [], [], [], []
    for k, pol, idx in events:
        ts.append(np.full(idx.size, k * scene.frame_interval))
        ys.append(idx // W)
        xs.append(idx % W)
        ps.append(np.full(idx.size, int(pol)))
    if noise_rate_hz > 0:
        rng = np.random.default_rng(seed)
        count = rng.poisson(noise_rate_hz * scene.duration * 1e-6, size=H * W)
        idx = np.repeat(np.arange(H * W), count)
        ts.append(np.floor(rng.uniform(0, scene.duration, size=idx.size)))
        ys.append(idx // W)
        xs.append(idx % W)
        ps.append(rng.integers(0, 2, size=idx.size))
    if not ts:
        return EventStream.empty(W, H)
    t, y, x, p = (np.concatenate(a) for a in (ts, ys, xs, ps))
    order = np.lexsort((p, x, y, t))
    return EventStream(x[order], y[order], p[order], np.round(t[order]).astype(np.int64), W, H)


def flash_scene(T: int, H: int, W: int, lit_frames, *, frame_interval: float = 10_000.0,
                background: float = 1.0, bright: float = 10.0, region: np.ndarray | None = None) -> LuminanceScene:
    """Scene of ``T`` frames where ``region`` (default: everything) is bright on ``lit_frames``."""
    frames = np.full((T, H, W), background, dtype=np.float64)
    region = np.ones((H, W), dtype=bool) if region is None else region
    for t in lit_frames:
        frames[t][region] = bright
    return LuminanceScene(frames, frame_interval)


_COMMAND = re.compile(r"^\s*(\w+)\s*(.*?)\s*(?:#.*)?$")


def parse_scene_script(text: str) -> LuminanceScene:
    """Build a scene from a small declarative script.

    Recognised lines (frame ranges are half-open ``[f0, f1)``)::

        size <H> <W>
        frames <N>
        interval <microseconds>
        background <luminance>
        full <f0> <f1> <luminance>
        rect <f0> <f1> <top> <left> <height> <width> <luminance>

    ``#`` starts a comment. Commands apply in order, later ones overwrite.
    """
    size = n = None
    interval, background = 1000.0, 1.0
    painters = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cmd, *args = line.split()
        try:
            if cmd == "size":
                size = (int(args[0]), int(args[1]))
            elif cmd == "frames":
                n = int(args[0])
            elif cmd == "interval":
                interval = float(args[0])
            elif cmd == "background":
                background = float(args[0])
            elif cmd == "full":
                f0, f1, lum = int(args[0]), int(args[1]), float(args[2])
                painters.append((f0, f1, None, lum))
            elif cmd == "rect":
                f0, f1, top, left, h, w = (int(a) for a in args[:6])
                painters.append((f0, f1, (top, left, h, w), float(args[6])))
            else:
                raise ValueError(f"unknown command {cmd!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"scene script line {lineno}: {exc}") from None
    if size is None or n is None:
        raise ValueError("scene script needs 'size' and 'frames' lines")
    frames = np.full((n, *size), background, dtype=np.float64)
    for f0, f1, rect, lum in painters:
        if rect is None:
            frames[f0:f1] = lum
        else:
            top, left, h, w = rect
            frames[f0:f1, top:top + h, left:left + w] = lum
    return LuminanceScene(frames, interval)


def static_onset_window(biases: DvsBiases, frame_interval: float) -> float:
    """Time after onset within which a held static pattern can still emit events."""
    return bias_to_thresholds(biases)[2] + frame_interval


def min_contrast_for(theta: float) -> float:
    """Luminance ratio needed to cross a log threshold ``theta``."""
    return math.exp(theta)
