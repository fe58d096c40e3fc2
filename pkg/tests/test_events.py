import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import decode_word
from snnbd.errors import CoordinateOutOfBounds, InvalidGeometry, TruncatedRecord
from snnbd.events import (Event, EventStream, Polarity, SampleSet, accumulate_frames, crop_and_downscale,
                          frame_indices, load_aer_directory, load_frames, parse_aer_nmnist, save_frames,
                          serialize_aer_nmnist, synth_dataset)


def test_parse_single_word():
    stream = parse_aer_nmnist(bytes([0x0A, 0x14, 0x80, 0x00, 0x64]), 34, 34)
    assert list(stream) == [Event(10, 20, Polarity.ON, 100)]
    assert decode_word(bytes([0x0A, 0x14, 0x80, 0x00, 0x64])) == (10, 20, 1, 100)


def test_parse_empty():
    assert len(parse_aer_nmnist(b"", 34, 34)) == 0


def test_parse_truncated():
    with pytest.raises(TruncatedRecord):
        parse_aer_nmnist(bytes(7), 34, 34)


def test_parse_out_of_bounds():
    with pytest.raises(CoordinateOutOfBounds):
        parse_aer_nmnist(bytes([40, 0, 0, 0, 0]), 34, 34)


def test_parse_high_timestamp_and_off():
    word = bytes([0x01, 0x02, 0x7F, 0xFF, 0xFF])
    (ev,) = parse_aer_nmnist(word, 34, 34)
    assert ev == Event(1, 2, Polarity.OFF, (1 << 23) - 1)


words = st.lists(st.tuples(st.integers(0, 33), st.integers(0, 33), st.integers(0, 1), st.integers(0, 2 ** 23 - 1)),
                 max_size=50)


@given(words)
def test_round_trip_bytes(ws):
    raw = b"".join(bytes([x, y, (p << 7) | (t >> 16), (t >> 8) & 0xFF, t & 0xFF]) for x, y, p, t in ws)
    stream = parse_aer_nmnist(raw, 34, 34)
    assert serialize_aer_nmnist(stream) == raw
    for k, (x, y, p, t) in enumerate(ws):
        assert decode_word(raw[5 * k:5 * k + 5]) == (x, y, p, t)
        assert stream[k] == Event(x, y, Polarity(p), t)


def test_single_event_goes_to_frame_zero():
    stream = EventStream.from_events([(3, 5, Polarity.ON, 0)], 8, 8)
    f = accumulate_frames(stream, 4)
    assert f[0, 0, 5, 3] == 1
    assert f.sum() == 1


def test_evenly_spaced_events_one_per_frame():
    events = [(0, 0, Polarity.ON, 1000 * k) for k in range(16)]
    f = accumulate_frames(EventStream.from_events(events, 4, 4), 16)
    assert f.sum(axis=(1, 2, 3)).tolist() == [1.0] * 16


def test_window_boundaries():
    # span 0..100 in 4 windows of 25: t=25 opens window 1, t=100 closes into window 3
    idx = frame_indices(np.array([0, 24, 25, 50, 99, 100]), 4)
    assert idx.tolist() == [0, 0, 1, 2, 3, 3]


def test_empty_stream_gives_zeros():
    f = accumulate_frames(EventStream.empty(5, 6), 3)
    assert f.shape == (3, 2, 6, 5) and not f.any()


streams = st.lists(st.tuples(st.integers(0, 9), st.integers(0, 6), st.integers(0, 1), st.integers(0, 10 ** 6)),
                   max_size=200)


@given(streams, st.integers(1, 20))
def test_accumulate_conserves_count(evs, T):
    evs = sorted(evs, key=lambda e: e[3])
    stream = EventStream.from_events(evs, 10, 7)
    f = accumulate_frames(stream, T)
    assert f.sum() == len(evs)
    assert (f >= 0).all()
    idx = frame_indices(stream.timestamp, T)
    assert ((idx >= 0) & (idx < T)).all()
    on = sum(1 for e in evs if e[2] == 1)
    assert f[:, 0].sum() == on


def test_crop_identity():
    x = np.random.default_rng(0).poisson(1.0, size=(3, 2, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(crop_and_downscale(x, (0, 0, 6, 6), 1), x)


def test_block_sum():
    x = np.ones((1, 1, 4, 4), dtype=np.float32)
    np.testing.assert_array_equal(crop_and_downscale(x, (0, 0, 4, 4), 2), np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("crop,factor", [((0, 0, 5, 4), 2), ((2, 2, 8, 8), 2), ((0, 0, 4, 4), 0)])
def test_crop_invalid(crop, factor):
    with pytest.raises(InvalidGeometry):
        crop_and_downscale(np.zeros((1, 2, 8, 8)), crop, factor)


@given(st.integers(0, 3), st.integers(0, 3), st.sampled_from([1, 2, 4]), st.integers(0, 2 ** 16))
@settings(max_examples=50)
def test_downscale_conserves_crop_count(top, left, factor, seed):
    x = np.random.default_rng(seed).poisson(2.0, size=(2, 2, 12, 12)).astype(np.float32)
    side = 8
    y = crop_and_downscale(x, (top, left, side, side), factor)
    assert y.shape == (2, 2, side // factor, side // factor)
    assert y.sum() == x[:, :, top:top + side, left:left + side].sum()


def test_synth_deterministic_and_balanced():
    a = synth_dataset(10, 100, seed=3)
    b = synth_dataset(10, 100, seed=3)
    assert len(a) == 1000
    assert np.bincount(a.labels).tolist() == [100] * 10
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert (a.frames >= 0).all()
    np.testing.assert_array_equal(a.frames, np.round(a.frames))
    assert not np.array_equal(a.frames, synth_dataset(10, 100, seed=4).frames)


def test_frame_file_round_trip(tmp_path):
    x = np.random.default_rng(1).random((4, 2, 3, 5)).astype(np.float32)
    save_frames(tmp_path / "s.frm", x, label=7, seed=11)
    y, label, seed = load_frames(tmp_path / "s.frm")
    np.testing.assert_array_equal(x, y)
    assert (label, seed) == (7, 11)
    header = (tmp_path / "s.frm").read_bytes().split(b"\n", 1)[0].split()
    assert len(header) == 8


def test_aer_directory(tmp_path):
    for cls in ("0", "1"):
        (tmp_path / cls).mkdir()
        for k in range(2):
            stream = EventStream.from_events([(k, int(cls), Polarity.ON, 0), (1, 1, Polarity.OFF, 500)], 34, 34)
            (tmp_path / cls / f"{k}.bin").write_bytes(serialize_aer_nmnist(stream))
    ds = load_aer_directory(tmp_path, T=2)
    assert isinstance(ds, SampleSet)
    assert ds.labels.tolist() == [0, 0, 1, 1]
    assert ds.frames.shape == (4, 2, 2, 34, 34)
    assert ds.frames.sum() == 8
    small = load_aer_directory(tmp_path, T=2, crop=(0, 0, 32, 32), factor=2)
    assert small.frames.shape == (4, 2, 2, 16, 16)


def test_fixed_time_range():
    idx = frame_indices(np.array([0, 10, 30]), 4, (0, 40))
    assert idx.tolist() == [0, 1, 3]
    with pytest.raises(ValueError):
        frame_indices(np.array([50]), 4, (0, 40))
