"""Preprocessing chain: filter design, zero-phase filtering, decimation,
epoching, normalization, and the ELIPR1 container."""

import numpy as np
import pytest

from elip import signal
from elip.ioutil import FormatError
from elip.signal import (FilterSpec, RawBlock, bandpass_gain, decimate,
                         design_bandpass, epoch, filter_zero_phase,
                         load_raw_block, preprocess_block, save_raw_block,
                         znorm_channels)


def _block(samples, fs=1000.0, onsets=(), labels=None):
    onsets = np.asarray(onsets, dtype=np.int64)
    if labels is None:
        labels = np.zeros(len(onsets), dtype=np.int64)
    return RawBlock(np.atleast_2d(samples), fs, onsets, labels)


def test_design_gain_at_dc_and_band_center():
    spec = FilterSpec(fs=1000.0)
    sos = design_bandpass(spec)
    assert bandpass_gain(sos, 1e-9, 1000.0)[0] < 1e-6
    center = np.sqrt(0.1 * 15.0)
    g = bandpass_gain(sos, center, 1000.0)[0]
    assert 0.99 <= g <= 1.0 + 1e-9   # passband peak, up to float roundoff


def test_design_stopband_attenuation_at_50hz():
    sos = design_bandpass(FilterSpec(fs=1000.0))
    g = bandpass_gain(sos, 50.0, 1000.0)[0]
    assert 20.0 * np.log10(g) < -30.0


def test_design_rejects_band_outside_nyquist():
    with pytest.raises(ValueError):
        design_bandpass(FilterSpec(fs=20.0, band=(0.1, 15.0)))
    with pytest.raises(ValueError):
        design_bandpass(FilterSpec(fs=1000.0, band=(15.0, 0.1)))


def test_zero_phase_passband_sine_amplitude_and_lag():
    fs = 1000.0
    secs = 60
    t = np.arange(int(secs * fs)) / fs
    x = np.sin(2 * np.pi * 10.0 * t)
    out = filter_zero_phase(_block(x, fs)).samples[0]
    mid = slice(int(25 * fs), int((secs - 25) * fs))

    def amp(sig):
        # projection onto the 10 Hz quadrature pair ignores the residual
        # low-frequency edge transient
        z = sig[mid] * np.exp(-2j * np.pi * 10.0 * t[mid])
        return 2.0 * np.abs(z.mean())

    ratio = amp(out) / amp(x)
    # independent oracle: forward-backward gain is |H|^2 at 10 Hz
    expected = bandpass_gain(design_bandpass(FilterSpec(fs=fs)), 10.0, fs)[0] ** 2
    assert ratio == pytest.approx(expected, abs=5e-3)
    assert ratio <= 1.0
    # zero lag: cross-correlation peaks at zero shift
    lags = range(-5, 6)
    corr = [np.dot(out[mid], np.roll(x, lag)[mid]) for lag in lags]
    assert lags[int(np.argmax(corr))] == 0


def test_zero_phase_removes_dc():
    fs = 1000.0
    x = np.full(int(10 * fs), 100.0)
    out = filter_zero_phase(_block(x, fs)).samples[0]
    mid = slice(int(fs), int(9 * fs))
    assert np.abs(out[mid]).max() < 0.1


def test_zero_phase_impulse_symmetry():
    # record long enough for the 0.1 Hz corner's transient to decay below
    # the tolerance before the ends truncate it
    fs = 1000.0
    n = int(40 * fs)
    x = np.zeros(n)
    x[n // 2] = 1.0
    out = filter_zero_phase(_block(x, fs)).samples[0]
    w = 400
    left = out[n // 2 - w:n // 2]
    right = out[n // 2 + 1:n // 2 + 1 + w]
    assert np.abs(left[::-1] - right).max() < 1e-8


def test_zero_phase_time_reversal_equivariance():
    # edge initial-condition transients decay at ~0.28/s (the 0.1 Hz
    # corner), so "away from edges" means margins of tens of seconds
    rng = np.random.default_rng(0)
    fs = 1000.0
    secs, margin = 180, 75
    x = rng.normal(size=int(secs * fs))
    fwd = filter_zero_phase(_block(x, fs)).samples[0]
    rev = filter_zero_phase(_block(x[::-1], fs)).samples[0]
    mid = slice(int(margin * fs), int((secs - margin) * fs))
    assert np.abs(fwd[mid] - rev[::-1][mid]).max() < 1e-9


def test_zero_phase_linearity():
    rng = np.random.default_rng(1)
    fs = 1000.0
    x = rng.normal(size=int(4 * fs))
    y = rng.normal(size=int(4 * fs))
    fa = filter_zero_phase(_block(3.0 * x - 2.0 * y, fs)).samples[0]
    fx = filter_zero_phase(_block(x, fs)).samples[0]
    fy = filter_zero_phase(_block(y, fs)).samples[0]
    assert np.abs(fa - (3.0 * fx - 2.0 * fy)).max() < 1e-9


def test_zero_phase_rejects_short_block():
    with pytest.raises(ValueError):
        filter_zero_phase(_block(np.zeros(20), 1000.0))


def test_decimate_lengths_onsets_and_subsampling():
    fs = 1000.0
    t = np.arange(1000) / fs
    x = np.sin(2 * np.pi * 5.0 * t)
    block = _block(x, fs, onsets=[1000 - 4], labels=[1])
    out = decimate(block, 4)
    assert out.samples.shape[1] == 250
    assert out.fs == 250.0
    assert out.onsets[0] == (1000 - 4) // 4
    expected = np.sin(2 * np.pi * 5.0 * np.arange(250) / 250.0)
    assert np.abs(out.samples[0] - expected).max() < 1e-9


def test_decimate_rejects_non_divisible():
    with pytest.raises(ValueError):
        decimate(_block(np.zeros(100), 1000.0), 3)


def test_epoch_window_and_drops():
    fs = 250.0
    data = np.tile(np.arange(2500.0), (3, 1))
    onsets = np.arange(10) * 240        # last onset 2160+250 > 2400? no: fits
    onsets = np.concatenate([onsets[:9], [2400]])   # 2400+250 > 2500: dropped
    block = _block(data, fs, onsets=onsets, labels=np.ones(10, dtype=int))
    with pytest.warns(UserWarning):
        epochs, labels, dropped = epoch(block)
    assert len(epochs) == 9 and dropped == 1
    assert epochs[0].shape == (3, 250)
    np.testing.assert_allclose(epochs[0][0], np.arange(250.0))
    assert labels.tolist() == [1] * 9


def test_znorm_basics_idempotence_and_flat_channel():
    x = np.vstack([np.arange(1.0, 11.0), np.full(10, 7.0)])
    with pytest.warns(UserWarning):
        out = znorm_channels(x)
    assert abs(out[0].mean()) < 1e-10
    assert abs(out[0].var() - 1.0) < 1e-10
    np.testing.assert_array_equal(out[1], np.zeros(10))

    rng = np.random.default_rng(2)
    y = rng.normal(3.0, 2.0, size=(4, 100))
    once = znorm_channels(y)
    twice = znorm_channels(once)
    assert np.abs(twice - once).max() < 1e-10


def test_full_chain_p300_alignment():
    fs = 1000.0
    n = int(20 * fs)
    t = np.arange(n) / fs
    onsets = np.array([5000, 9000, 13000])
    data = np.zeros((2, n))
    for onset in onsets:
        center = onset / fs + 0.300
        data[0] += 5.0 * np.exp(-0.5 * ((t - center) / 0.05) ** 2)
    block = RawBlock(data + 1e-6, fs, onsets, np.ones(3, dtype=np.int64))
    epochs, labels, dropped = preprocess_block(block)
    assert dropped == 0
    for e in epochs:
        assert abs(int(np.argmax(e[0])) - 75) <= 1


def test_preprocess_order_switch():
    rng = np.random.default_rng(3)
    fs = 1000.0
    data = rng.normal(size=(2, int(6 * fs)))
    block = RawBlock(data, fs, np.array([1000]), np.array([1]))
    safe, _, _ = preprocess_block(block, order="safe")
    paper, _, _ = preprocess_block(block, order="paper")
    assert safe[0].shape == paper[0].shape == (2, 250)
    with pytest.raises(ValueError):
        preprocess_block(block, order="wrong")


def test_raw_block_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    data = rng.normal(size=(3, 500)).astype(np.float32)
    block = RawBlock(data, 1000.0, np.array([10, 200]), np.array([1, 0]),
                     ["Fz", "Cz", "Oz"])
    path = tmp_path / "block.elipr"
    save_raw_block(block, str(path))
    back = load_raw_block(str(path))
    np.testing.assert_array_equal(back.samples.astype(np.float32), data)
    assert back.fs == 1000.0
    assert back.onsets.tolist() == [10, 200]
    assert back.labels.tolist() == [1, 0]
    assert back.channel_names == ["Fz", "Cz", "Oz"]


def test_raw_block_magic_error(tmp_path):
    path = tmp_path / "bad.elipr"
    path.write_bytes(b"WRONG1\nend\n")
    with pytest.raises(FormatError):
        load_raw_block(str(path))


def test_onsets_must_increase():
    with pytest.raises(ValueError):
        RawBlock(np.zeros((1, 100)), 250.0, np.array([5, 5]), np.array([0, 1]))
