"""Seeded synthetic multi-label acoustic event dataset.

Every clip is coloured background noise. Each of three event classes is
inserted independently with probability ``event_prob``:

0. amplitude-modulated harmonic burst (low band),
1. a run of rising chirps (mid band),
2. a train of short high-passed noise impulses (high band).

Onset, duration and SNR are random per event, so all-negative clips and
low-SNR positives both occur. Clip ``k`` draws from its own Philox stream,
which makes the output independent of generation order.
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .features import SAMPLE_RATE, ManifestRecord, _write_dataset, cmvn_fit, lfbe
from .tensor import SeededRng

N_CLASSES = 3


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 600
    clip_seconds: float = 1.0
    event_prob: float = 0.25
    snr_db: tuple = (-12.0, 6.0)
    noise_dbfs: tuple = (-40.0, -20.0)

    @classmethod
    def from_total(cls, total, **kw):
        """70/10/20 train/val/test split of ``total`` clips."""
        n_train = int(round(0.7 * total))
        n_val = int(round(0.1 * total))
        return cls(n_train=n_train, n_val=n_val, n_test=total - n_train - n_val, **kw)

    @property
    def total(self):
        return self.n_train + self.n_val + self.n_test


_HIGHPASS = butter(4, 4500.0, btype="highpass", fs=SAMPLE_RATE, output="sos")


def _rms(x):
    return float(np.sqrt(np.mean(x * x) + 1e-20))


def _background(rng, n, cfg):
    white = rng.normal(0.0, 1.0, n)
    # random spectral tilt between white and brown-ish noise
    tilt = rng.uniform(0.0, 0.95)
    noise = lfilter([1.0], [1.0, -tilt], white)
    level = 10.0 ** (rng.uniform(*cfg.noise_dbfs) / 20.0)
    return noise / _rms(noise) * level


def _span(rng, n, min_s, max_s):
    length = int(rng.uniform(min_s, max_s) * SAMPLE_RATE)
    length = min(length, n)
    onset = int(rng.integers(0, n - length + 1))
    return onset, length


def _harmonic_burst(rng, n):
    onset, length = _span(rng, n, 0.25, 0.7)
    t = np.arange(length) / SAMPLE_RATE
    f0 = rng.uniform(180.0, 420.0)
    sig = np.zeros(length)
    for h in range(1, 6):
        sig += np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
    am_rate = rng.uniform(4.0, 12.0)
    sig *= 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t)
    sig *= np.hanning(length)
    return onset, sig


def _chirps(rng, n):
    onset, length = _span(rng, n, 0.3, 0.8)
    sig = np.zeros(length)
    f_lo = rng.uniform(1200.0, 2000.0)
    f_hi = f_lo + rng.uniform(800.0, 1600.0)
    chirp_len = int(rng.uniform(0.05, 0.1) * SAMPLE_RATE)
    gap = int(rng.uniform(0.03, 0.08) * SAMPLE_RATE)
    t = np.arange(chirp_len) / SAMPLE_RATE
    dur = chirp_len / SAMPLE_RATE
    phase = 2 * np.pi * (f_lo * t + 0.5 * (f_hi - f_lo) / dur * t * t)
    one = np.sin(phase) * np.hanning(chirp_len)
    pos = 0
    while pos + chirp_len <= length:
        sig[pos : pos + chirp_len] += one
        pos += chirp_len + gap
    return onset, sig


def _impulses(rng, n):
    onset, length = _span(rng, n, 0.25, 0.6)
    sig = np.zeros(length)
    rate = rng.uniform(8.0, 20.0)
    period = int(SAMPLE_RATE / rate)
    click_len = int(0.004 * SAMPLE_RATE)
    decay = np.exp(-np.arange(click_len) / (0.0012 * SAMPLE_RATE))
    pos = int(rng.integers(0, max(period, 1)))
    while pos + click_len <= length:
        sig[pos : pos + click_len] += rng.normal(0.0, 1.0, click_len) * decay
        pos += period
    return onset, sosfilt(_HIGHPASS, sig)


_EVENTS = (_harmonic_burst, _chirps, _impulses)


def synth_clip(rng, cfg, labels):
    """int16 samples of one clip containing the events flagged in ``labels``."""
    n = int(round(cfg.clip_seconds * SAMPLE_RATE))
    x = _background(rng, n, cfg)
    noise_rms = _rms(x)
    for c, present in enumerate(labels):
        if not present:
            continue
        onset, sig = _EVENTS[c](rng, n)
        snr = rng.uniform(*cfg.snr_db)
        # SNR of the event over its own support against the whole-clip noise level
        sig = sig / _rms(sig) * noise_rms * 10.0 ** (snr / 20.0)
        x[onset : onset + sig.shape[0]] += sig
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return np.round(x * 32767.0).astype(np.int16)


def synth_labels(rng, cfg):
    return tuple(int(v) for v in (rng.random(N_CLASSES) < cfg.event_prob))


def synth_dataset(seed, out_dir, cfg=None):
    """Generate clips, features and a manifest under ``out_dir``; returns the manifest path."""
    cfg = cfg or SynthConfig()
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test
    counters = {s: 0 for s in ("train", "val", "test")}
    records = []
    raw = {}
    for k, split in enumerate(splits):
        rng = SeededRng(seed, stream=1_000 + k).generator
        labels = synth_labels(rng, cfg)
        clip_id = f"{split}-{counters[split]:05d}"
        counters[split] += 1
        raw[clip_id] = lfbe(synth_clip(rng, cfg, labels))
        records.append(ManifestRecord(clip_id, "", labels, split))
    stats = cmvn_fit(raw[r.clip_id] for r in records if r.split == "train")
    return _write_dataset(out_dir, records, raw, stats)
