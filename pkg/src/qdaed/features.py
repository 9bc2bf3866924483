"""Log mel filterbank energies, global CMVN, feature/manifest files, WAV input.

Frames are 25 ms (400 samples) with a 10 ms (160 sample) hop at 16 kHz and
no padding, so a clip of ``N`` samples gives ``floor((N - 400) / 160) + 1``
frames. Each frame is windowed with a periodic Hann window, zero-padded to a
512-point FFT, and its power spectrum is projected onto 64 triangular HTK-mel
filters spanning 0-8000 Hz. Energies are floored at 1e-10 before the natural log.
"""

import functools
import os
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError, FormatError, TruncationError

SAMPLE_RATE = 16_000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 64
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
CMVN_STD_FLOOR = 1e-5

FEATURE_MAGIC = b"QDAE"
FEATURE_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class AudioClip:
    samples: np.ndarray  # int16 mono
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise FormatError("audio must be mono")

    @property
    def duration(self):
        return self.samples.shape[0] / self.sample_rate


def frame_count(num_samples):
    if num_samples < WIN_LENGTH:
        raise ArgumentError(f"clip has {num_samples} samples, need at least {WIN_LENGTH}")
    return (num_samples - WIN_LENGTH) // HOP_LENGTH + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers():
    """Center frequencies (Hz) of the 64 filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=None)
def _filterbank():
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    freqs = np.arange(N_FFT // 2 + 1) * (SAMPLE_RATE / N_FFT)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # normalise so each triangle peaks at exactly 1 on its highest bin
    fb /= fb.max(axis=1, keepdims=True)
    fb.setflags(write=False)
    return fb


def mel_filterbank():
    """``(64, 257)`` filter weights over rFFT bins."""
    return _filterbank()


@functools.lru_cache(maxsize=None)
def _window():
    n = np.arange(WIN_LENGTH)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)
    w.setflags(write=False)
    return w


def lfbe(clip):
    """``(frames, 64)`` float32 log mel energies for an :class:`AudioClip` or sample array."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    n_frames = frame_count(samples.shape[0])
    if samples.dtype == np.int16:
        x = samples.astype(np.float64) / 32768.0
    else:
        x = samples.astype(np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n_frames]
    spec = np.fft.rfft(frames * _window(), n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


# --------------------------------------------------------------------------
# CMVN


@dataclass
class CmvnStats:
    mean: np.ndarray
    std: np.ndarray

    def to_matrix(self):
        return np.stack([self.mean, self.std]).astype(np.float32)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float32)
        if m.shape != (2, m.shape[1]):
            raise FormatError(f"CMVN matrix must have 2 rows, got {m.shape}")
        return cls(m[0].copy(), m[1].copy())


def cmvn_fit(matrices):
    matrices = list(matrices)
    if not matrices:
        raise ArgumentError("CMVN needs at least one training matrix")
    pooled = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=0)
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), CMVN_STD_FLOOR)
    return CmvnStats(mean.astype(np.float32), std.astype(np.float32))


def cmvn_apply(matrix, stats):
    m = np.asarray(matrix, dtype=np.float64)
    return ((m - stats.mean.astype(np.float64)) / stats.std.astype(np.float64)).astype(np.float32)


# --------------------------------------------------------------------------
# feature files


def features_to_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = FEATURE_MAGIC + struct.pack("<HBB", FEATURE_VERSION, 0, arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.tobytes()


def features_from_bytes(data):
    if len(data) < 8 or data[:4] != FEATURE_MAGIC:
        raise FormatError("not a feature file (bad magic)")
    version, dtype_code, rank = struct.unpack_from("<HBB", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    if dtype_code != 0:
        raise FormatError(f"unsupported feature dtype code {dtype_code}")
    if len(data) < 8 + 8 * rank:
        raise TruncationError("feature file header truncated")
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    start = 8 + 8 * rank
    if len(data) != start + 4 * n:
        raise TruncationError(f"feature payload has {len(data) - start} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4", offset=start).astype(np.float32).reshape(dims)


def write_features(path, arr):
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(arr))


def read_features(path):
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())


# --------------------------------------------------------------------------
# WAV


def read_wav(path):
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed WAV is not supported")
            if wf.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            if wf.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getframerate() != SAMPLE_RATE:
                raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    return AudioClip(np.frombuffer(raw, dtype="<i2").astype(np.int16))


def write_wav(path, clip):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(np.asarray(clip.samples, dtype="<i2").tobytes())


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    path: str  # relative to the manifest directory
    labels: tuple
    split: str


@dataclass
class Manifest:
    records: list
    root: str = "."

    @property
    def classes(self):
        return len(self.records[0].labels) if self.records else 0

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def resolve(self, record):
        return os.path.join(self.root, record.path)

    def load_split(self, name):
        """``(ids, X, Y)`` with ``X`` of shape ``(N, T, 64)`` and ``Y`` multi-hot ``(N, C)``."""
        recs = self.split(name)
        if not recs:
            raise DataError(f"split {name!r} is empty")
        mats = [read_features(self.resolve(r)) for r in recs]
        lengths = {m.shape for m in mats}
        if len(lengths) != 1:
            raise DataError(f"split {name!r} mixes feature shapes {sorted(lengths)}")
        X = np.stack(mats)
        Y = np.array([r.labels for r in recs], dtype=np.float32)
        return [r.clip_id for r in recs], X, Y


def format_manifest(records):
    lines = []
    for r in records:
        labels = ",".join(str(int(v)) for v in r.labels)
        lines.append(f"{r.clip_id}\t{r.path}\t{labels}\t{r.split}\n")
    return "".join(lines)


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_manifest(records))


def read_manifest(path, check_files=True):
    root = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    n_classes = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            clip_id, rel, labels, split = parts
            if clip_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate clip-id {clip_id!r}")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                lab = tuple(int(v) for v in labels.split(","))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad label field {labels!r}") from exc
            if any(v not in (0, 1) for v in lab):
                raise DataError(f"{path}:{lineno}: labels must be 0/1")
            if n_classes is None:
                n_classes = len(lab)
            elif len(lab) != n_classes:
                raise DataError(f"{path}:{lineno}: {len(lab)} labels, expected {n_classes}")
            if check_files and not os.path.exists(os.path.join(root, rel)):
                raise DataError(f"{path}:{lineno}: missing file {rel!r} for clip {clip_id!r}")
            seen.add(clip_id)
            records.append(ManifestRecord(clip_id, rel, lab, split))
    return Manifest(records, root)


def validate_manifest(path):
    """Strict check that every record parses and every feature file decodes."""
    manifest = read_manifest(path, check_files=True)
    if not manifest.records:
        raise DataError(f"{path}: manifest is empty")
    for r in manifest.records:
        try:
            m = read_features(manifest.resolve(r))
        except (FormatError, TruncationError) as exc:
            raise DataError(f"{r.clip_id}: {exc}") from exc
        if m.ndim != 2 or m.shape[1] != N_MELS:
            raise DataError(f"{r.clip_id}: feature matrix has shape {m.shape}, expected (frames, {N_MELS})")
    return manifest


def extract_from_wav_manifest(wav_manifest_path, out_dir):
    """Compute CMVN-normalised features for a manifest whose paths are WAV files.

    Writes ``features/<clip-id>.qdf``, ``cmvn.qdf`` and ``manifest.tsv`` under
    ``out_dir`` and returns the new manifest path.
    """
    src = read_manifest(wav_manifest_path, check_files=True)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    raw = {r.clip_id: lfbe(read_wav(src.resolve(r))) for r in src.records}
    stats = cmvn_fit(raw[r.clip_id] for r in src.split("train"))
    return _write_dataset(out_dir, src.records, raw, stats)


def _write_dataset(out_dir, records, raw, stats):
    out_records = []
    for r in records:
        rel = f"features/{r.clip_id}.qdf"
        write_features(os.path.join(out_dir, rel), cmvn_apply(raw[r.clip_id], stats))
        out_records.append(ManifestRecord(r.clip_id, rel, tuple(r.labels), r.split))
    write_features(os.path.join(out_dir, "cmvn.qdf"), stats.to_matrix())
    path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(path, out_records)
    return path
