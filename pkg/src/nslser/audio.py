"""Audio front end: resampling, length unification and log-Mel spectrograms.

Framing uses no padding, so a clip of ``L`` samples yields
``1 + (L - win_length) // hop_length`` frames. Each frame is Hann-windowed
(periodic), its power spectrum is pooled by HTK-scale triangular filters and
compressed with ``ln(energy + log_floor)``.
"""
from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, get_window, resample_poly

log = logging.getLogger(__name__)

LMEL_MAGIC = b"LMEL"
RESAMPLE_TAPS_PER_PHASE = 32
RESAMPLE_KAISER_BETA = 8.0


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError("AudioClip holds mono audio only")
        if not np.all(np.isfinite(samples)):
            raise AudioError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    win_length: int = 512
    hop_length: int = 256
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-6
    target_length: int | None = None

    def __post_init__(self):
        if self.f_max is None:
            object.__setattr__(self, "f_max", self.sample_rate / 2)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 1 <= self.hop_length <= self.win_length:
            raise ValueError("need 1 <= hop_length <= win_length")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.target_length is not None and self.target_length < self.win_length:
            raise ValueError("target_length shorter than one window")


def num_frames(length: int, win_length: int = 512, hop_length: int = 256) -> int:
    if length < win_length:
        raise AudioError(f"clip of {length} samples is shorter than one window ({win_length})")
    return 1 + (length - win_length) // hop_length


def _rate_ratio(src: int, dst: int) -> tuple[int, int]:
    frac = Fraction(int(dst), int(src))
    return frac.numerator, frac.denominator


def resampled_length(length: int, src_rate: int, dst_rate: int) -> int:
    up, down = _rate_ratio(src_rate, dst_rate)
    return -(-length * up // down)


def _resample_filter(up: int, down: int) -> np.ndarray:
    rate = max(up, down)
    return firwin(RESAMPLE_TAPS_PER_PHASE * rate + 1, 1.0 / rate, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_rate``."""
    if len(clip) == 0:
        raise AudioError("cannot resample an empty clip")
    if target_rate <= 0:
        raise AudioError("target rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    up, down = _rate_ratio(clip.sample_rate, target_rate)
    y = resample_poly(clip.samples, up, down, window=_resample_filter(up, down))
    return AudioClip(y, int(target_rate))


def unify_length(clip: AudioClip, target_length: int) -> AudioClip:
    """Cut to ``target_length`` or extend by cyclic self-repetition."""
    if target_length < 1:
        raise AudioError("target_length must be >= 1")
    n = len(clip)
    if n == 0:
        raise AudioError("cannot unify the length of an empty clip")
    if n == target_length:
        return clip
    if n > target_length:
        return AudioClip(clip.samples[:target_length], clip.sample_rate)
    reps = -(-target_length // n)
    return AudioClip(np.tile(clip.samples, reps)[:target_length], clip.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, win_length // 2 + 1), peak 1."""
    n_bins = cfg.win_length // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.win_length
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(clip: AudioClip, cfg: MelConfig, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Log-Mel spectrogram of shape (frames, n_mels), float64."""
    if clip.sample_rate != cfg.sample_rate:
        raise AudioError(f"clip rate {clip.sample_rate} != configured rate {cfg.sample_rate}")
    n = num_frames(len(clip), cfg.win_length, cfg.hop_length)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, cfg.win_length)[:: cfg.hop_length][:n]
    window = get_window("hann", cfg.win_length, fftbins=True)
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    fb = mel_filterbank(cfg) if filterbank is None else filterbank
    return np.log(power @ fb.T + cfg.log_floor)


# -- WAV input/output --------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; multichannel audio is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(rate))


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    x = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(x * 32767.0).astype("<i2")
    else:
        data = x.astype("<f4")
    wavfile.write(str(path), clip.sample_rate, data)


def wav_info(path) -> tuple[int, int]:
    """(n_frames, sample_rate) from the header, without decoding samples."""
    try:
        with wave.open(str(path), "rb") as w:
            return w.getnframes(), w.getframerate()
    except wave.Error:
        # The stdlib reader rejects IEEE float WAVs.
        clip = read_wav(path)
        return len(clip), clip.sample_rate


# -- spectrogram and normalisation files ---------------------------------------

def save_spectrogram(path, spec: np.ndarray) -> None:
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValueError("spectrogram must be 2-D")
    frames, n_mels = spec.shape
    with open(path, "wb") as fh:
        fh.write(LMEL_MAGIC + struct.pack("<II", frames, n_mels))
        fh.write(np.ascontiguousarray(spec, dtype="<f4").tobytes())


def load_spectrogram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != LMEL_MAGIC:
        raise AudioError(f"{path}: not an LMEL file")
    frames, n_mels = struct.unpack_from("<II", raw, 4)
    body = raw[12:]
    if len(body) != 4 * frames * n_mels:
        raise AudioError(f"{path}: expected {frames}x{n_mels} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(frames, n_mels).astype(np.float32)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, spec: np.ndarray) -> np.ndarray:
        return ((spec - self.mean) / self.std).astype(spec.dtype, copy=False)


def compute_norm_stats(specs) -> NormStats:
    """Per-Mel-bin mean/std over all frames of ``specs``; zero std is replaced by 1."""
    total = None
    count = 0
    for s in specs:
        s = np.asarray(s, dtype=np.float64)
        if total is None:
            total = np.zeros(s.shape[1])
            total_sq = np.zeros(s.shape[1])
        total += s.sum(axis=0)
        total_sq += (s * s).sum(axis=0)
        count += s.shape[0]
    if count == 0:
        raise ValueError("no frames to compute normalisation statistics from")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return NormStats(mean, std)


def save_norm_stats(path, stats: NormStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin\tmean\tstd\n")
        for i, (m, s) in enumerate(zip(stats.mean, stats.std)):
            fh.write(f"{i}\t{float(m)!r}\t{float(s)!r}\n")


def load_norm_stats(path) -> NormStats:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    vals = np.array([[float(v) for v in r.split("\t")[1:3]] for r in rows if r.strip()])
    return NormStats(vals[:, 0], vals[:, 1])


# -- corpus-level extraction ---------------------------------------------------

def corpus_target_length(paths, sample_rate: int) -> int:
    """Longest clip in the corpus, measured after resampling."""
    longest = 0
    for p in paths:
        n, rate = wav_info(p)
        longest = max(longest, resampled_length(n, rate, sample_rate) if rate != sample_rate else n)
    return longest


def load_clip(path, cfg: MelConfig, target_length: int) -> AudioClip:
    clip = resample(read_wav(path), cfg.sample_rate)
    return unify_length(clip, target_length)


def extract_features(manifest, out_dir, cfg: MelConfig, root=None) -> dict:
    """Write ``<id>.lmel`` for every record plus ``norm.stats`` (train split only).

    Relative audio paths resolve against ``root`` (default: cwd).
    Returns a small summary dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(root) if root is not None else Path(".")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else root / p

    paths = [resolve(r.audio_path) for r in manifest.records]
    target = cfg.target_length or corpus_target_length(paths, cfg.sample_rate)
    if target < cfg.win_length:
        raise AudioError(f"corpus target length {target} is shorter than one window")
    fb = mel_filterbank(cfg)
    train_specs = []
    for rec, path in zip(manifest.records, paths):
        spec = log_mel(load_clip(path, cfg, target), cfg, fb)
        save_spectrogram(out_dir / f"{rec.id}.lmel", spec)
        if rec.split == "train":
            # Statistics come from the stored float32 values so they match what the model reads.
            train_specs.append(spec.astype(np.float32))
    if not train_specs:
        raise AudioError("no train-split records; cannot compute normalisation statistics")
    save_norm_stats(out_dir / "norm.stats", compute_norm_stats(train_specs))
    frames = num_frames(target, cfg.win_length, cfg.hop_length)
    log.info("extracted %d spectrograms of %dx%d", len(paths), frames, cfg.n_mels)
    return {"target_length": target, "frames": frames, "n_mels": cfg.n_mels, "count": len(paths)}


def load_features(feature_dir, ids, normalize: bool = True) -> np.ndarray:
    """Stack spectrograms for ``ids`` into (N, frames, n_mels) float32."""
    feature_dir = Path(feature_dir)
    stats = load_norm_stats(feature_dir / "norm.stats") if normalize else None
    out = []
    for sid in ids:
        p = feature_dir / f"{sid}.lmel"
        if not p.exists():
            raise FileNotFoundError(f"missing features for sample {sid!r}: {p}")
        s = load_spectrogram(p)
        out.append(stats.apply(s) if stats is not None else s)
    shapes = {s.shape for s in out}
    if len(shapes) > 1:
        raise AudioError(f"spectrograms have inconsistent shapes: {sorted(shapes)}")
    return np.stack(out).astype(np.float32)

