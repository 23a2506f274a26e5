"""Seeded synthetic emotion-like corpus for desk-scale experiments.

Each class is a mixture of tones at class-specific frequencies with a
class-specific amplitude-modulation rate. Speakers are Gaussian clusters
around a pitch factor, loudness and noise level, so every speaker shifts
the class templates in its own way. Splits are speaker-disjoint; train
labels can be corrupted by uniform label noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav
from .dataset import Manifest, SampleRecord, save_manifest

EMOTIONS = ("anger", "disgust", "fear", "guilt", "happiness", "sadness", "surprise")


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 7
    speakers: tuple[int, int, int] = (6, 3, 3)  # train, val, test
    clips_per_speaker_class: int = 4
    sample_rates: tuple[int, ...] = (16000, 22050)
    min_duration: float = 0.35
    max_duration: float = 0.55
    tones_per_class: int = 3
    shared_tones: int = 1  # tones drawn from a pool shared by all classes
    pitch_spread: float = 0.03  # std of speaker pitch factors
    jitter: float = 0.01  # per-clip relative frequency jitter
    snr_db: tuple[float, float] = (15.0, 25.0)
    label_noise: float = 0.0
    seed: int = 0


def _class_templates(cfg: SynthConfig, rng):
    pool = rng.uniform(350.0, 3200.0, size=cfg.tones_per_class * 2)
    templates = []
    for _ in range(cfg.classes):
        own = rng.uniform(300.0, 3600.0, size=cfg.tones_per_class - cfg.shared_tones)
        shared = rng.choice(pool, size=cfg.shared_tones, replace=False)
        freqs = np.sort(np.concatenate([own, shared]))
        am_rate = rng.uniform(2.0, 12.0)
        templates.append((freqs, am_rate))
    return templates


def _render(freqs, am_rate, speaker, duration, rate, rng, cfg: SynthConfig):
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    pitch, gain, snr_offset = speaker
    x = np.zeros(n)
    weights = rng.dirichlet(np.full(len(freqs), 2.0))
    for f, w in zip(freqs, weights):
        f = f * pitch * (1.0 + cfg.jitter * rng.standard_normal())
        f = min(f, 0.45 * rate)
        x += w * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    snr = rng.uniform(*cfg.snr_db) + snr_offset
    noise = rng.standard_normal(n)
    noise *= np.sqrt(np.mean(x**2) / 10 ** (snr / 10)) / max(np.std(noise), 1e-12)
    y = x + noise
    y *= gain / max(np.max(np.abs(y)), 1e-12)
    return y


def synth_corpus(out_dir, cfg: SynthConfig = SynthConfig()) -> Manifest:
    """Write WAVs under ``out_dir/audio`` and ``out_dir/manifest.tsv``.

    Also writes ``clean_labels.tsv`` with the labels before noise was injected.
    Audio paths in the manifest are relative to ``out_dir``.
    """
    if cfg.classes > len(EMOTIONS):
        names = tuple(f"class{i:02d}" for i in range(cfg.classes))
    else:
        names = EMOTIONS[: cfg.classes]
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    templates = _class_templates(cfg, rng)
    records, clean = [], []
    speaker_no = 0
    for split, count in zip(("train", "val", "test"), cfg.speakers):
        for _ in range(count):
            spk = f"spk{speaker_no:02d}"
            speaker = (
                float(np.exp(cfg.pitch_spread * rng.standard_normal())),
                float(rng.uniform(0.3, 0.9)),
                float(rng.normal(0.0, 2.0)),
            )
            rate = int(cfg.sample_rates[speaker_no % len(cfg.sample_rates)])
            pcm16 = speaker_no % 3 != 2  # every third speaker is stored as 32-bit float
            for c, (freqs, am) in enumerate(templates):
                for j in range(cfg.clips_per_speaker_class):
                    sid = f"{spk}_{names[c]}_{j:02d}"
                    duration = rng.uniform(cfg.min_duration, cfg.max_duration)
                    y = _render(freqs, am, speaker, duration, rate, rng, cfg)
                    rel = f"audio/{sid}.wav"
                    write_wav(out_dir / rel, AudioClip(y, rate), pcm16=pcm16)
                    label = names[c]
                    if split == "train" and cfg.label_noise > 0 and rng.random() < cfg.label_noise:
                        others = [n for i, n in enumerate(names) if i != c]
                        label = others[int(rng.integers(len(others)))]
                    records.append(SampleRecord(sid, rel, label, split, spk, round(len(y) / rate, 6)))
                    clean.append((sid, names[c]))
            speaker_no += 1
    manifest = Manifest.from_records(records)
    save_manifest(manifest, out_dir / "manifest.tsv")
    with open(out_dir / "clean_labels.tsv", "w", encoding="utf-8") as fh:
        fh.write("id\tlabel\n")
        for sid, lab in clean:
            fh.write(f"{sid}\t{lab}\n")
    return manifest
