"""Synthetic speaker corpus, manifests, and dataset splits.

A synthetic speaker is a pitch plus three vocal-tract resonances; an
utterance is a jittered glottal pulse train run through those resonators
with a little noise on top.  Different master seeds give disjoint speaker
identities, which the verification protocol relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import SAMPLE_RATE, AudioClip, save_wav

__all__ = [
    "ManifestEntry", "Manifest", "SynthSpeakerSpec",
    "make_speaker_spec", "synth_utterance", "synth_corpus",
    "split", "make_verification_split",
]


@dataclass
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: str
    n_frames: int = 0


@dataclass
class Manifest:
    entries: list
    split: str = "all"

    def __len__(self):
        return len(self.entries)

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def by_speaker(self) -> dict:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, []).append(e)
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(f"{e.utterance_id}\t{e.speaker_id}\t{e.path}\t{e.n_frames}\n")

    @classmethod
    def load(cls, path, split: str = "all", check_paths: bool = True) -> "Manifest":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
                utt, spk, p, n_frames = parts
                if check_paths and not Path(p).exists():
                    raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
                entries.append(ManifestEntry(utt, spk, p, int(n_frames)))
        return cls(entries, split)


@dataclass
class SynthSpeakerSpec:
    """Generative parameters of one synthetic speaker."""

    speaker_id: str
    pitch_hz: float
    formants_hz: tuple
    bandwidths_hz: tuple
    noise_level: float
    seed: int

    def __post_init__(self):
        if not 60.0 <= self.pitch_hz <= 300.0:
            raise ValueError(f"pitch {self.pitch_hz} Hz outside [60, 300]")
        if any(f >= SAMPLE_RATE / 2 for f in self.formants_hz):
            raise ValueError(f"formants {self.formants_hz} must stay below Nyquist")


def make_speaker_spec(master_seed: int, index: int, speaker_id: str) -> SynthSpeakerSpec:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, index]))
    return SynthSpeakerSpec(
        speaker_id=speaker_id,
        pitch_hz=float(rng.uniform(80.0, 250.0)),
        formants_hz=(
            float(rng.uniform(300.0, 850.0)),
            float(rng.uniform(950.0, 2100.0)),
            float(rng.uniform(2300.0, 3400.0)),
        ),
        bandwidths_hz=tuple(float(b) for b in rng.uniform(60.0, 120.0, size=3)),
        noise_level=float(rng.uniform(0.01, 0.03)),
        seed=int(rng.integers(2**31)),
    )


def synth_utterance(spec: SynthSpeakerSpec, duration_s: float,
                    master_seed: int, speaker_index: int, utt_index: int) -> AudioClip:
    """Render one utterance: jittered pulse train through formant resonators."""
    rng = np.random.default_rng(
        np.random.SeedSequence([master_seed, speaker_index, utt_index])
    )
    n = int(round(duration_s * SAMPLE_RATE))
    pulses = np.zeros(n)
    pos = 0.0
    while pos < n:
        pulses[int(pos)] = 1.0
        period = SAMPLE_RATE / spec.pitch_hz
        pos += period * (1.0 + rng.uniform(-0.03, 0.03))
    x = pulses
    for f, bw in zip(spec.formants_hz, spec.bandwidths_hz):
        f_u = f * (1.0 + rng.uniform(-0.02, 0.02))
        r = np.exp(-np.pi * bw / SAMPLE_RATE)
        theta = 2.0 * np.pi * f_u / SAMPLE_RATE
        x = lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], x)
    x = x / np.max(np.abs(x)) * 0.5 * rng.uniform(0.7, 1.0)
    x = x + rng.normal(0.0, spec.noise_level, n)
    return AudioClip(np.clip(x, -0.99, 0.99))


def synth_corpus(n_speakers: int, utts_per_speaker: int, duration_s: float,
                 seed: int, out_dir) -> Manifest:
    """Generate WAV files plus a manifest under out_dir.

    Same arguments produce a bit-identical audio set; speaker identities are
    derived from the seed so corpora built with different seeds are disjoint.
    """
    if n_speakers < 2:
        raise ValueError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 1:
        raise ValueError(f"need at least 1 utterance per speaker, got {utts_per_speaker}")
    out_dir = Path(out_dir)
    entries = []
    for i in range(n_speakers):
        speaker_id = f"s{seed}_{i:03d}"
        spec = make_speaker_spec(seed, i, speaker_id)
        spk_dir = out_dir / "wav" / speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for j in range(utts_per_speaker):
            utt_id = f"{speaker_id}-u{j:03d}"
            clip = synth_utterance(spec, duration_s, seed, i, j)
            path = spk_dir / f"{utt_id}.wav"
            save_wav(path, clip)
            entries.append(ManifestEntry(utt_id, speaker_id, str(path), 0))
    manifest = Manifest(entries)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def split(manifest: Manifest, train_fraction: float = 0.9,
          seed: int = 0) -> tuple[Manifest, Manifest]:
    """Per-speaker stratified split into train and test manifests."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
    train, test = [], []
    for speaker_id, utts in sorted(manifest.by_speaker().items()):
        if len(utts) < 2:
            raise ValueError(
                f"speaker {speaker_id} has {len(utts)} utterance(s); need at least 2 to split"
            )
        order = rng.permutation(len(utts))
        n_train = int(round(train_fraction * len(utts)))
        n_train = min(max(n_train, 1), len(utts) - 1)
        for k, idx in enumerate(order):
            (train if k < n_train else test).append(utts[idx])
    return Manifest(train, "train"), Manifest(test, "test")


def make_verification_split(manifest: Manifest, n_enrol_spk: int, n_eval_spk: int,
                            utts_per_spk: int = 10, seed: int = 0
                            ) -> tuple[Manifest, Manifest]:
    """Sample disjoint enrolment and evaluation speaker sets.

    Each selected speaker contributes exactly utts_per_spk utterances to its
    own side.
    """
    speakers = manifest.speakers()
    need = n_enrol_spk + n_eval_spk
    if need > len(speakers):
        raise ValueError(
            f"asked for {n_enrol_spk}+{n_eval_spk} speakers but the manifest has "
            f"only {len(speakers)}"
        )
    by_speaker = manifest.by_speaker()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    chosen = rng.permutation(len(speakers))[:need]
    enrol_spk = sorted(speakers[i] for i in chosen[:n_enrol_spk])
    eval_spk = sorted(speakers[i] for i in chosen[n_enrol_spk:])

    def take(speaker_ids, tag):
        out = []
        for speaker_id in speaker_ids:
            utts = by_speaker[speaker_id]
            if len(utts) < utts_per_spk:
                raise ValueError(
                    f"speaker {speaker_id} has {len(utts)} utterances, "
                    f"need {utts_per_spk}"
                )
            idx = rng.permutation(len(utts))[:utts_per_spk]
            out.extend(utts[k] for k in sorted(idx))
        return Manifest(out, tag)

    return take(enrol_spk, "enrol"), take(eval_spk, "eval")
