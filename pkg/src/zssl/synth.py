"""Synthetic "speech": pseudo-words spelled with per-letter tone templates.

Each letter owns a fixed pair of sinusoids.  A word is its letters' tones
played back to back with short raised-cosine edges, words are separated
by silence, and every instance is jittered in pitch, duration, amplitude
and phase, with a little white noise on top.  Frame-level acoustics thus
identify the letter being spoken, and letters spell the transcript.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from zssl import datapipe as dp
from zssl import frontend as fe

SAMPLE_RATE = 16000
ALPHABET = "abdeiklmnorst"
LETTER_SECONDS = (0.18, 0.26)
GAP_SECONDS = (0.06, 0.12)
EDGE_SECONDS = 0.005
PITCH_JITTER = 0.015
NOISE_STD = 0.003


def letter_frequencies(letter: str) -> tuple[float, float]:
    """Two tones per letter: a low one on a 230 Hz grid and a high one on a 310 Hz grid."""
    i = ALPHABET.index(letter)
    return 300.0 + 230.0 * i, 1700.0 + 310.0 * ((5 * i) % len(ALPHABET))


def make_lexicon(rng: np.random.Generator, size: int) -> list[str]:
    words: list[str] = []
    while len(words) < size:
        n = int(rng.integers(2, 5))
        letters = []
        for _ in range(n):
            choices = [c for c in ALPHABET if not letters or c != letters[-1]]
            letters.append(choices[int(rng.integers(len(choices)))])
        w = "".join(letters)
        if w not in words:
            words.append(w)
    return words


@dataclass(frozen=True)
class Segment:
    symbol: str  # a letter, or " " for silence
    start: int
    end: int


def render_letter(letter: str, n: int, rng: np.random.Generator | None) -> np.ndarray:
    f1, f2 = letter_frequencies(letter)
    t = np.arange(n) / SAMPLE_RATE
    if rng is None:
        jit1 = jit2 = 1.0
        ph1 = ph2 = 0.0
        amp = 0.4
    else:
        jit1, jit2 = 1.0 + PITCH_JITTER * rng.uniform(-1, 1, size=2)
        ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.3, 0.5)
    wave = amp * (np.sin(2 * np.pi * f1 * jit1 * t + ph1) + 0.7 * np.sin(2 * np.pi * f2 * jit2 * t + ph2))
    edge = min(int(EDGE_SECONDS * SAMPLE_RATE), n // 2)
    if edge:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        wave[:edge] *= ramp
        wave[-edge:] *= ramp[::-1]
    return wave


def render_utterance(words, rng: np.random.Generator, clean: bool = False) -> tuple[np.ndarray, list[Segment]]:
    """Waveform in [-1, 1) and its letter/silence segmentation in samples."""
    pieces, segments, pos = [], [], 0

    def gap():
        nonlocal pos
        n = int(rng.uniform(*GAP_SECONDS) * SAMPLE_RATE)
        pieces.append(np.zeros(n))
        segments.append(Segment(" ", pos, pos + n))
        pos += n

    gap()
    for w in words:
        for c in w:
            n = int(rng.uniform(*LETTER_SECONDS) * SAMPLE_RATE)
            pieces.append(render_letter(c, n, None if clean else rng))
            segments.append(Segment(c, pos, pos + n))
            pos += n
        gap()
    wave = np.concatenate(pieces)
    if not clean:
        wave = wave + rng.normal(0.0, NOISE_STD, size=wave.size)
    return np.clip(wave, -1.0, 32767 / 32768), segments


def to_pcm(wave: np.ndarray) -> np.ndarray:
    return np.round(wave * 32768.0).clip(-32768, 32767).astype("<i2")


def make_data(out_dir: str | os.PathLike, seed: int, num_utts: int, duration_range=(2.0, 4.0),
              lexicon_size: int = 12) -> list[dp.SegmentRecord]:
    """Write ``audio.pcm``, ``train.tsv``, ``text.txt`` and ``lexicon.txt`` under ``out_dir``."""
    if lexicon_size < 2:
        raise ValueError("lexicon_size must be >= 2")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lexicon = make_lexicon(rng, lexicon_size)
    records, offset, texts = [], 0, []
    with open(out / "audio.pcm", "wb") as audio:
        for u in range(num_utts):
            target = rng.uniform(*duration_range)
            words = []
            while not words or sum(len(w) for w in words) * 0.22 + 0.09 * len(words) < target - 0.2:
                words.append(lexicon[int(rng.integers(len(lexicon)))])
            wave, _ = render_utterance(words, rng)
            pcm = to_pcm(wave)
            audio.write(pcm.tobytes())
            text = " ".join(words)
            texts.append(text)
            records.append(dp.SegmentRecord(f"utt{u:05d}", pcm.size / SAMPLE_RATE, "audio.pcm", offset, pcm.size,
                                            None, text))
            offset += pcm.size
    dp.write_manifest(out / "train.tsv", records)
    (out / "text.txt").write_text("".join(t + "\n" for t in texts), encoding="utf-8")
    (out / "lexicon.txt").write_text("".join(w + "\n" for w in lexicon), encoding="utf-8")
    return records


# ------------------------------------------------------------- recoverability


def letter_templates(n_mels: int = 40) -> dict[str, np.ndarray]:
    """Mean log-mel frame of each clean letter tone."""
    out = {}
    for c in ALPHABET:
        wave = render_letter(c, int(0.2 * SAMPLE_RATE), None)
        out[c] = fe.log_mel(wave, n_mels)[1:-1].mean(axis=0)
    return out


def classify_frames(wave: np.ndarray, segments, templates: dict[str, np.ndarray]) -> tuple[int, int]:
    """(correct, total) nearest-template calls over frames that lie inside one letter."""
    feats = fe.log_mel(wave, next(iter(templates.values())).size)
    letters = list(templates)
    bank = np.stack([templates[c] for c in letters])
    correct = total = 0
    edge = int(EDGE_SECONDS * SAMPLE_RATE)
    for seg in segments:
        if seg.symbol == " ":
            continue
        for i in range(feats.shape[0]):
            lo = i * fe.HOP
            if lo >= seg.start + edge and lo + fe.WINDOW <= seg.end - edge:
                guess = letters[int(np.argmin(((bank - feats[i]) ** 2).sum(axis=1)))]
                correct += guess == seg.symbol
                total += 1
    return correct, total
