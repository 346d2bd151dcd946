"""Synthetic corpus generation.

Each phone gets a distinct Gaussian feature prototype (and a sinusoid
frequency for optional waveform rendering); utterances are random word
sequences rendered as per-phone frame blocks plus noise.  Everything is
deterministic in the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioSegment, write_wav
from .decoder import Lexicon
from .features import FeatureMatrix, MfccConfig, mfcc


class ManifestError(ValueError):
    pass


SPLITS = ("pretrain", "train", "dev", "test")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    transcript: tuple  # () allowed only for the pretrain split
    split: str


@dataclass
class CorpusManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ManifestError("duplicate utterance ids")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split {e.split!r}")
            if e.split != "pretrain" and not e.transcript:
                raise ManifestError(f"{e.id}: {e.split} entries need transcripts")

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def save(self, path):
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps({"id": e.id, "path": e.path,
                                    "transcript": list(e.transcript),
                                    "split": e.split}) + "\n")

    @staticmethod
    def load(path):
        entries = []
        with open(path) as f:
            for line in f:
                d = json.loads(line)
                entries.append(ManifestEntry(d["id"], d["path"],
                                             tuple(d["transcript"]), d["split"]))
        return CorpusManifest(entries)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_words: int = 5
    n_phones: int = 8
    dim: int = 8
    frames_per_phone: int = 4
    noise_sigma: float = 0.3
    utterances: tuple = (("pretrain", 30), ("train", 40), ("dev", 15), ("test", 15))
    min_words: int = 1
    max_words: int = 4
    waveform: bool = False  # render true audio and extract MFCCs
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_words < 2 or self.n_phones < 2:
            raise ValueError("need at least 2 words and 2 phones")


@dataclass
class SynthCorpus:
    manifest: CorpusManifest
    lexicon: Lexicon
    prototypes: np.ndarray  # [n_phones, dim]
    phones: list
    lm_text_path: str
    lexicon_path: str
    manifest_path: str


def _make_lexicon(rng, phones, n_words):
    """Distinct 2-3 phone pronunciations, deterministic per rng state."""
    lex = Lexicon()
    seen = set()
    words = []
    while len(words) < n_words:
        n_ph = int(rng.integers(2, 4))
        pron = tuple(phones[rng.integers(len(phones))] for _ in range(n_ph))
        if pron in seen:
            continue
        seen.add(pron)
        w = f"word{len(words)}"
        lex.add(w, pron)
        words.append(w)
    return lex, words


def synth_corpus(cfg: SynthConfig, out_dir):
    """Generate manifest + per-utterance feature (or WAV) files + lexicon +
    LM training text under out_dir."""
    rng = np.random.default_rng(cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    phones = [f"p{i}" for i in range(cfg.n_phones)]
    prototypes = rng.normal(0.0, 3.0, size=(cfg.n_phones, cfg.dim))
    freqs = 200.0 + 150.0 * np.arange(cfg.n_phones)  # per-phone sinusoids
    lex, words = _make_lexicon(rng, phones, cfg.n_words)
    phone_idx = {p: i for i, p in enumerate(phones)}

    entries = []
    lm_lines = []
    for split, count in cfg.utterances:
        for u in range(count):
            uid = f"{split}_{u:03d}"
            n_w = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            transcript = tuple(words[rng.integers(len(words))] for _ in range(n_w))
            phone_seq = [p for w in transcript for p in lex.prons(w)[0]]
            if cfg.waveform:
                spf = int(0.01 * cfg.sample_rate) * cfg.frames_per_phone
                t = np.arange(spf) / cfg.sample_rate
                parts = [
                    np.sin(2 * np.pi * freqs[phone_idx[p]] * t)
                    + cfg.noise_sigma * 0.1 * rng.normal(size=spf)
                    for p in phone_seq
                ]
                wav = 0.5 * np.concatenate(parts)
                path = os.path.join(out_dir, f"{uid}.wav")
                write_wav(path, AudioSegment(wav, cfg.sample_rate, uid))
            else:
                blocks = [
                    np.tile(prototypes[phone_idx[p]], (cfg.frames_per_phone, 1))
                    + cfg.noise_sigma * rng.normal(size=(cfg.frames_per_phone, cfg.dim))
                    for p in phone_seq
                ]
                path = os.path.join(out_dir, f"{uid}.feat")
                FeatureMatrix(np.concatenate(blocks), 10.0, 25.0).save(path)
            entries.append(ManifestEntry(uid, path,
                                         () if split == "pretrain" else transcript,
                                         split))
            if split == "train":
                lm_lines.append(" ".join(transcript))
    manifest = CorpusManifest(entries)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    manifest.save(manifest_path)
    lexicon_path = os.path.join(out_dir, "lexicon.txt")
    lex.save(lexicon_path)
    lm_text_path = os.path.join(out_dir, "lm_train.txt")
    with open(lm_text_path, "w") as f:
        f.write("\n".join(lm_lines) + "\n")
    np.save(os.path.join(out_dir, "prototypes.npy"), prototypes)
    return SynthCorpus(manifest, lex, prototypes, phones,
                       lm_text_path, lexicon_path, manifest_path)


def load_features(entry: ManifestEntry, mfcc_cfg: MfccConfig = None):
    """Feature matrix for a manifest entry (computing MFCCs for WAV files)."""
    if entry.path.endswith(".wav"):
        from .audio import read_wav
        seg = read_wav(entry.path, entry.id)
        return mfcc(seg, mfcc_cfg or MfccConfig()).frames
    return FeatureMatrix.load(entry.path).frames


def nearest_prototype_phone_error(corpus: SynthCorpus, cfg: SynthConfig, split="dev"):
    """Classify each frame to its nearest prototype; returns the phone error
    rate of block-majority decisions against the true phone sequence."""
    phone_idx = {p: i for i, p in enumerate(corpus.phones)}
    errors = total = 0
    for e in corpus.manifest.split(split):
        feats = load_features(e)
        truth = [p for w in e.transcript for p in corpus.lexicon.prons(w)[0]]
        d2 = ((feats[:, None, :] - corpus.prototypes[None, :, :]) ** 2).sum(axis=2)
        frame_pred = np.argmin(d2, axis=1)
        for b, p in enumerate(truth):
            block = frame_pred[b * cfg.frames_per_phone:(b + 1) * cfg.frames_per_phone]
            pred = np.bincount(block, minlength=cfg.n_phones).argmax()
            errors += int(pred != phone_idx[p])
            total += 1
    return errors / max(total, 1)
