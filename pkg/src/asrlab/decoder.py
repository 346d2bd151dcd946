"""Lexicon handling, time-synchronous Viterbi beam search, and WER scoring.

Search combines acoustic and language scores as
am_scale * log p(x|w) + lm_scale * ln p(w) over word sequences, with
hypotheses recombined per (truncated LM history, pronunciation arc, state).
Word-boundary triphone contexts are resolved against the silence phone, so
each word's state chain is independent of its neighbors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hmm import ChainHmm, HmmTopology, emission_score_matrix
from .lm import BOS, EOS

LN10 = math.log(10.0)
SILENCE_PHONE = "sil"


class MissingWord(KeyError):
    pass


class NoHypothesis(RuntimeError):
    pass


class EmptyReference(ValueError):
    pass


class IdMismatch(ValueError):
    pass


class BadPronunciation(ValueError):
    pass


# -- Lexicon ---------------------------------------------------------------------


class Lexicon:
    """Word to pronunciation(s) map; text format 'word<TAB>ph1 ph2 ...'."""

    def __init__(self):
        self._prons = {}

    def add(self, word, phones):
        phones = tuple(phones)
        if not phones:
            raise BadPronunciation(f"empty pronunciation for {word!r}")
        self._prons.setdefault(word, [])
        if phones not in self._prons[word]:
            self._prons[word].append(phones)

    def prons(self, word):
        try:
            return list(self._prons[word])
        except KeyError:
            raise MissingWord(word) from None

    def __contains__(self, word):
        return word in self._prons

    @property
    def words(self):
        return sorted(self._prons)

    def phone_set(self):
        return sorted({p for prons in self._prons.values() for pron in prons for p in pron})

    @classmethod
    def parse(cls, text):
        lex = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" in line:
                word, pron = line.split("\t", 1)
            else:
                word, pron = line.split(None, 1)
            lex.add(word.strip(), pron.split())
        return lex

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.parse(f.read())

    def format(self):
        lines = []
        for word in self.words:
            for pron in self._prons[word]:
                lines.append(f"{word}\t{' '.join(pron)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.format())


# -- transcript expansion --------------------------------------------------------


def monophone_labeler(model):
    """Label function mapping a phone sequence to the model's state ids."""

    def labeler(phones):
        return model.state_sequence(phones)

    return labeler


def tied_state_labeler(tree, n_states_per_phone, boundary_phone=SILENCE_PHONE):
    """Label function resolving triphone contexts through CART leaves.

    Contexts at word edges use the silence phone, which keeps every word's
    chain independent of its neighbors.
    """

    def labeler(phones):
        phones = list(phones)
        labels = []
        for i, ph in enumerate(phones):
            left = phones[i - 1] if i > 0 else boundary_phone
            right = phones[i + 1] if i + 1 < len(phones) else boundary_phone
            for s in range(n_states_per_phone):
                labels.append(tree.leaf_of(ph, left, right, s))
        return np.array(labels, dtype=np.int64)

    return labeler


@dataclass
class WordGraph:
    """Linear word graph: per word, the label chains of each pronunciation."""

    words: list
    arcs: list  # arcs[i][j] = np.ndarray of label ids for pronunciation j

    def linear_chain(self, topology, variant=0):
        ids = np.concatenate([self.arcs[i][variant] for i in range(len(self.words))])
        return ChainHmm(ids, topology)


def expand_transcript(words, lexicon: Lexicon, labeler, silence_word=None):
    """Expand a word transcript into per-word tied-state pronunciation chains.

    silence_word, when given and present in the lexicon, is inserted between
    words and at both utterance edges as an optional extra word.
    """
    seq = list(words)
    if silence_word is not None:
        padded = [silence_word]
        for w in seq:
            padded.extend([w, silence_word])
        seq = padded
    arcs = [[labeler(list(pron)) for pron in lexicon.prons(w)] for w in seq]
    return WordGraph(seq, arcs)


# -- decoding --------------------------------------------------------------------


@dataclass
class DecodeConfig:
    am_scale: float = 1.0
    lm_scale: float = 1.0
    beam_logwidth: float = math.inf
    max_active: int = 0  # 0 = unlimited

    def __post_init__(self):
        if self.am_scale <= 0 or self.lm_scale < 0 or self.beam_logwidth < 0:
            raise ValueError("scales must be positive and beam nonnegative")


@dataclass
class DecodeResult:
    words: list
    log_score: float


class GmmAcoustic:
    """Adapts an HmmAcousticModel (optionally CART-tied) for decoding."""

    def __init__(self, model, cart=None, boundary_phone=SILENCE_PHONE):
        self.model = model
        self.topology = model.topology
        if cart is None:
            self._labeler = monophone_labeler(model)
        else:
            self._labeler = tied_state_labeler(cart, model.n_states_per_phone, boundary_phone)

    def labels_for(self, phones):
        return self._labeler(phones)

    def score_matrix(self, features):
        ids = np.arange(self.model.n_labels)
        return emission_score_matrix(features, self.model.emissions, ids)


class MatrixAcoustic:
    """Decoding adapter around a precomputed [T, n_labels] score matrix."""

    def __init__(self, matrix, labeler, topology):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.topology = topology
        self._labeler = labeler

    def labels_for(self, phones):
        return self._labeler(phones)

    def score_matrix(self, features):
        return self.matrix


def compile_network(lexicon: Lexicon, labeler, skip_words=()):
    """Flat list of (word, label chain) pronunciation arcs over the vocabulary."""
    arcs = []
    for word in lexicon.words:
        if word in skip_words:
            continue
        for pron in lexicon.prons(word):
            arcs.append((word, labeler(list(pron))))
    return arcs


def decode(features, am, lm, lexicon, cfg: DecodeConfig = None, silence_word=None):
    """Time-synchronous Viterbi beam search over whole-word arcs.

    Returns the best word sequence and its combined log score.  The LM score
    (natural log) enters at word starts; sentence end is scored after the
    final frame.  silence_word, if present in the lexicon, is decodable at
    zero LM cost and excluded from the output and the LM history.
    """
    cfg = cfg or DecodeConfig()
    scores = np.asarray(am.score_matrix(features), dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise NoHypothesis("no frames to decode")
    arcs = compile_network(lexicon, am.labels_for)
    stay, adv, skip = (cfg.am_scale * float(v) for v in am.topology.log_probs)

    def lm_score(word, words_so_far):
        if word == silence_word:
            return 0.0
        return cfg.lm_scale * LN10 * lm.logprob(word, (BOS,) + words_so_far)

    order = getattr(lm, "order", 1)

    def hist_key(words):
        real = tuple(w for w in words)
        return ((BOS,) + real)[-(order - 1):] if order > 1 else ()

    t_frames = scores.shape[0]
    # word-end tokens: truncated history -> (score, emitted word tuple)
    ends = {hist_key(()): (0.0, ())}
    active = {}
    for t in range(t_frames):
        nxt = {}

        def push(key, sc, words):
            cur = nxt.get(key)
            if cur is None or sc > cur[0]:
                nxt[key] = (sc, words)

        for (hk, ai, s), (sc, words) in active.items():
            ids = arcs[ai][1]
            emit = cfg.am_scale * scores[t]
            for ds, lp in ((0, stay), (1, adv), (2, skip)):
                s2 = s + ds
                if s2 < len(ids):
                    push((hk, ai, s2), sc + lp + emit[ids[s2]], words)
        for hk, (sc, words) in ends.items():
            for ai, (word, ids) in enumerate(arcs):
                entry = sc + lm_score(word, words) + cfg.am_scale * scores[t, ids[0]]
                push((hk, ai, 0), entry, words)
        if not nxt:
            raise NoHypothesis("all paths pruned")
        best = max(v[0] for v in nxt.values())
        pruned = {k: v for k, v in nxt.items() if v[0] >= best - cfg.beam_logwidth}
        if cfg.max_active and len(pruned) > cfg.max_active:
            keep = sorted(pruned.items(), key=lambda kv: -kv[1][0])[: cfg.max_active]
            pruned = dict(keep)
        active = pruned
        ends = {}
        for (hk, ai, s), (sc, words) in active.items():
            word, ids = arcs[ai]
            n = len(ids)
            exit_lp = adv if s == n - 1 else (skip if s == n - 2 else None)
            if exit_lp is None:
                continue
            out_words = words if word == silence_word else words + (word,)
            key = hist_key(out_words)
            cand = (sc + exit_lp, out_words)
            cur = ends.get(key)
            if cur is None or cand[0] > cur[0]:
                ends[key] = cand
    finals = [
        (sc + cfg.lm_scale * LN10 * lm.logprob(EOS, (BOS,) + words), words)
        for sc, words in ends.values()
    ]
    if not finals:
        raise NoHypothesis("no complete word sequence survived")
    best_sc, best_words = max(finals, key=lambda x: x[0])
    return DecodeResult(list(best_words), float(best_sc))


# -- WER -------------------------------------------------------------------------

# Worked examples of (substitutions + insertions + deletions) / reference
# words: (reference, hypothesis, (sub, ins, del), wer).
WORKED_EXAMPLES = (
    (("the", "cat", "sat"), ("the", "cat", "sat"), (0, 0, 0), 0.0),
    (("the", "cat", "sat"), ("the", "hat", "sat", "down"), (1, 1, 0), 2 / 3),
    (("see", "the", "dog", "run"), ("the", "dig", "run"), (1, 0, 1), 0.5),
)


@dataclass
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    reference_words: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self):
        return self.errors / self.reference_words

    def __add__(self, other):
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_words + other.reference_words,
        )


def align_words(ref, hyp):
    """Minimal-edit alignment with unit costs, preferring substitution on ties."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    s = d = ins_n = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins_n += 1
            j -= 1
    return WerBreakdown(int(s), int(ins_n), int(d), n)


def wer(ref, hyp):
    if len(list(ref)) == 0:
        raise EmptyReference("reference transcript is empty")
    return align_words(ref, hyp)


def score_corpus(refs, hyps):
    """Aggregate WER over matching utterance-id -> word-list dicts."""
    if set(refs) != set(hyps):
        raise IdMismatch(
            f"id sets differ: {sorted(set(refs) ^ set(hyps))[:5]} ..."
        )
    total = WerBreakdown(0, 0, 0, 0)
    for uid in sorted(refs):
        total = total + wer(refs[uid], hyps[uid])
    return total


def parse_transcript_lines(text):
    """'<utt-id> w1 w2 ...' lines to an id -> word-list dict."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        out[parts[0]] = parts[1:]
    return out


def format_transcript_lines(table):
    return "\n".join(f"{uid} {' '.join(table[uid])}" for uid in sorted(table)) + "\n"
