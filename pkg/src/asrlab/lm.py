"""Count-based n-gram language modeling with interpolated Kneser-Ney smoothing.

Probabilities are exact convex mixtures at every level, so each conditional
distribution sums to 1 over vocabulary + unknown + end marker.  External
reporting uses log base 10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"


class EmptyCounts(ValueError):
    pass


class EmptyText(ValueError):
    pass


class DegenerateDev(ValueError):
    pass


def count_ngrams(corpus, order):
    """Exact n-gram counts for orders 1..order.

    corpus: iterable of token sequences (one sentence each).  Order-k grams
    are counted over each sentence padded with k-1 start markers and one end
    marker.  Returns a list indexed 1..order of dict[tuple -> int].
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    tables = [None] + [dict() for _ in range(order)]
    for sent in corpus:
        sent = list(sent)
        for k in range(1, order + 1):
            padded = [BOS] * (k - 1) + sent + [EOS]
            for i in range(len(padded) - k + 1):
                gram = tuple(padded[i : i + k])
                if k > 1 and gram[-1] == BOS:
                    continue  # never predict the start marker
                tables[k][gram] = tables[k].get(gram, 0) + 1
    return tables


@dataclass
class NGramModel:
    """Interpolated Kneser-Ney model evaluated lazily from count tables."""

    order: int
    counts: list  # count_ngrams output
    discounts: list  # discount per order, index 1..order
    vocab: set = field(default_factory=set)
    unk_mass: float = 0.0
    _context: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.vocab:
            self.vocab = {g[0] for g in self.counts[1] if g[0] not in (BOS, EOS)}
        if not self.unk_mass:
            n1 = sum(1 for g, c in self.counts[1].items() if c == 1 and g[0] != EOS)
            total = sum(self.counts[1].values())
            self.unk_mass = min(max(n1 / max(total, 1), 1.0 / (total + len(self.vocab) + 1)), 0.5)
        self._build_context_tables()

    # events a conditional distribution ranges over: words + end marker + unknown
    def prediction_vocab(self):
        return self.vocab | {EOS, UNK}

    def _build_context_tables(self):
        """Effective per-order count tables: raw at the top, continuation below."""
        eff = [None] * (self.order + 1)
        eff[self.order] = dict(self.counts[self.order])
        for k in range(self.order - 1, 0, -1):
            cont = {}
            for gram in self.counts[k + 1]:
                sub = gram[1:]
                cont[sub] = cont.get(sub, 0) + 1
            eff[k] = cont
        # fall back to raw counts when an order has no continuation evidence
        for k in range(1, self.order):
            if not eff[k]:
                eff[k] = dict(self.counts[k])
        self._eff = eff
        # per-history denominators and distinct-continuation counts
        self._denom = [None] * (self.order + 1)
        self._types = [None] * (self.order + 1)
        for k in range(1, self.order + 1):
            denom, types = {}, {}
            for gram, c in eff[k].items():
                h = gram[:-1]
                denom[h] = denom.get(h, 0) + c
                types[h] = types.get(h, 0) + 1
            self._denom[k] = denom
            self._types[k] = types

    def base_prob(self, word):
        """Order-0 distribution: explicit unknown mass, uniform elsewhere."""
        if word != EOS and word not in self.vocab:
            return self.unk_mass
        return (1.0 - self.unk_mass) / (len(self.vocab) + 1)

    def prob(self, word, history=()):
        """p(word | history) with history truncated to order-1 tokens."""
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        word = word if word in self.vocab or word in (EOS,) else UNK
        key = (h, word)
        if key in self._cache:
            return self._cache[key]
        p = self._prob_order(word, h, len(h) + 1)
        self._cache[key] = p
        return p

    def _prob_order(self, word, h, k):
        if k == 1:
            d = self.discounts[1]
            denom = self._denom[1].get((), 0)
            if denom == 0:
                return self.base_prob(word)
            c = self._eff[1].get((word,), 0)
            lam = d * self._types[1].get((), 0) / denom
            return max(c - d, 0.0) / denom + lam * self.base_prob(word)
        denom = self._denom[k].get(h, 0)
        if denom == 0:
            return self._prob_order(word, h[1:], k - 1)
        d = self.discounts[k]
        c = self._eff[k].get(h + (word,), 0)
        lam = d * self._types[k].get(h, 0) / denom
        return max(c - d, 0.0) / denom + lam * self._prob_order(word, h[1:], k - 1)

    def logprob(self, word, history=()):
        """log10 p(word | history); OOV maps to the unknown-token mass."""
        return math.log10(self.prob(word, history))

    def backoff_weight(self, h):
        """Interpolation weight lambda(h); 1 for unseen histories."""
        k = len(h) + 1
        if k > self.order:
            raise ValueError("history too long")
        denom = self._denom[k].get(tuple(h), 0)
        if denom == 0:
            return 1.0
        d = self.discounts[k]
        return d * self._types[k].get(tuple(h), 0) / denom


def estimate_kneser_ney(counts, discount=0.75):
    """Build an interpolated KN model from count_ngrams output.

    discount: a single value in (0,1) or a per-order list indexed 1..order.
    """
    order = len(counts) - 1
    if order < 1 or not counts[1]:
        raise EmptyCounts("no counts")
    if isinstance(discount, (int, float)):
        discounts = [None] + [float(discount)] * order
    else:
        discounts = list(discount)
    for d in discounts[1:]:
        if not (0.0 < d < 1.0):
            raise ValueError("discounts must be in (0, 1)")
    return NGramModel(order, counts, discounts)


def train_lm(corpus, order=4, discount=0.75):
    return estimate_kneser_ney(count_ngrams(corpus, order), discount)


def lm_logprob(model, word, history=()):
    return model.logprob(word, history)


@dataclass
class LmEvalReport:
    perplexity: float
    oov_rate: float
    token_count: int


def evaluate(model, sentences):
    """Perplexity and OOV rate over tokenized sentences.

    PPL = 10^(-(1/N) sum log10 p); predictions cover the N real tokens
    (sentence-end events excluded so a fully-OOV text has oov_rate 1).
    """
    n, oov, total_lp = 0, 0, 0.0
    for sent in sentences:
        history = (BOS,)
        for tok in sent:
            total_lp += model.logprob(tok, history)
            n += 1
            if tok not in getattr(model, "vocab", set()):
                oov += 1
            history = history + (tok,)
    if n == 0:
        raise EmptyText("no tokens to evaluate")
    return LmEvalReport(10.0 ** (-total_lp / n), oov / n, n)


class UniformLm:
    """Degenerate uniform model over a fixed vocabulary (testing/decoding)."""

    def __init__(self, vocab):
        self.vocab = set(vocab)
        self.order = 1

    def prob(self, word, history=()):
        return 1.0 / len(self.vocab)

    def logprob(self, word, history=()):
        return -math.log10(len(self.vocab))


class InterpolatedLm:
    """Pointwise convex mixture of component models."""

    def __init__(self, models, weights):
        if len(models) < 2:
            raise ValueError("need at least two models")
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a distribution")
        self.models = list(models)
        self.weights = weights
        self.vocab = set().union(*(m.vocab for m in models))
        self.order = max(getattr(m, "order", 1) for m in models)

    def prob(self, word, history=()):
        return float(sum(w * m.prob(word, history) for w, m in zip(self.weights, self.models)))

    def logprob(self, word, history=()):
        return math.log10(self.prob(word, history))


def interpolate(models, weights):
    return InterpolatedLm(models, weights)


def tune_weights(models, dev_sentences, tol=1e-6, max_iters=200):
    """EM over mixture weights maximizing dev log-likelihood.

    Returns (weights, per-iteration dev log10-likelihood curve).
    """
    events = []
    for sent in dev_sentences:
        history = (BOS,)
        for tok in sent:
            events.append((tok, history))
            history = history + (tok,)
    if not events:
        raise EmptyText("empty dev text")
    probs = np.array([[m.prob(w, h) for m in models] for w, h in events])
    if np.any(probs.sum(axis=1) <= 0):
        raise DegenerateDev("dev text has zero probability under all models")
    k = len(models)
    lam = np.full(k, 1.0 / k)
    curve = []
    prev = -np.inf
    for _ in range(max_iters):
        mix = probs @ lam
        ll = float(np.sum(np.log10(mix)))
        curve.append(ll)
        resp = probs * lam[None, :] / mix[:, None]
        lam = resp.mean(axis=0)
        if ll - prev < tol:
            break
        prev = ll
    return lam, curve


# -- ARPA I/O -------------------------------------------------------------------


def write_arpa(model: NGramModel, path):
    """Export to the standard ARPA text format (log10 probs and backoffs)."""
    grams = [None] + [dict() for _ in range(model.order)]
    # every seen effective gram gets a probability entry
    for k in range(1, model.order + 1):
        for gram in model._eff[k]:
            h, w = gram[:-1], gram[-1]
            grams[k][gram] = model.logprob(w, h)
    # every history of a higher-order gram needs its own entry to carry a backoff
    for k in range(model.order, 1, -1):
        for gram in list(grams[k]):
            h = gram[:-1]
            if h not in grams[k - 1] and h[-1] != BOS:
                grams[k - 1][h] = model.logprob(h[-1], h[:-1])
            elif h not in grams[k - 1]:
                grams[k - 1][h] = -99.0
    # unigram entries for the full prediction vocabulary plus markers
    for w in sorted(model.prediction_vocab()):
        grams[1][(w,)] = model.logprob(w, ())
    grams[1][(BOS,)] = -99.0  # conventional placeholder: BOS is never predicted
    with open(path, "w") as f:
        f.write("\\data\\\n")
        for k in range(1, model.order + 1):
            f.write(f"ngram {k}={len(grams[k])}\n")
        f.write("\n")
        for k in range(1, model.order + 1):
            f.write(f"\\{k}-grams:\n")
            for gram in sorted(grams[k]):
                lp = grams[k][gram]
                line = f"{lp:.7f}\t{' '.join(gram)}"
                if k < model.order:
                    bow = model.backoff_weight(gram)
                    line += f"\t{math.log10(bow) if bow > 0 else -99.0:.7f}"
                f.write(line + "\n")
            f.write("\n")
        f.write("\\end\\\n")


class ArpaModel:
    """Backoff evaluation of an imported ARPA table."""

    def __init__(self, table, order):
        self.table = table  # tuple -> (log10p, bow_log10 or None)
        self.order = order
        self.vocab = {g[0] for g in table if len(g) == 1} - {BOS, UNK}

    def prob(self, word, history=()):
        return 10.0 ** self.logprob(word, history)

    def logprob(self, word, history=()):
        word = word if (word,) in self.table else UNK
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        return self._lp(h + (word,))

    def _lp(self, gram):
        entry = self.table.get(gram)
        if entry is not None:
            return entry[0]
        if len(gram) == 1:
            return self.table[(UNK,)][0]
        h_entry = self.table.get(gram[:-1])
        bow = h_entry[1] if h_entry is not None and h_entry[1] is not None else 0.0
        return bow + self._lp(gram[1:])


def read_arpa(path):
    table = {}
    order = 0
    section = 0
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line in ("\\data\\", "\\end\\"):
                continue
            if line.startswith("ngram "):
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:].split("-")[0])
                order = max(order, section)
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                parts = line.split()
                lp, gram, bow = float(parts[0]), tuple(parts[1 : 1 + section]), parts[1 + section :]
                bow = float(bow[0]) if bow else None
            else:
                lp = float(parts[0])
                gram = tuple(parts[1].split())
                bow = float(parts[2]) if len(parts) > 2 else None
            table[gram] = (lp, bow)
    return ArpaModel(table, order)
