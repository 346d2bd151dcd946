"""Classification and self-supervised losses."""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    astensor,
    concat,
    log_softmax,
    mul,
    power,
    reshape,
    texp,
    tlog,
    tmean,
    tsum,
)


class DegenerateVector(ValueError):
    pass


def cross_entropy(logits, labels):
    """Mean -log softmax(logits)[label].  logits: [N, C], labels: [N] ints."""
    logits = astensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logp = log_softmax(logits, axis=-1)
    picked = _gather_labels(logp, labels)
    return -tmean(picked)


def focal_loss(logits, labels, gamma):
    """Mean -(1-p)^gamma * log p over frames; gamma=0 recovers cross-entropy."""
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    logits = astensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logp = _gather_labels(log_softmax(logits, axis=-1), labels)
    if gamma == 0:
        return -tmean(logp)
    weight = power(1.0 - texp(logp) + 1e-300, gamma)
    return -tmean(mul(weight, logp))


def _gather_labels(logp, labels):
    """Pick logp[n, labels[n]] with gradient routing."""
    n, c = logp.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return tsum(mul(logp, Tensor(onehot)), axis=-1)


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    """Cosine similarity between matching rows of a and b."""
    a, b = astensor(a), astensor(b)
    na = power(tsum(mul(a, a), axis=axis, keepdims=True) + eps**2, 0.5)
    nb = power(tsum(mul(b, b), axis=axis, keepdims=True) + eps**2, 0.5)
    dots = tsum(mul(mul(a, power(na, -1.0)), mul(b, power(nb, -1.0))), axis=axis)
    return dots


def contrastive_loss(context, positive, distractors, temperature=0.1):
    """InfoNCE over cosine similarities.

    context, positive: [D]; distractors: [K, D].  The loss is
    -log exp(cos(c,q+)/k) / sum over {q+} u distractors.
    """
    context, positive = astensor(context), astensor(positive)
    distractors = astensor(distractors)
    for v in (context.data, positive.data):
        if np.linalg.norm(v) < 1e-12:
            raise DegenerateVector("zero-norm vector in contrastive loss")
    pos2 = reshape(positive, (1, -1))
    cands = concat([pos2, distractors], axis=0)  # [K+1, D]
    ctx = reshape(context, (1, -1))
    ctx_rep = concat([ctx] * cands.shape[0], axis=0)
    sims = cosine_similarity(ctx_rep, cands)  # [K+1]
    scaled = mul(sims, 1.0 / temperature)
    logp = log_softmax(reshape(scaled, (1, -1)), axis=-1)
    return -tsum(_gather_labels(logp, np.array([0])))


def diversity_loss(soft_probs):
    """Codebook-usage entropy penalty.

    soft_probs: [N, G, V] Tensor of per-step soft codebook distributions.
    L = (G*V - sum_g exp H(mean_n p[n,g,:])) / (G*V); 0 at uniform usage.
    """
    soft_probs = astensor(soft_probs)
    n, g, v = soft_probs.shape
    avg = tmean(soft_probs, axis=0)  # [G, V]
    ent = -tsum(mul(avg, tlog_safe(avg)), axis=-1)  # [G]
    return (g * v - tsum(texp(ent))) * (1.0 / (g * v))


def tlog_safe(a, eps=1e-12):
    return tlog(astensor(a) + eps)
