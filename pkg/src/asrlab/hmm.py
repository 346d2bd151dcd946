"""GMM/HMM acoustic model: topology, emissions, forward-backward, EM.

The transition scheme is the 0-1-2 topology: from each state a frame may
stay, advance one state, or skip one state.  Expanded transcript models are
linear chains entered at state 0 and left from the last state (advance) or
second-to-last state (skip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.tensor import logsumexp_np

VAR_FLOOR = 1e-3
LOG_ZERO = -np.inf


class NoPath(ValueError):
    pass


class TooShort(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroPrior(ValueError):
    pass


@dataclass
class HmmTopology:
    """Per-state log-probs for (stay, advance, skip); rows sum to 1 in prob space."""

    log_probs: np.ndarray  # [3] tied across states

    @staticmethod
    def from_probs(stay, advance, skip):
        p = np.array([stay, advance, skip], dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
            raise ValueError("transition probabilities must be a distribution")
        with np.errstate(divide="ignore"):
            return HmmTopology(np.log(p))

    @staticmethod
    def default():
        return HmmTopology.from_probs(0.5, 0.4, 0.1)


@dataclass
class GmmEmission:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, D]
    variances: np.ndarray  # [K, D]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be a distribution")
        self.variances = np.maximum(self.variances, VAR_FLOOR)

    @property
    def K(self):
        return self.weights.size

    @property
    def D(self):
        return self.means.shape[1]

    def component_log_densities(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.D:
            raise DimensionMismatch(f"x has dim {x.shape[-1]}, model {self.D}")
        diff = x[..., None, :] - self.means  # [..., K, D]
        ll = -0.5 * np.sum(
            np.log(2 * np.pi * self.variances) + diff**2 / self.variances, axis=-1
        )
        with np.errstate(divide="ignore"):
            return ll + np.log(self.weights)

    def log_density(self, x):
        """log sum_i c_i N(x | mu_i, sigma_i^2) via log-sum-exp."""
        return logsumexp_np(self.component_log_densities(x), axis=-1)


def gmm_log_density(x, g: GmmEmission):
    return float(g.log_density(np.asarray(x)))


@dataclass
class ChainHmm:
    """Expanded transcript model: linear chain of emitting states."""

    state_ids: np.ndarray  # [S] tied-state (label) id per chain position
    topology: HmmTopology

    @property
    def n_states(self):
        return len(self.state_ids)

    def transition_matrix(self):
        """Dense [S, S] log transitions plus [S] exit log-probs."""
        s = self.n_states
        stay, adv, skip = self.topology.log_probs
        trans = np.full((s, s), LOG_ZERO)
        for i in range(s):
            trans[i, i] = stay
            if i + 1 < s:
                trans[i, i + 1] = adv
            if i + 2 < s:
                trans[i, i + 2] = skip
        exit_lp = np.full(s, LOG_ZERO)
        exit_lp[s - 1] = adv
        if s >= 2:
            exit_lp[s - 2] = skip
        return trans, exit_lp


def emission_score_matrix(obs, emissions, state_ids):
    """[T, S] log emission scores for chain positions with given label ids."""
    obs = np.atleast_2d(obs)
    t = obs.shape[0]
    uniq = sorted(set(int(i) for i in state_ids))
    per_label = {lid: emissions[lid].log_density(obs) for lid in uniq}
    return np.stack([per_label[int(lid)] for lid in state_ids], axis=1)


def _forward(scores, hmm: ChainHmm):
    t_len, s = scores.shape
    trans, exit_lp = hmm.transition_matrix()
    alpha = np.full((t_len, s), LOG_ZERO)
    alpha[0, 0] = scores[0, 0]  # entry at chain position 0
    for t in range(1, t_len):
        alpha[t] = logsumexp_np(alpha[t - 1][:, None] + trans, axis=0) + scores[t]
    total = logsumexp_np(alpha[-1] + exit_lp)
    return alpha, exit_lp, trans, total


def forward_log_likelihood(obs_scores, hmm: ChainHmm):
    """log p(x | w): sum over all legal alignments of the chain."""
    _, _, _, total = _forward(obs_scores, hmm)
    if not np.isfinite(total):
        raise NoPath("no legal alignment")
    return float(total)


def forward_backward_posteriors(obs_scores, hmm: ChainHmm):
    """[T, S] state-occupancy posteriors; rows sum to 1."""
    alpha, exit_lp, trans, total = _forward(obs_scores, hmm)
    if not np.isfinite(total):
        raise NoPath("no legal alignment")
    t_len, s = obs_scores.shape
    beta = np.full((t_len, s), LOG_ZERO)
    beta[-1] = exit_lp
    for t in range(t_len - 2, -1, -1):
        beta[t] = logsumexp_np(trans + (obs_scores[t + 1] + beta[t + 1])[None, :], axis=1)
    gamma = alpha + beta - total
    post = np.exp(gamma)
    post /= post.sum(axis=1, keepdims=True)
    return post


def viterbi_align(obs_scores, hmm: ChainHmm):
    """(best path over chain positions, best-path log score)."""
    t_len, s = obs_scores.shape
    trans, exit_lp = hmm.transition_matrix()
    delta = np.full((t_len, s), LOG_ZERO)
    back = np.zeros((t_len, s), dtype=np.int64)
    delta[0, 0] = obs_scores[0, 0]
    for t in range(1, t_len):
        cand = delta[t - 1][:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta[t] = cand[back[t], np.arange(s)] + obs_scores[t]
    final = delta[-1] + exit_lp
    best_end = int(np.argmax(final))
    best = final[best_end]
    if not np.isfinite(best):
        raise NoPath("no legal alignment")
    path = np.zeros(t_len, dtype=np.int64)
    path[-1] = best_end
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(best)


def linear_alignment(t_frames, state_seq):
    """Contiguous blocks of size floor(T/S) or ceil(T/S); extras go earliest."""
    s = len(state_seq)
    if t_frames < s:
        raise TooShort(f"{t_frames} frames for {s} states")
    base, rem = divmod(t_frames, s)
    out = []
    for i, st in enumerate(state_seq):
        out.extend([st] * (base + (1 if i < rem else 0)))
    return np.array(out, dtype=np.int64)


def posterior_to_scaled_likelihood(nn_posteriors, state_priors):
    """log p(a_s | x) - log p(a_s): posterior-to-likelihood conversion."""
    post = np.atleast_2d(np.asarray(nn_posteriors, dtype=np.float64))
    priors = np.asarray(state_priors, dtype=np.float64)
    if np.any(priors <= 0):
        raise ZeroPrior("all state priors must be positive")
    if abs(priors.sum() - 1.0) > 1e-6:
        raise ValueError("priors must sum to 1")
    if np.any(np.abs(post.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("posterior rows must sum to 1")
    return np.log(np.maximum(post, 1e-300)) - np.log(priors)[None, :]


# -- trainable monophone model --------------------------------------------------


@dataclass
class HmmAcousticModel:
    """State inventory with one GmmEmission per (phone, sub-state) label."""

    phones: list
    n_states_per_phone: int
    emissions: list  # GmmEmission per label id
    topology: HmmTopology
    label_names: list = field(default_factory=list)

    def label_id(self, phone, sub_state):
        return self.phones.index(phone) * self.n_states_per_phone + sub_state

    @property
    def n_labels(self):
        return len(self.emissions)

    def state_sequence(self, phone_seq):
        seq = []
        for ph in phone_seq:
            base = self.phones.index(ph) * self.n_states_per_phone
            seq.extend(range(base, base + self.n_states_per_phone))
        return np.array(seq, dtype=np.int64)

    def chain_for(self, phone_seq):
        return ChainHmm(self.state_sequence(phone_seq), self.topology)

    def copy(self):
        return HmmAcousticModel(
            list(self.phones),
            self.n_states_per_phone,
            [GmmEmission(e.weights.copy(), e.means.copy(), e.variances.copy())
             for e in self.emissions],
            HmmTopology(self.topology.log_probs.copy()),
            list(self.label_names),
        )


def init_model_from_linear_alignment(corpus, phones, n_states_per_phone=1,
                                     topology=None):
    """Seed a K=1 model from the uniform (linear) alignment of each utterance.

    corpus: iterable of (frames [T, D], phone sequence).
    """
    topology = topology or HmmTopology.default()
    n_labels = len(phones) * n_states_per_phone
    d = np.atleast_2d(corpus[0][0]).shape[1]
    occ = np.zeros(n_labels)
    s1 = np.zeros((n_labels, d))
    s2 = np.zeros((n_labels, d))
    proto = HmmAcousticModel(list(phones), n_states_per_phone, [], topology)
    for frames, phone_seq in corpus:
        frames = np.atleast_2d(frames)
        seq = proto.state_sequence(phone_seq)
        align = linear_alignment(frames.shape[0], seq)
        for lid in np.unique(align):
            sel = frames[align == lid]
            occ[lid] += sel.shape[0]
            s1[lid] += sel.sum(axis=0)
            s2[lid] += (sel**2).sum(axis=0)
    emissions = []
    global_mean = s1.sum(axis=0) / max(occ.sum(), 1.0)
    for lid in range(n_labels):
        if occ[lid] > 0:
            mu = s1[lid] / occ[lid]
            var = s2[lid] / occ[lid] - mu**2
        else:
            mu, var = global_mean.copy(), np.ones(d)
        emissions.append(GmmEmission(np.ones(1), mu[None, :], np.maximum(var, VAR_FLOOR)[None, :]))
    proto.emissions = emissions
    return proto


def split_heaviest_component(g: GmmEmission, rng=None):
    """Binary split of the heaviest mixture component, means perturbed +-0.1 sigma."""
    k = int(np.argmax(g.weights))
    sigma = np.sqrt(g.variances[k])
    mu_a = g.means[k] + 0.1 * sigma
    mu_b = g.means[k] - 0.1 * sigma
    weights = np.concatenate([g.weights, [g.weights[k] / 2.0]])
    weights[k] /= 2.0
    means = np.concatenate([g.means, mu_b[None, :]], axis=0)
    means[k] = mu_a
    variances = np.concatenate([g.variances, g.variances[k : k + 1]], axis=0)
    return GmmEmission(weights / weights.sum(), means, variances)


def baum_welch_train(corpus, model: HmmAcousticModel, iters, k_schedule=None,
                     update_transitions=True):
    """EM training; returns (model, log-likelihood curve, skipped count).

    corpus: list of (frames [T, D], phone sequence).  k_schedule maps
    iteration index -> target mixture count; components are grown by binary
    splitting after the M-step of that iteration.
    """
    model = model.copy()
    k_schedule = k_schedule or {}
    ll_curve = []
    skipped = 0
    for it in range(iters):
        n_labels = model.n_labels
        d = model.emissions[0].D
        occ = [np.zeros(e.K) for e in model.emissions]
        s1 = [np.zeros((e.K, d)) for e in model.emissions]
        s2 = [np.zeros((e.K, d)) for e in model.emissions]
        trans_counts = np.zeros(3)
        total_ll = 0.0
        used = 0
        for frames, phone_seq in corpus:
            frames = np.atleast_2d(frames)
            chain = model.chain_for(phone_seq)
            scores = emission_score_matrix(frames, model.emissions, chain.state_ids)
            try:
                gamma = forward_backward_posteriors(scores, chain)
                ll = forward_log_likelihood(scores, chain)
            except NoPath:
                skipped += 1
                continue
            used += 1
            total_ll += ll
            # per-label occupancy with mixture responsibilities
            for pos, lid in enumerate(chain.state_ids):
                lid = int(lid)
                g = model.emissions[lid]
                comp = g.component_log_densities(frames)  # [T, K]
                comp = np.exp(comp - logsumexp_np(comp, axis=-1)[:, None])
                w = gamma[:, pos][:, None] * comp
                occ[lid] += w.sum(axis=0)
                s1[lid] += w.T @ frames
                s2[lid] += w.T @ (frames**2)
            if update_transitions:
                trans_counts += _expected_transition_counts(scores, chain, ll)
        if used == 0:
            raise NoPath("every utterance was skipped")
        ll_curve.append(total_ll)
        # M-step
        for lid in range(n_labels):
            tot = occ[lid].sum()
            if tot < 1e-8:
                continue
            g = model.emissions[lid]
            w = np.maximum(occ[lid], 1e-10)
            mu = s1[lid] / w[:, None]
            var = s2[lid] / w[:, None] - mu**2
            model.emissions[lid] = GmmEmission(w / w.sum(), mu, np.maximum(var, VAR_FLOOR))
        if update_transitions and trans_counts.sum() > 0:
            probs = np.maximum(trans_counts, 1e-10)
            model.topology = HmmTopology(np.log(probs / probs.sum()))
        target_k = k_schedule.get(it) if isinstance(k_schedule, dict) else None
        if target_k:
            for lid in range(n_labels):
                while model.emissions[lid].K < target_k:
                    model.emissions[lid] = split_heaviest_component(model.emissions[lid])
    return model, ll_curve, skipped


def _expected_transition_counts(scores, hmm: ChainHmm, total_ll):
    """Expected (stay, advance, skip) counts from the xi statistics."""
    t_len, s = scores.shape
    trans, exit_lp = hmm.transition_matrix()
    alpha = np.full((t_len, s), LOG_ZERO)
    alpha[0, 0] = scores[0, 0]
    for t in range(1, t_len):
        alpha[t] = logsumexp_np(alpha[t - 1][:, None] + trans, axis=0) + scores[t]
    beta = np.full((t_len, s), LOG_ZERO)
    beta[-1] = exit_lp
    for t in range(t_len - 2, -1, -1):
        beta[t] = logsumexp_np(trans + (scores[t + 1] + beta[t + 1])[None, :], axis=1)
    counts = np.zeros(3)
    for t in range(t_len - 1):
        xi = alpha[t][:, None] + trans + (scores[t + 1] + beta[t + 1])[None, :] - total_ll
        xi = np.exp(xi)
        counts[0] += np.trace(xi)
        counts[1] += np.trace(xi, offset=1)
        counts[2] += np.trace(xi, offset=2)
    return counts
