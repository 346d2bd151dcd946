"""Toy self-supervised speech representation learning.

Convolutional feature encoder, transformer context network with a grouped
relative-positional convolution, product quantization with straight-through
(Gumbel-)softmax selection, span masking, and the contrastive + diversity
pre-training objective.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import AudioSegment
from .nn.checkpoint import load_checkpoint, load_into, save_checkpoint
from .nn.layers import TooShort, TransformerBlock, conv1d, layer_norm, linear
from .nn.losses import contrastive_loss, diversity_loss
from .nn.optim import LrSchedule, Nadam, schedule_rate
from .nn.tensor import (
    Tensor,
    concat,
    gelu,
    mul,
    narrow,
    parameter,
    reshape,
    softmax,
    tsum,
)


class OddStride(ValueError):
    pass


class TooFewBlocks(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: tuple  # of (channels, kernel, stride)
    in_channels: int = 1
    n_transformer_blocks: int = 2
    model_dim: int = 16
    n_heads: int = 2
    ff_dim: int = 32
    pos_conv_kernel: int = 8
    pos_conv_groups: int = 2
    sample_rate: int = 16000
    dropout: float = 0.0

    @property
    def latent_dim(self):
        return self.conv_blocks[-1][0]

    @staticmethod
    def published_scale():
        kernels = (10, 3, 3, 3, 3, 2, 2)
        strides = (5, 2, 2, 2, 2, 2, 2)
        return EncoderConfig(
            conv_blocks=tuple((512, k, s) for k, s in zip(kernels, strides)),
            n_transformer_blocks=12,
            model_dim=768,
            n_heads=8,
            ff_dim=3072,
            pos_conv_kernel=128,
            pos_conv_groups=16,
        )

    @staticmethod
    def toy(in_channels=1, sample_rate=16000):
        return EncoderConfig(
            conv_blocks=((16, 4, 2), (16, 3, 2)),
            in_channels=in_channels,
            sample_rate=sample_rate,
        )


def total_stride(cfg: EncoderConfig):
    out = 1
    for _, _, s in cfg.conv_blocks:
        out *= s
    return out


def receptive_field(cfg: EncoderConfig):
    rf, jump = 1, 1
    for _, k, s in cfg.conv_blocks:
        rf += (k - 1) * jump
        jump *= s
    return rf


def output_length(cfg: EncoderConfig, n_samples):
    n = int(n_samples)
    if n < receptive_field(cfg):
        raise TooShort(f"{n} samples < receptive field {receptive_field(cfg)}")
    for _, k, s in cfg.conv_blocks:
        # stride-1 blocks run with same-padding and preserve length, so
        # frame-level supervision stays aligned with the input frames
        n = n if s == 1 else (n - k) // s + 1
    return n


def halve_one_stride(cfg: EncoderConfig, layer=None):
    """Halve one conv stride (the first even one by default) for inputs at
    half the sample rate, preserving the output frame duration."""
    blocks = list(cfg.conv_blocks)
    if layer is None:
        evens = [i for i, (_, _, s) in enumerate(blocks) if s % 2 == 0]
        if not evens:
            raise OddStride("no layer with an even stride")
        layer = evens[0]
    c, k, s = blocks[layer]
    if s % 2:
        raise OddStride(f"layer {layer} stride {s} is odd")
    blocks[layer] = (c, k, s // 2)
    return replace(cfg, conv_blocks=tuple(blocks), sample_rate=cfg.sample_rate // 2)


@dataclass(frozen=True)
class QuantizerConfig:
    n_groups: int = 2
    n_entries: int = 8
    dim: int = 16  # latent input dim d
    out_dim: int = 16  # projection target f

    def __post_init__(self):
        if self.dim % self.n_groups:
            raise ShapeMismatch("latent dim must split evenly across groups")
        if self.n_entries < 2:
            raise ValueError("need at least two entries per codebook")

    @property
    def entry_dim(self):
        return self.dim // self.n_groups


@dataclass(frozen=True)
class MaskConfig:
    start_prob: float = 0.065
    span: int = 10

    def __post_init__(self):
        if not (0.0 <= self.start_prob <= 1.0) or self.span < 1:
            raise ValueError("invalid mask config")

    def expected_fraction(self):
        return 1.0 - (1.0 - self.start_prob) ** self.span


def sample_time_mask(t_frames, cfg: MaskConfig, rng):
    """Span mask: every index starts a span of cfg.span with prob start_prob."""
    mask = np.zeros(t_frames, dtype=bool)
    starts = np.flatnonzero(rng.random(t_frames) < cfg.start_prob)
    for i in starts:
        mask[i : i + cfg.span] = True
    return mask


# -- model -----------------------------------------------------------------------


def _winit(rng, shape, fan_in, fan_out, scheme):
    if scheme == "kaiming":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    if scheme == "glorot":
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


class Wav2vecModel:
    """Feature encoder + context network + product quantizer."""

    def __init__(self, enc_cfg: EncoderConfig, q_cfg: QuantizerConfig, rng,
                 init_scheme="kaiming"):
        if q_cfg.dim != enc_cfg.latent_dim:
            raise ShapeMismatch("quantizer input dim must match encoder latents")
        self.enc_cfg = enc_cfg
        self.q_cfg = q_cfg
        self.params = {}

        def add(name, data):
            p = parameter(data, name)
            self.params[name] = p
            return p

        cin = enc_cfg.in_channels
        for i, (cout, k, _) in enumerate(enc_cfg.conv_blocks):
            add(f"encoder.conv{i}.weight", _winit(rng, (k, cin, cout), k * cin, cout, init_scheme))
            add(f"encoder.conv{i}.bias", np.zeros(cout))
            add(f"encoder.conv{i}.ln.gain", np.ones(cout))
            add(f"encoder.conv{i}.ln.bias", np.zeros(cout))
            cin = cout
        d, dm = enc_cfg.latent_dim, enc_cfg.model_dim
        add("proj.weight", _winit(rng, (d, dm), d, dm, init_scheme))
        add("proj.bias", np.zeros(dm))
        add("mask_emb", rng.normal(0.0, 0.1, dm))
        gk, gg = enc_cfg.pos_conv_kernel, enc_cfg.pos_conv_groups
        add("pos_conv.weight", _winit(rng, (gk, dm // gg, dm), gk * dm // gg, dm, init_scheme))
        add("pos_conv.bias", np.zeros(dm))
        add("context.ln.gain", np.ones(dm))
        add("context.ln.bias", np.zeros(dm))
        self.blocks = []
        for i in range(enc_cfg.n_transformer_blocks):
            blk = TransformerBlock(dm, enc_cfg.n_heads, enc_cfg.ff_dim, rng,
                                   activation=gelu, name=f"transformer.{i}")
            self.blocks.append(blk)
            for p in blk.parameters():
                self.params[p.name] = p
        g, v, de = q_cfg.n_groups, q_cfg.n_entries, q_cfg.entry_dim
        add("quantizer.codebooks", rng.normal(0.0, 1.0, (g, v, de)))
        add("quantizer.logits.weight", _winit(rng, (d, g * v), d, g * v, init_scheme))
        add("quantizer.logits.bias", np.zeros(g * v))
        add("quantizer.proj.weight", _winit(rng, (g * de, q_cfg.out_dim), g * de, q_cfg.out_dim, init_scheme))
        add("quantizer.proj.bias", np.zeros(q_cfg.out_dim))

    def parameters(self):
        return list(self.params.values())

    # feature encoder: conv -> layer norm -> GELU per block
    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.enc_cfg.in_channels:
            raise ShapeMismatch(f"expected {self.enc_cfg.in_channels} input channels")
        h = Tensor(x)
        for i, (_, k, s) in enumerate(self.enc_cfg.conv_blocks):
            h = conv1d(h, self.params[f"encoder.conv{i}.weight"], stride=s,
                       pad_same=(s == 1))
            h = h + self.params[f"encoder.conv{i}.bias"]
            h = layer_norm(h, self.params[f"encoder.conv{i}.ln.gain"],
                           self.params[f"encoder.conv{i}.ln.bias"])
            h = gelu(h)
        return h  # [T', d]

    def context_states(self, z, mask=None, n_blocks=None):
        """Per-block hidden states of the context network."""
        h = linear(z, self.params["proj.weight"], self.params["proj.bias"])
        if mask is not None:
            m = mask.astype(np.float64)[:, None]
            h = mul(h, 1.0 - m) + mul(reshape(self.params["mask_emb"], (1, -1)), m)
        pos = conv1d(h, self.params["pos_conv.weight"], stride=1, pad_same=True,
                     groups=self.enc_cfg.pos_conv_groups)
        h = h + pos + self.params["pos_conv.bias"]
        h = layer_norm(h, self.params["context.ln.gain"], self.params["context.ln.bias"])
        blocks = self.blocks if n_blocks is None else self.blocks[:n_blocks]
        states = []
        for blk in blocks:
            h = blk(h)
            states.append(h)
        return states

    def context(self, z, mask=None, n_blocks=None):
        """Project latents, apply optional mask embedding, positional conv,
        and the (optionally truncated) transformer stack."""
        return self.context_states(z, mask=mask, n_blocks=n_blocks)[-1]

    def forward(self, x, mask=None, n_blocks=None):
        return self.context(self.encode(x), mask=mask, n_blocks=n_blocks)

    def quantize(self, z, mode="gumbel", tau=1.0, rng=None):
        """Product quantization with straight-through selection.

        Returns (quantized [T, f], indices [T, G], soft probs [T, G, V]).
        The forward value uses the hard per-group selection; gradients flow
        through the softmax at temperature tau.
        """
        g, v, de = self.q_cfg.n_groups, self.q_cfg.n_entries, self.q_cfg.entry_dim
        logits = linear(z, self.params["quantizer.logits.weight"],
                        self.params["quantizer.logits.bias"])  # [T, G*V]
        t = logits.shape[0]
        books = self.params["quantizer.codebooks"]
        sel_parts, prob_parts, indices = [], [], []
        for gi in range(g):
            # temperature scales the logits before any noise, so tau -> 0
            # makes both the soft distribution and the sampled hard choice
            # collapse onto the argmax entry
            lg = mul(narrow(logits, 1, gi * v, v), 1.0 / tau)  # [T, V]
            if mode == "gumbel":
                if rng is None:
                    raise ValueError("gumbel mode needs an rng")
                u = rng.random((t, v))
                lg = lg + (-np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12))))
            elif mode not in ("hard", "soft"):
                raise ValueError(f"unknown quantize mode {mode!r}")
            probs = softmax(lg, axis=-1)
            idx = np.argmax(lg.data, axis=1)
            book = narrow(books, 0, gi, 1)
            book = reshape(book, (v, de))
            soft_sel = probs @ book  # [T, de]
            if mode == "soft":
                # fully differentiable variant (used by gradient checks)
                sel_parts.append(soft_sel)
            else:
                onehot = np.zeros((t, v))
                onehot[np.arange(t), idx] = 1.0
                hard_val = onehot @ book.data
                sel_parts.append(soft_sel + Tensor(hard_val - soft_sel.data))
            prob_parts.append(reshape(probs, (t, 1, v)))
            indices.append(idx)
        pre = concat(sel_parts, axis=1)  # [T, G*de] = concatenated chosen entries
        q = linear(pre, self.params["quantizer.proj.weight"],
                   self.params["quantizer.proj.bias"])
        return q, np.stack(indices, axis=1), concat(prob_parts, axis=1)

    def quantize_pre_projection(self, z, mode="hard", tau=1.0, rng=None):
        """Concatenated chosen entries before the output projection."""
        g, v, de = self.q_cfg.n_groups, self.q_cfg.n_entries, self.q_cfg.entry_dim
        q, idx, probs = self.quantize(z, mode=mode, tau=tau, rng=rng)
        books = self.params["quantizer.codebooks"].data
        pre = np.concatenate([books[gi, idx[:, gi]] for gi in range(g)], axis=1)
        return pre, idx

    def pretrain_loss(self, x, mask_cfg: MaskConfig, rng, tau=1.0,
                      n_distractors=10, diversity_weight=0.1):
        """Contrastive + diversity objective on one utterance."""
        z = self.encode(x)
        t = z.shape[0]
        mask = sample_time_mask(t, mask_cfg, rng)
        if mask.sum() < 2:  # need a positive and at least one distractor
            mask[rng.choice(t, size=min(2, t), replace=False)] = True
        pos_idx = np.flatnonzero(mask)
        c = self.context(z, mask=mask)
        z_masked = concat([narrow(z, 0, i, 1) for i in pos_idx], axis=0)
        q, _, probs = self.quantize(z_masked, mode="gumbel", tau=tau, rng=rng)
        terms = []
        for row, t_i in enumerate(pos_idx):
            others = np.delete(np.arange(len(pos_idx)), row)
            k = min(n_distractors, len(others))
            picks = rng.choice(others, size=k, replace=len(others) < k)
            distr = concat([narrow(q, 0, int(j), 1) for j in picks], axis=0)
            c_t = reshape(narrow(c, 0, int(t_i), 1), (-1,))
            q_t = reshape(narrow(q, 0, row, 1), (-1,))
            terms.append(contrastive_loss(c_t, q_t, distr, temperature=0.1))
        l_contrastive = sum(terms[1:], terms[0]) * (1.0 / len(terms))
        l_diversity = diversity_loss(probs)
        total = l_contrastive + mul(l_diversity, diversity_weight)
        return total, {
            "contrastive": float(l_contrastive.data),
            "diversity": float(l_diversity.data),
            "masked_frames": int(mask.sum()),
        }


# -- pre-training loop -----------------------------------------------------------


def anneal_tau(epoch, n_epochs, start=2.0, end=0.5):
    if n_epochs <= 1:
        return end
    f = epoch / (n_epochs - 1)
    return start + (end - start) * f


def pretrain(corpus, enc_cfg, q_cfg, out_dir, epochs, seed=0,
             mask_cfg=None, schedule=None, init="random", init_scheme="kaiming",
             n_distractors=10, diversity_weight=0.1, log_name="pretrain_log.csv"):
    """Optimize the contrastive + diversity objective over an unlabeled corpus.

    Writes one checkpoint per epoch plus a CSV loss log; returns the model
    and the per-epoch mean total loss curve.
    """
    if not corpus:
        raise ValueError("empty corpus")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    mask_cfg = mask_cfg or MaskConfig()
    schedule = schedule or LrSchedule.warmup_hold_decay(1e-4, 2e-3, 20, 20, 0.999, 1e-4)
    model = Wav2vecModel(enc_cfg, q_cfg, rng, init_scheme=init_scheme)
    if init != "random":
        state = load_checkpoint(init)
        load_into(model.parameters(), state)
    opt = Nadam(model.parameters())
    step = 0
    curve = []
    log_path = os.path.join(out_dir, log_name)
    paths = []
    with open(log_path, "w", newline="") as logf:
        log = csv.writer(logf)
        log.writerow(["epoch", "loss", "contrastive", "diversity", "lr", "tau"])
        for epoch in range(epochs):
            tau = anneal_tau(epoch, epochs)
            order = rng.permutation(len(corpus))
            tot = np.zeros(3)
            for ui in order:
                loss, stats = model.pretrain_loss(
                    corpus[ui], mask_cfg, rng, tau=tau,
                    n_distractors=n_distractors, diversity_weight=diversity_weight)
                opt.zero_grad()
                loss.backward()
                opt.step(lr=schedule_rate(schedule, step))
                step += 1
                tot += (float(loss.data), stats["contrastive"], stats["diversity"])
            tot /= len(corpus)
            curve.append(tot[0])
            log.writerow([epoch, f"{tot[0]:.6f}", f"{tot[1]:.6f}", f"{tot[2]:.6f}",
                          f"{schedule_rate(schedule, step):.6g}", f"{tau:.4f}"])
            path = os.path.join(out_dir, f"epoch_{epoch + 1:03d}.ntc")
            save_checkpoint(path, {p.name: p.data for p in model.parameters()},
                            meta={"epoch": epoch + 1, "loss": tot[0]})
            paths.append(path)
    return model, curve, paths


def truncate_encoder(state, keep_blocks):
    """Drop transformer blocks beyond keep_blocks from a checkpoint dict."""
    block_ids = {
        int(name.split(".")[1])
        for name in state
        if name.startswith("transformer.")
    }
    n_blocks = max(block_ids) + 1 if block_ids else 0
    if keep_blocks < 1 or keep_blocks > n_blocks:
        raise TooFewBlocks(f"keep_blocks={keep_blocks} outside 1..{n_blocks}")
    out = {}
    for name, arr in state.items():
        if name.startswith("transformer.") and int(name.split(".")[1]) >= keep_blocks:
            continue
        out[name] = arr
    return out


# -- waveform augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    speed: float = 1.0  # e.g. 0.9, 1.1, 1.15
    pitch_cents: float = 0.0  # e.g. drawn from [-350,-250] or [250,350]
    rir: tuple = ()  # impulse response; () disables reverberation


def make_rir(rng, length=200, decay=40.0, wet=0.3):
    """Synthetic exponentially-decaying impulse response with a unit direct path."""
    h = wet * rng.normal(size=length) * np.exp(-np.arange(length) / decay)
    h[0] = 1.0
    return tuple(h)


def _resample_by(x, factor):
    """Playback-speed resampling: output length round(N/factor)."""
    n = len(x)
    m = int(round(n / factor))
    pos = np.minimum(np.arange(m) * factor, n - 1)
    return np.interp(pos, np.arange(n), x)


def augment_waveform(seg: AudioSegment, policy: AugmentPolicy, rng=None):
    x = np.asarray(seg.samples, dtype=np.float64)
    if policy.speed != 1.0:
        x = _resample_by(x, policy.speed)
    if policy.pitch_cents:
        f = 2.0 ** (policy.pitch_cents / 1200.0)
        n = len(x)
        shifted = _resample_by(x, f)
        x = np.interp(np.linspace(0, len(shifted) - 1, n), np.arange(len(shifted)), shifted)
    if policy.rir:
        x = np.convolve(x, np.asarray(policy.rir))[: len(x)]
    if not np.all(np.isfinite(x)):
        raise ValueError("augmentation produced non-finite samples")
    return AudioSegment(x, seg.sample_rate, seg.id)
