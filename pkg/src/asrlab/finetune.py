"""Supervised hybrid training on frame-level tied-state labels.

Covers SpecAugment, frame-wise cross-entropy (fCE) with optional focal
variant, intermediate losses at chosen encoder blocks, L2 weight penalties,
two-stage on-off regularization, and BLSTM / Transformer / SSL-encoder
baselines with analytic parameter accounting.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .nn.checkpoint import load_into, save_checkpoint
from .nn.layers import BlstmLayer, Linear, TransformerBlock, dropout
from .nn.losses import cross_entropy, focal_loss
from .nn.optim import LrSchedule, Nadam, schedule_rate
from .nn.tensor import Tensor, gelu, mul, tsum
from .wav2vec import EncoderConfig, MaskConfig, QuantizerConfig, Wav2vecModel, sample_time_mask


class LengthMismatch(ValueError):
    pass


class LayerOutOfRange(IndexError):
    pass


# -- SpecAugment -----------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentConfig:
    mode: str = "fraction"  # fraction | span
    time_frac: float = 0.5
    feat_frac: float = 0.1
    max_time_span: int = 10
    max_feat_span: int = 4
    # span mode: independent start points, fixed span lengths (10 time / 64 feature)
    time_start_prob: float = 0.025
    time_span: int = 10
    feat_start_prob: float = 0.004
    feat_span: int = 64


def _fraction_mask(n_total, frac, rng, max_span):
    """Random spans unioned until exactly floor(frac * n_total) cells are set."""
    target = int(frac * n_total)
    mask = np.zeros(n_total, dtype=bool)
    count = 0
    while count < target:
        start = int(rng.integers(n_total))
        length = int(rng.integers(1, max_span + 1))
        for i in range(start, min(start + length, n_total)):
            if not mask[i]:
                mask[i] = True
                count += 1
                if count == target:
                    break
    return mask


def spec_augment(features, cfg: SpecAugmentConfig, rng):
    """Zero out random time frames and feature channels.

    Returns (augmented copy, number of masked cells).
    """
    x = np.array(features, dtype=np.float64)
    t, d = x.shape
    if cfg.mode == "fraction":
        tmask = _fraction_mask(t, cfg.time_frac, rng, cfg.max_time_span)
        fmask = _fraction_mask(d, cfg.feat_frac, rng, cfg.max_feat_span)
    elif cfg.mode == "span":
        tmask = sample_time_mask(t, MaskConfig(cfg.time_start_prob, cfg.time_span), rng)
        fmask = sample_time_mask(d, MaskConfig(cfg.feat_start_prob, cfg.feat_span), rng)
    else:
        raise ValueError(f"unknown SpecAugment mode {cfg.mode!r}")
    x[tmask, :] = 0.0
    x[:, fmask] = 0.0
    cells = int(tmask.sum()) * d + int(fmask.sum()) * (t - int(tmask.sum()))
    return x, cells


# -- encoders --------------------------------------------------------------------


class BlstmEncoder:
    """Stacked bidirectional LSTM; states() yields each layer's output."""

    def __init__(self, d_in, n_layers, hidden, rng, name="blstm_enc"):
        self.layers = []
        d = d_in
        for i in range(n_layers):
            self.layers.append(BlstmLayer(d, hidden, rng, f"{name}.{i}"))
            d = 2 * hidden
        self.out_dim = d

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def states(self, x, drop_p=0.0, rng=None, train=False):
        h = Tensor(np.asarray(x, dtype=np.float64))
        out = []
        for layer in self.layers:
            h = layer(h)
            if train and drop_p > 0.0:
                h = dropout(h, drop_p, rng, train)
            out.append(h)
        return out


class TransformerEncoder:
    """Input projection followed by post-LN transformer blocks."""

    def __init__(self, d_in, n_blocks, d_model, n_heads, d_ff, rng,
                 two_ff=False, name="trafo_enc"):
        self.proj = Linear(d_in, d_model, rng, f"{name}.proj")
        self.blocks = [
            TransformerBlock(d_model, n_heads, d_ff, rng, activation=gelu,
                             two_ff=two_ff, name=f"{name}.{i}")
            for i in range(n_blocks)
        ]
        self.out_dim = d_model

    def parameters(self):
        ps = self.proj.parameters()
        for b in self.blocks:
            ps += b.parameters()
        return ps

    def states(self, x, drop_p=0.0, rng=None, train=False):
        h = self.proj(Tensor(np.asarray(x, dtype=np.float64)))
        out = []
        for blk in self.blocks:
            h = blk(h, drop_p=drop_p, rng=rng, train=train)
            out.append(h)
        return out


class Wav2vecEncoder:
    """Pre-trained (or random) SSL model reused as a supervised encoder.

    With stride-1 convolutions the frame rate is preserved, so frame-level
    alignments line up with encoder outputs.
    """

    def __init__(self, model: Wav2vecModel):
        self.model = model
        self.out_dim = model.enc_cfg.model_dim

    def parameters(self):
        return self.model.parameters()

    def states(self, x, drop_p=0.0, rng=None, train=False):
        z = self.model.encode(x)
        return self.model.context_states(z)


# -- hybrid model ----------------------------------------------------------------


@dataclass(frozen=True)
class IntermediateLossSpec:
    layers: tuple = ()
    scale: float = 0.3
    variant: str = "ICE"  # ICE | IF
    gamma: float = 2.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("scale must be >= 0")
        if self.variant not in ("ICE", "IF"):
            raise ValueError(f"unknown variant {self.variant!r}")


class HybridModel:
    """Encoder plus softmax output head (and one shared intermediate head)."""

    def __init__(self, encoder, n_labels, rng, inter_spec: IntermediateLossSpec = None):
        self.encoder = encoder
        self.n_labels = n_labels
        self.head = Linear(encoder.out_dim, n_labels, rng, "head")
        self.inter_spec = inter_spec or IntermediateLossSpec()
        self.inter_head = (
            Linear(encoder.out_dim, n_labels, rng, "inter_head")
            if self.inter_spec.layers else None
        )

    def parameters(self):
        ps = self.encoder.parameters() + self.head.parameters()
        if self.inter_head is not None:
            ps += self.inter_head.parameters()
        return ps

    def states(self, x, drop_p=0.0, rng=None, train=False):
        return self.encoder.states(x, drop_p=drop_p, rng=rng, train=train)

    def logits(self, x, drop_p=0.0, rng=None, train=False):
        return self.head(self.states(x, drop_p, rng, train)[-1])

    def log_posteriors(self, x):
        """Inference-time [T, S] log softmax; intermediate heads unused."""
        logits = self.logits(x).data
        m = logits.max(axis=1, keepdims=True)
        logz = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        return logits - logz


def attach_output_head(encoder, n_labels, rng, init_state=None,
                       inter_spec: IntermediateLossSpec = None):
    """Hybrid model with a fresh softmax head; encoder weights optionally
    loaded from a pre-training checkpoint (matching names only)."""
    model = HybridModel(encoder, n_labels, rng, inter_spec)
    if init_state is not None:
        load_into(encoder.parameters(), init_state)
    return model


def head_parameter_count(dim, n_labels):
    return dim * n_labels + n_labels


# -- losses ----------------------------------------------------------------------


def fce_loss(logits, alignment, gamma=0.0):
    """Frame-wise CE (or focal at gamma > 0) against aligned label ids."""
    alignment = np.asarray(alignment, dtype=np.int64)
    if logits.shape[0] != len(alignment):
        raise LengthMismatch(f"{logits.shape[0]} frames vs {len(alignment)} labels")
    if gamma > 0:
        return focal_loss(logits, alignment, gamma)
    return cross_entropy(logits, alignment)


def intermediate_loss(states, alignment, spec: IntermediateLossSpec, head,
                      rng=None, train=True):
    """scale * mean over listed layers of (dropout -> shared head -> CE/focal)."""
    if not spec.layers or spec.scale == 0.0:
        return Tensor(np.zeros(()))
    for i in spec.layers:
        if not (0 <= i < len(states)):
            raise LayerOutOfRange(f"layer {i} outside 0..{len(states) - 1}")
    gamma = spec.gamma if spec.variant == "IF" else 0.0
    terms = []
    for i in spec.layers:
        h = dropout(states[i], spec.dropout, rng, train) if rng is not None else states[i]
        terms.append(fce_loss(head(h), alignment, gamma=gamma))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return mul(total, spec.scale / len(spec.layers))


def l2_penalty(weights, lam):
    """lam * sum of squared entries over the given weight matrices."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0.0 or not weights:
        return Tensor(np.zeros(()))
    total = tsum(mul(weights[0], weights[0]))
    for w in weights[1:]:
        total = total + tsum(mul(w, w))
    return mul(total, lam)


def linear_weights(params):
    """The 2-D weight matrices of linear layers (biases and gains excluded)."""
    return [p for p in params if p.data.ndim == 2 and p.name and p.name.endswith(".w")]


# -- fine-tuning loop ------------------------------------------------------------


@dataclass
class FinetuneConfig:
    n_labels: int
    epochs: int = 10
    off_epochs: int = 0  # on-off staging: regularizer-free epochs first
    schedule: LrSchedule = None
    dropout: float = 0.1
    specaugment: SpecAugmentConfig = None  # None disables
    intermediate: IntermediateLossSpec = field(default_factory=IntermediateLossSpec)
    l2: float = 0.0
    batch_shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_labels < 1 or self.epochs < 0 or self.off_epochs < 0:
            raise ValueError("invalid fine-tune config")
        if self.schedule is None:
            self.schedule = LrSchedule.warmup_hold_decay(1e-4, 3e-3, 20, 0, 0.995, 1e-4)


@dataclass
class EpochLog:
    epoch: int
    stage: str  # off | on
    lr: float
    train_loss: float
    dev_frame_acc: float
    masked_cells: int
    dropout_active: bool


def frame_accuracy(model: HybridModel, utts, aligns):
    correct = total = 0
    for x, a in zip(utts, aligns):
        pred = np.argmax(model.log_posteriors(x), axis=1)
        correct += int((pred == np.asarray(a)).sum())
        total += len(a)
    return correct / max(total, 1)


def finetune(train_utts, train_aligns, dev_utts, dev_aligns, model: HybridModel,
             cfg: FinetuneConfig, out_dir=None, log_name="finetune_log.csv"):
    """Two-stage supervised training.

    Stage 'off' (first cfg.off_epochs epochs) disables dropout, SpecAugment,
    and the intermediate/focal losses; the schedule step then resets to 0 and
    all regularizers switch on.  Returns (model, list of EpochLog rows).
    """
    if len(train_utts) != len(train_aligns):
        raise LengthMismatch("corpus/alignment count mismatch")
    rng = np.random.default_rng(cfg.seed)
    opt = Nadam(model.parameters())
    weights = linear_weights(model.parameters())
    logs = []
    step = 0
    for epoch in range(cfg.epochs):
        off = epoch < cfg.off_epochs
        if epoch == cfg.off_epochs:
            step = 0  # learning-rate reset at the stage boundary
        order = rng.permutation(len(train_utts)) if cfg.batch_shuffle else np.arange(len(train_utts))
        tot_loss, masked_cells = 0.0, 0
        gamma = cfg.intermediate.gamma if cfg.intermediate.variant == "IF" else 0.0
        for ui in order:
            x, a = train_utts[ui], train_aligns[ui]
            if not off and cfg.specaugment is not None:
                x, cells = spec_augment(x, cfg.specaugment, rng)
                masked_cells += cells
            drop_p = 0.0 if off else cfg.dropout
            states = model.states(x, drop_p=drop_p, rng=rng, train=True)
            loss = fce_loss(model.head(states[-1]), a, gamma=0.0 if off else gamma)
            if not off and model.inter_head is not None:
                loss = loss + intermediate_loss(states, a, cfg.intermediate,
                                                model.inter_head, rng=rng, train=True)
            if cfg.l2 > 0:
                loss = loss + l2_penalty(weights, cfg.l2)
            opt.zero_grad()
            loss.backward()
            lr = schedule_rate(cfg.schedule, step)
            opt.step(lr=lr)
            step += 1
            tot_loss += float(loss.data)
        acc = frame_accuracy(model, dev_utts, dev_aligns)
        logs.append(EpochLog(epoch, "off" if off else "on",
                             schedule_rate(cfg.schedule, step - 1),
                             tot_loss / max(len(train_utts), 1), acc,
                             masked_cells, not off and cfg.dropout > 0))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, log_name), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "stage", "lr", "train_loss", "dev_frame_acc",
                        "masked_cells", "dropout_active"])
            for row in logs:
                w.writerow([row.epoch, row.stage, f"{row.lr:.6g}",
                            f"{row.train_loss:.6f}", f"{row.dev_frame_acc:.4f}",
                            row.masked_cells, int(row.dropout_active)])
        save_checkpoint(os.path.join(out_dir, "final.ntc"),
                        {p.name: p.data for p in model.parameters()},
                        meta={"epochs": cfg.epochs})
    return model, logs


# -- baselines and parameter accounting --------------------------------------------


def blstm_param_count(d_in, n_layers, hidden):
    total = 0
    d = d_in
    for _ in range(n_layers):
        per_dir = 4 * (d * hidden + hidden * hidden + hidden)
        total += 2 * per_dir
        d = 2 * hidden
    return total


def transformer_param_count(d_in, n_blocks, d_model, d_ff, two_ff=False):
    total = d_in * d_model + d_model  # input projection
    n_ff = 2 if two_ff else 1
    n_ln = 3 if two_ff else 2
    per_block = (4 * d_model * d_model + d_model)  # attention + output bias
    per_block += n_ff * (2 * d_model * d_ff + d_ff + d_model)
    per_block += n_ln * 2 * d_model
    return total + n_blocks * per_block


def wav2vec_param_count(enc_cfg: EncoderConfig, q_cfg: QuantizerConfig):
    total = 0
    cin = enc_cfg.in_channels
    for cout, k, _ in enc_cfg.conv_blocks:
        total += k * cin * cout + cout + 2 * cout  # conv + bias + layer norm
        cin = cout
    d, dm = enc_cfg.latent_dim, enc_cfg.model_dim
    total += d * dm + dm  # latent projection
    total += dm  # mask embedding
    total += enc_cfg.pos_conv_kernel * (dm // enc_cfg.pos_conv_groups) * dm + dm
    total += 2 * dm  # context layer norm
    # transformer blocks via the shared formula, minus its input-projection bias
    total += transformer_param_count(0, enc_cfg.n_transformer_blocks, dm,
                                     enc_cfg.ff_dim) - dm
    g, v, de = q_cfg.n_groups, q_cfg.n_entries, q_cfg.entry_dim
    total += g * v * de
    total += d * g * v + g * v
    total += g * de * q_cfg.out_dim + q_cfg.out_dim
    return total


BASELINES = {
    # encoder-only sizes; the softmax output head is excluded by convention
    "blstm": {"published": dict(n_layers=5, hidden=512),
              "toy": dict(n_layers=2, hidden=16)},
    "transformer": {"published": dict(n_blocks=12, d_model=768, n_heads=12,
                                  d_ff=1536, two_ff=True),
                    "toy": dict(n_blocks=2, d_model=16, n_heads=2,
                                d_ff=32, two_ff=False)},
}

WAV2VEC_ARCHS = {
    # published transformer shapes for the SSL variants
    "base": dict(n_transformer_blocks=12, model_dim=768, n_heads=12, ff_dim=768),
    "large": dict(n_transformer_blocks=24, model_dim=1024, n_heads=16, ff_dim=1024),
    "large_1_8": dict(n_transformer_blocks=8, model_dim=1024, n_heads=16, ff_dim=1024),
}


def baseline_param_count(name, d_in=50, scale="published"):
    if name == "blstm":
        return blstm_param_count(d_in, **BASELINES["blstm"][scale])
    if name == "transformer":
        kw = dict(BASELINES["transformer"][scale])
        kw.pop("n_heads")  # head count does not change the parameter count
        return transformer_param_count(d_in, **kw)
    raise ValueError(f"unknown baseline {name!r}")


def build_supervised_baseline(name, d_in, rng, scale="toy"):
    """Instantiate a named encoder; published scale is intended for accounting
    (use baseline_param_count) rather than toy-machine training."""
    if name == "blstm":
        return BlstmEncoder(d_in, rng=rng, **BASELINES["blstm"][scale])
    if name == "transformer":
        return TransformerEncoder(d_in, rng=rng, **BASELINES["transformer"][scale])
    if name.startswith("wav2vec_"):
        arch = WAV2VEC_ARCHS[name[len("wav2vec_"):]]
        enc_cfg = replace(EncoderConfig.toy(in_channels=d_in), **(
            arch if scale == "published" else {}))
        q_cfg = QuantizerConfig(2, 8, enc_cfg.latent_dim, enc_cfg.model_dim)
        return Wav2vecEncoder(Wav2vecModel(enc_cfg, q_cfg, rng))
    raise ValueError(f"unknown baseline {name!r}")
