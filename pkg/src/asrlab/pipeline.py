"""End-to-end experiment orchestration with content-addressed stage caching.

The pipeline synthesizes a corpus, trains a GMM/HMM baseline, produces frame
alignments, pre-trains a small self-supervised encoder on the unlabeled
split, fine-tunes hybrid models from scratch and from the pre-trained
checkpoint, decodes the dev split with a Kneser-Ney language model, and
reports WER per system.  Each stage writes into a directory named by a hash
of its own configuration and its upstream stage keys, so re-running with an
unchanged configuration is a cache hit and changing any upstream input
re-executes every dependent stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .decoder import (DecodeConfig, GmmAcoustic, Lexicon, MatrixAcoustic,
                      WerBreakdown, decode, format_transcript_lines,
                      monophone_labeler, parse_transcript_lines, score_corpus)
from .finetune import FinetuneConfig, Wav2vecEncoder, attach_output_head, finetune
from .hmm import (GmmEmission, HmmAcousticModel, HmmTopology, baum_welch_train,
                  emission_score_matrix, init_model_from_linear_alignment,
                  viterbi_align)
from .lm import train_lm
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .synth import CorpusManifest, SynthConfig, load_features, synth_corpus
from .wav2vec import EncoderConfig, MaskConfig, QuantizerConfig, Wav2vecModel, pretrain

CACHE_ENV = "ASRLAB_CACHE"
SYSTEMS = ("gmm", "pretrained", "scratch")


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    n_states_per_phone: int = 1
    gmm_iters: int = 4
    lm_order: int = 3
    pretrain_epochs: int = 6
    finetune_epochs: int = 12
    off_epochs: int = 0
    dropout: float = 0.0
    l2: float = 0.0
    am_scale: float = 1.0
    lm_scale: float = 1.0
    # Scaled posterior likelihoods have a much smaller dynamic range than GMM
    # log densities, so the neural systems decode with a lighter LM weight.
    hybrid_lm_scale: float = 0.3
    beam_logwidth: float = 100.0

    def encoder_config(self):
        """Frame-rate-preserving (stride 1, same-padded) conv front end over
        the synthetic feature dimension."""
        return EncoderConfig(conv_blocks=((16, 3, 1), (16, 3, 1)),
                             in_channels=self.synth.dim)

    def quantizer_config(self):
        return QuantizerConfig(n_groups=2, n_entries=8, dim=16, out_dim=16)

    def decode_config(self, hybrid=False):
        return DecodeConfig(am_scale=self.am_scale,
                            lm_scale=self.hybrid_lm_scale if hybrid else self.lm_scale,
                            beam_logwidth=self.beam_logwidth)


def _stable(obj):
    """Canonical string for hashing: dataclasses and dicts are flattened with
    sorted keys so the digest is independent of insertion order."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _stable({"__class__": type(obj).__name__,
                        **dataclasses.asdict(obj)})
    if isinstance(obj, dict):
        return "{" + ",".join(f"{k}:{_stable(obj[k])}" for k in sorted(obj)) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_stable(v) for v in obj) + "]"
    return repr(obj)


def stage_key(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(_stable(p).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def cache_root(work_dir=None):
    return work_dir or os.environ.get(CACHE_ENV) or os.path.join(os.getcwd(), ".asrlab_cache")


class StageRunner:
    """Executes stage functions inside content-addressed cache directories.

    A stage directory containing the DONE marker is a cache hit and its
    function is skipped; a directory without the marker (crashed run) is
    re-populated.  `executed` records the stages actually run this session.
    """

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.executed = []

    def run(self, name, key, fn):
        d = os.path.join(self.root, f"{name}-{key}")
        marker = os.path.join(d, "DONE")
        if os.path.exists(marker):
            return d
        os.makedirs(d, exist_ok=True)
        try:
            fn(d)
        except Exception as e:  # noqa: BLE001 - annotate with the stage name
            raise StageFailure(name, e) from e
        with open(marker, "w") as f:
            f.write(key + "\n")
        self.executed.append(name)
        return d


# -- GMM serialization -------------------------------------------------------


def save_gmm(path, model: HmmAcousticModel):
    arrays = {"log_probs": model.topology.log_probs,
              "n_states_per_phone": np.array(model.n_states_per_phone),
              "phones": np.array(model.phones)}
    for i, e in enumerate(model.emissions):
        arrays[f"w{i}"] = e.weights
        arrays[f"m{i}"] = e.means
        arrays[f"v{i}"] = e.variances
    np.savez(path, **arrays)


def load_gmm(path):
    z = np.load(path, allow_pickle=False)
    phones = [str(p) for p in z["phones"]]
    n_states = int(z["n_states_per_phone"])
    emissions = [GmmEmission(z[f"w{i}"], z[f"m{i}"], z[f"v{i}"])
                 for i in range(len(phones) * n_states)]
    return HmmAcousticModel(phones, n_states, emissions, HmmTopology(z["log_probs"]))


# -- stage bodies ------------------------------------------------------------


def _load_corpus(synth_dir):
    manifest = CorpusManifest.load(os.path.join(synth_dir, "manifest.jsonl"))
    lexicon = Lexicon.load(os.path.join(synth_dir, "lexicon.txt"))
    phones = lexicon.phone_set()
    with open(os.path.join(synth_dir, "lm_train.txt")) as f:
        lm_corpus = [line.split() for line in f if line.strip()]
    return manifest, lexicon, phones, lm_corpus


def _phone_seq(lexicon, transcript):
    return [p for w in transcript for p in lexicon.prons(w)[0]]


def _labelled_corpus(manifest, lexicon, split):
    return [(load_features(e), _phone_seq(lexicon, e.transcript))
            for e in manifest.split(split)]


def _train_gmm(d, cfg, manifest, lexicon, phones):
    corpus = _labelled_corpus(manifest, lexicon, "train")
    model = init_model_from_linear_alignment(corpus, phones,
                                             cfg.n_states_per_phone)
    model, curve, _ = baum_welch_train(corpus, model, cfg.gmm_iters)
    save_gmm(os.path.join(d, "gmm.npz"), model)
    np.savetxt(os.path.join(d, "ll_curve.txt"), np.asarray(curve))


def _align(d, cfg, manifest, lexicon, model):
    """Frame-level Viterbi label alignments for the train and dev splits."""
    out = {}
    for split in ("train", "dev"):
        for e in manifest.split(split):
            feats = load_features(e)
            seq = model.state_sequence(_phone_seq(lexicon, e.transcript))
            scores = emission_score_matrix(feats, model.emissions, seq)
            path, _ = viterbi_align(scores, model.chain_for(
                _phone_seq(lexicon, e.transcript)))
            out[e.id] = seq[path]
    np.savez(os.path.join(d, "alignments.npz"), **out)


def _pretrain(d, cfg, manifest):
    feats = [load_features(e) for e in manifest.split("pretrain")]
    pretrain(feats, cfg.encoder_config(), cfg.quantizer_config(), d,
             epochs=cfg.pretrain_epochs, seed=cfg.seed,
             mask_cfg=MaskConfig(start_prob=0.15, span=3))


def _finetune(d, cfg, manifest, aligns, n_labels, init_path):
    rng = np.random.default_rng(cfg.seed + 1)
    encoder = Wav2vecEncoder(Wav2vecModel(cfg.encoder_config(),
                                          cfg.quantizer_config(), rng))
    init_state = load_checkpoint(init_path) if init_path else None
    model = attach_output_head(encoder, n_labels, rng, init_state=init_state)
    tr = manifest.split("train")
    dv = manifest.split("dev")
    ft_cfg = FinetuneConfig(n_labels=n_labels, epochs=cfg.finetune_epochs,
                            off_epochs=cfg.off_epochs, dropout=cfg.dropout,
                            l2=cfg.l2, seed=cfg.seed)
    finetune([load_features(e) for e in tr], [aligns[e.id] for e in tr],
             [load_features(e) for e in dv], [aligns[e.id] for e in dv],
             model, ft_cfg, out_dir=d)
    counts = np.full(n_labels, 0.5)
    for e in tr:
        counts += np.bincount(aligns[e.id], minlength=n_labels)
    np.save(os.path.join(d, "priors.npy"), counts / counts.sum())


def _load_hybrid(cfg, n_labels, ft_dir):
    rng = np.random.default_rng(cfg.seed + 1)
    encoder = Wav2vecEncoder(Wav2vecModel(cfg.encoder_config(),
                                          cfg.quantizer_config(), rng))
    model = attach_output_head(encoder, n_labels, rng,
                               init_state=load_checkpoint(
                                   os.path.join(ft_dir, "final.ntc")))
    priors = np.load(os.path.join(ft_dir, "priors.npy"))
    return model, priors


def _decode_split(d, cfg, manifest, lexicon, lm, gmm, hybrids, split="dev"):
    """One hypothesis file per system; hybrid systems decode scaled
    likelihoods (log posterior minus log prior) over the GMM label set."""
    labeler = monophone_labeler(gmm)
    for system in SYSTEMS:
        dcfg = cfg.decode_config(hybrid=system != "gmm")
        hyps = {}
        for e in manifest.split(split):
            feats = load_features(e)
            if system == "gmm":
                am = GmmAcoustic(gmm)
            else:
                model, priors = hybrids[system]
                matrix = model.log_posteriors(feats) - np.log(priors)[None, :]
                am = MatrixAcoustic(matrix, labeler, gmm.topology)
            hyps[e.id] = decode(feats, am, lm, lexicon, dcfg).words
        with open(os.path.join(d, f"hyp_{system}.txt"), "w") as f:
            f.write(format_transcript_lines(hyps))


def _score(d, manifest, decode_dir, split="dev"):
    refs = {e.id: list(e.transcript) for e in manifest.split(split)}
    report = {}
    for system in SYSTEMS:
        with open(os.path.join(decode_dir, f"hyp_{system}.txt")) as f:
            hyps = parse_transcript_lines(f.read())
        for uid in refs:
            hyps.setdefault(uid, [])
        report[system] = score_corpus(refs, hyps)
    text, csv_text = report_tables(report)
    with open(os.path.join(d, "report.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(d, "report.csv"), "w") as f:
        f.write(csv_text)
    return report


# -- reports -----------------------------------------------------------------


def report_tables(report):
    """(aligned text table, CSV text) over systems in sorted order."""
    header = ("system", "sub", "del", "ins", "err", "ref", "wer%")
    rows = [(name, b.substitutions, b.deletions, b.insertions, b.errors,
             b.reference_words, f"{100.0 * b.wer:.2f}")
            for name, b in sorted(report.items())]
    cols = [header] + [tuple(str(v) for v in r) for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    lines = ["  ".join(r[i].ljust(widths[i]) for i in range(len(header))).rstrip()
             for r in cols]
    text = "\n".join(lines) + "\n"
    buf = io.StringIO()
    buf.write("system,substitutions,deletions,insertions,reference_words\n")
    for name, b in sorted(report.items()):
        buf.write(f"{name},{b.substitutions},{b.deletions},{b.insertions},"
                  f"{b.reference_words}\n")
    return text, buf.getvalue()


def parse_report_csv(text):
    report = {}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    for line in lines[1:]:
        name, subs, dels, ins, ref = line.split(",")
        report[name] = WerBreakdown(int(subs), int(ins), int(dels), int(ref))
    return report


# -- top level ---------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: PipelineConfig
    report: dict  # system -> WerBreakdown
    stage_dirs: dict
    executed: list
    report_text: str
    report_csv: str


def run_experiment(cfg: PipelineConfig, work_dir=None):
    """Full synth -> GMM -> align -> pretrain -> finetune -> decode -> score
    pipeline with per-stage caching under work_dir (or $ASRLAB_CACHE)."""
    runner = StageRunner(cache_root(work_dir))
    dirs = {}

    k_synth = stage_key("synth", cfg.synth)
    dirs["synth"] = runner.run("synth", k_synth,
                               lambda d: synth_corpus(cfg.synth, d))
    manifest, lexicon, phones, lm_corpus = _load_corpus(dirs["synth"])

    k_gmm = stage_key("gmm", k_synth, cfg.n_states_per_phone, cfg.gmm_iters)
    dirs["gmm"] = runner.run("gmm", k_gmm,
                             lambda d: _train_gmm(d, cfg, manifest, lexicon, phones))
    gmm = load_gmm(os.path.join(dirs["gmm"], "gmm.npz"))

    k_align = stage_key("align", k_gmm)
    dirs["align"] = runner.run("align", k_align,
                               lambda d: _align(d, cfg, manifest, lexicon, gmm))
    aligns = dict(np.load(os.path.join(dirs["align"], "alignments.npz")))

    k_pre = stage_key("pretrain", k_synth, cfg.pretrain_epochs, cfg.seed,
                      cfg.encoder_config(), cfg.quantizer_config())
    dirs["pretrain"] = runner.run("pretrain", k_pre,
                                  lambda d: _pretrain(d, cfg, manifest))
    last_ckpt = os.path.join(dirs["pretrain"],
                             f"epoch_{cfg.pretrain_epochs:03d}.ntc")

    ft_common = (k_align, cfg.finetune_epochs, cfg.off_epochs, cfg.dropout,
                 cfg.l2, cfg.seed)
    n_labels = gmm.n_labels
    for system, init in (("scratch", None), ("pretrained", last_ckpt)):
        k_ft = stage_key("finetune", system, *ft_common,
                         k_pre if init else "random")
        dirs[f"finetune_{system}"] = runner.run(
            f"finetune_{system}", k_ft,
            lambda d, init=init: _finetune(d, cfg, manifest, aligns,
                                           n_labels, init))

    lm = train_lm(lm_corpus, order=cfg.lm_order)
    hybrids = {s: _load_hybrid(cfg, n_labels, dirs[f"finetune_{s}"])
               for s in ("scratch", "pretrained")}

    k_dec = stage_key("decode", k_gmm,
                      stage_key("x", *[dirs[f"finetune_{s}"] for s in
                                       ("scratch", "pretrained")]),
                      cfg.lm_order, cfg.decode_config())
    dirs["decode"] = runner.run(
        "decode", k_dec,
        lambda d: _decode_split(d, cfg, manifest, lexicon, lm, gmm, hybrids))

    k_score = stage_key("score", k_dec)
    dirs["score"] = runner.run(
        "score", k_score, lambda d: _score(d, manifest, dirs["decode"]))
    with open(os.path.join(dirs["score"], "report.txt")) as f:
        text = f.read()
    with open(os.path.join(dirs["score"], "report.csv")) as f:
        csv_text = f.read()
    return ExperimentResult(cfg, parse_report_csv(csv_text), dirs,
                            list(runner.executed), text, csv_text)


def checkpoint_sweep(cfg: PipelineConfig, work_dir=None, epochs=None):
    """Fine-tune + decode + score once per pre-training checkpoint.

    epochs selects which checkpoints to sweep (default: all).  Writes
    sweep.csv (epoch, dev WER) under the cache root and returns its rows as
    (epoch, WerBreakdown) pairs.
    """
    runner = StageRunner(cache_root(work_dir))
    k_synth = stage_key("synth", cfg.synth)
    synth_dir = runner.run("synth", k_synth,
                           lambda d: synth_corpus(cfg.synth, d))
    manifest, lexicon, phones, lm_corpus = _load_corpus(synth_dir)

    k_gmm = stage_key("gmm", k_synth, cfg.n_states_per_phone, cfg.gmm_iters)
    gmm_dir = runner.run("gmm", k_gmm,
                         lambda d: _train_gmm(d, cfg, manifest, lexicon, phones))
    gmm = load_gmm(os.path.join(gmm_dir, "gmm.npz"))
    k_align = stage_key("align", k_gmm)
    align_dir = runner.run("align", k_align,
                           lambda d: _align(d, cfg, manifest, lexicon, gmm))
    aligns = dict(np.load(os.path.join(align_dir, "alignments.npz")))

    k_pre = stage_key("pretrain", k_synth, cfg.pretrain_epochs, cfg.seed,
                      cfg.encoder_config(), cfg.quantizer_config())
    pre_dir = runner.run("pretrain", k_pre, lambda d: _pretrain(d, cfg, manifest))

    epochs = list(epochs) if epochs is not None else list(
        range(1, cfg.pretrain_epochs + 1))
    if len(epochs) < 2:
        raise ValueError("a sweep needs at least two checkpoints")
    lm = train_lm(lm_corpus, order=cfg.lm_order)
    n_labels = gmm.n_labels
    rows = []
    for ep in epochs:
        ckpt = os.path.join(pre_dir, f"epoch_{ep:03d}.ntc")
        k_ft = stage_key("sweep_ft", k_align, k_pre, ep, cfg.finetune_epochs,
                         cfg.off_epochs, cfg.dropout, cfg.l2, cfg.seed)
        ft_dir = runner.run(f"sweep_ft_{ep:03d}", k_ft,
                            lambda d, c=ckpt: _finetune(d, cfg, manifest,
                                                        aligns, n_labels, c))
        hybrids = {"pretrained": _load_hybrid(cfg, n_labels, ft_dir)}
        k_dec = stage_key("sweep_dec", k_ft, k_gmm, cfg.lm_order,
                          cfg.decode_config())

        def _dec(d, h=hybrids):
            dcfg = cfg.decode_config(hybrid=True)
            labeler = monophone_labeler(gmm)
            model, priors = h["pretrained"]
            hyps = {}
            for e in manifest.split("dev"):
                feats = load_features(e)
                matrix = model.log_posteriors(feats) - np.log(priors)[None, :]
                am = MatrixAcoustic(matrix, labeler, gmm.topology)
                hyps[e.id] = decode(feats, am, lm, lexicon, dcfg).words
            with open(os.path.join(d, "hyp_pretrained.txt"), "w") as f:
                f.write(format_transcript_lines(hyps))

        dec_dir = runner.run(f"sweep_dec_{ep:03d}", k_dec, _dec)
        refs = {e.id: list(e.transcript) for e in manifest.split("dev")}
        with open(os.path.join(dec_dir, "hyp_pretrained.txt")) as f:
            hyps = parse_transcript_lines(f.read())
        for uid in refs:
            hyps.setdefault(uid, [])
        rows.append((ep, score_corpus(refs, hyps)))

    sweep_path = os.path.join(runner.root, "sweep.csv")
    with open(sweep_path, "w") as f:
        f.write("checkpoint_epoch,errors,reference_words,wer\n")
        for ep, b in rows:
            f.write(f"{ep},{b.errors},{b.reference_words},{b.wer:.6f}\n")
    return rows, sweep_path
