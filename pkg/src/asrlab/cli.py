"""Command-line interface: one subcommand per pipeline stage plus `run` and
`sweep` for the cached end-to-end experiment."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .decoder import (DecodeConfig, GmmAcoustic, Lexicon, MatrixAcoustic,
                      decode, format_transcript_lines, monophone_labeler,
                      parse_transcript_lines, score_corpus)
from .features import GammatoneConfig, MfccConfig, gammatone_features, mfcc
from .finetune import Wav2vecEncoder, attach_output_head, finetune, FinetuneConfig
from .hmm import (baum_welch_train, emission_score_matrix,
                  init_model_from_linear_alignment, viterbi_align)
from .lm import evaluate, read_arpa, train_lm, write_arpa
from .nn.checkpoint import load_checkpoint
from .pipeline import (PipelineConfig, checkpoint_sweep, load_gmm,
                       run_experiment, save_gmm)
from .synth import CorpusManifest, SynthConfig, load_features, synth_corpus
from .wav2vec import EncoderConfig, MaskConfig, QuantizerConfig, Wav2vecModel, pretrain


def _corpus_paths(data_dir):
    manifest = CorpusManifest.load(os.path.join(data_dir, "manifest.jsonl"))
    lexicon = Lexicon.load(os.path.join(data_dir, "lexicon.txt"))
    return manifest, lexicon


def _phone_seq(lexicon, transcript):
    return [p for w in transcript for p in lexicon.prons(w)[0]]


def cmd_synth(args):
    cfg = SynthConfig(seed=args.seed, n_words=args.words, n_phones=args.phones,
                      waveform=args.waveform)
    corpus = synth_corpus(cfg, args.out)
    print(f"wrote {len(corpus.manifest.entries)} utterances to {args.out}")


def cmd_features(args):
    from .audio import read_wav
    seg = read_wav(args.wav)
    if args.kind == "mfcc":
        fm = mfcc(seg, MfccConfig(sample_rate=seg.sample_rate))
    else:
        fm = gammatone_features(seg, GammatoneConfig(sample_rate=seg.sample_rate))
    fm.save(args.out)
    print(f"{fm.T} frames x {fm.D} dims -> {args.out}")


def cmd_train_gmm(args):
    manifest, lexicon = _corpus_paths(args.data)
    corpus = [(load_features(e), _phone_seq(lexicon, e.transcript))
              for e in manifest.split("train")]
    model = init_model_from_linear_alignment(corpus, lexicon.phone_set(),
                                             args.states_per_phone)
    model, curve, skipped = baum_welch_train(corpus, model, args.iters)
    save_gmm(args.out, model)
    print(f"log-likelihood {curve[0]:.2f} -> {curve[-1]:.2f}"
          f" ({skipped} skipped); model -> {args.out}")


def cmd_align(args):
    manifest, lexicon = _corpus_paths(args.data)
    model = load_gmm(args.model)
    out = {}
    for split in ("train", "dev"):
        for e in manifest.split(split):
            feats = load_features(e)
            seq = model.state_sequence(_phone_seq(lexicon, e.transcript))
            scores = emission_score_matrix(feats, model.emissions, seq)
            path, _ = viterbi_align(scores, model.chain_for(
                _phone_seq(lexicon, e.transcript)))
            out[e.id] = seq[path]
    np.savez(args.out, **out)
    print(f"aligned {len(out)} utterances -> {args.out}")


def cmd_train_lm(args):
    with open(args.text) as f:
        corpus = [line.split() for line in f if line.strip()]
    model = train_lm(corpus, order=args.order)
    write_arpa(model, args.out)
    rep = evaluate(model, corpus)
    print(f"train perplexity {rep.perplexity:.2f}; ARPA -> {args.out}")


def cmd_pretrain(args):
    manifest, _ = _corpus_paths(args.data)
    feats = [load_features(e) for e in manifest.split("pretrain")]
    dim = feats[0].shape[1]
    enc = EncoderConfig(conv_blocks=((16, 3, 1), (16, 3, 1)), in_channels=dim)
    model, curve, paths = pretrain(feats, enc, QuantizerConfig(), args.out,
                                   epochs=args.epochs, seed=args.seed,
                                   mask_cfg=MaskConfig(start_prob=0.15, span=3))
    print(f"loss {curve[0]:.4f} -> {curve[-1]:.4f}; {len(paths)} checkpoints in {args.out}")


def cmd_finetune(args):
    manifest, lexicon = _corpus_paths(args.data)
    aligns = dict(np.load(args.alignments))
    n_labels = int(max(a.max() for a in aligns.values())) + 1
    dim = load_features(manifest.split("train")[0]).shape[1]
    rng = np.random.default_rng(args.seed)
    enc_cfg = EncoderConfig(conv_blocks=((16, 3, 1), (16, 3, 1)), in_channels=dim)
    encoder = Wav2vecEncoder(Wav2vecModel(enc_cfg, QuantizerConfig(), rng))
    init = load_checkpoint(args.init) if args.init else None
    model = attach_output_head(encoder, n_labels, rng, init_state=init)
    tr, dv = manifest.split("train"), manifest.split("dev")
    _, logs = finetune([load_features(e) for e in tr], [aligns[e.id] for e in tr],
                       [load_features(e) for e in dv], [aligns[e.id] for e in dv],
                       model, FinetuneConfig(n_labels=n_labels, epochs=args.epochs,
                                             seed=args.seed),
                       out_dir=args.out)
    print(f"dev frame accuracy {logs[-1].dev_frame_acc:.3f}; model -> {args.out}")


def cmd_decode(args):
    manifest, lexicon = _corpus_paths(args.data)
    model = load_gmm(args.model)
    with open(args.lm_text) as f:
        lm = train_lm([line.split() for line in f if line.strip()], order=args.order)
    cfg = DecodeConfig(am_scale=args.am_scale, lm_scale=args.lm_scale,
                       beam_logwidth=args.beam)
    hyps = {}
    for e in manifest.split(args.split):
        feats = load_features(e)
        hyps[e.id] = decode(feats, GmmAcoustic(model), lm, lexicon, cfg).words
    with open(args.out, "w") as f:
        f.write(format_transcript_lines(hyps))
    print(f"decoded {len(hyps)} utterances -> {args.out}")


def cmd_score(args):
    manifest, _ = _corpus_paths(args.data)
    refs = {e.id: list(e.transcript) for e in manifest.split(args.split)}
    with open(args.hyp) as f:
        hyps = parse_transcript_lines(f.read())
    for uid in refs:
        hyps.setdefault(uid, [])
    b = score_corpus(refs, hyps)
    print(f"WER {100 * b.wer:.2f}%  (sub {b.substitutions}, del {b.deletions},"
          f" ins {b.insertions}, ref {b.reference_words})")


def _load_config_file(path):
    """key = value lines; keys match PipelineConfig/SynthConfig fields."""
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.split("#")[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    return kv


def _convert(default, text):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):  # e.g. utterances: split:count pairs
        return tuple((name, int(n)) for name, n in
                     (item.split(":") for item in text.split(",")))
    return type(default)(text)


def _pipeline_config(args):
    kv = _load_config_file(args.config) if args.config else {}
    synth_fields = {f.name for f in dataclasses.fields(SynthConfig)}
    pipe_fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    synth_kv, pipe_kv = {}, {}
    for k, v in kv.items():
        if k in synth_fields:
            synth_kv[k] = _convert(getattr(SynthConfig(), k), v)
        elif k in pipe_fields and k != "synth":
            pipe_kv[k] = _convert(getattr(PipelineConfig(), k), v)
        else:
            raise SystemExit(f"unknown config key {k!r}")
    synth_kv.setdefault("seed", args.seed)
    pipe_kv.setdefault("seed", args.seed)
    return PipelineConfig(synth=SynthConfig(**synth_kv), **pipe_kv)


def cmd_run(args):
    res = run_experiment(_pipeline_config(args), args.work_dir)
    print(res.report_text, end="")


def cmd_sweep(args):
    rows, path = checkpoint_sweep(_pipeline_config(args), args.work_dir)
    for ep, b in rows:
        print(f"epoch {ep:3d}  WER {100 * b.wer:6.2f}%")
    print(f"sweep table -> {path}")


def build_parser():
    p = argparse.ArgumentParser(prog="asrlab",
                                description="hybrid HMM/NN speech recognition lab")
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("out")
    s.add_argument("--words", type=int, default=5)
    s.add_argument("--phones", type=int, default=8)
    s.add_argument("--waveform", action="store_true")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("features", help="extract features from a WAV file")
    s.add_argument("wav")
    s.add_argument("out")
    s.add_argument("--kind", choices=("mfcc", "gammatone"), default="mfcc")
    s.set_defaults(fn=cmd_features)

    s = sub.add_parser("train-gmm", help="train the GMM/HMM acoustic model")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--iters", type=int, default=4)
    s.add_argument("--states-per-phone", type=int, default=1)
    s.set_defaults(fn=cmd_train_gmm)

    s = sub.add_parser("align", help="Viterbi frame alignments")
    s.add_argument("data")
    s.add_argument("model")
    s.add_argument("out")
    s.set_defaults(fn=cmd_align)

    s = sub.add_parser("train-lm", help="Kneser-Ney n-gram LM to ARPA")
    s.add_argument("text")
    s.add_argument("out")
    s.add_argument("--order", type=int, default=4)
    s.set_defaults(fn=cmd_train_lm)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--epochs", type=int, default=6)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", help="supervised hybrid fine-tuning")
    s.add_argument("data")
    s.add_argument("alignments")
    s.add_argument("out")
    s.add_argument("--init", default=None, help="pre-training checkpoint")
    s.add_argument("--epochs", type=int, default=12)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("decode", help="beam decode with the GMM system")
    s.add_argument("data")
    s.add_argument("model")
    s.add_argument("lm_text")
    s.add_argument("out")
    s.add_argument("--split", default="dev")
    s.add_argument("--order", type=int, default=3)
    s.add_argument("--am-scale", type=float, default=1.0)
    s.add_argument("--lm-scale", type=float, default=1.0)
    s.add_argument("--beam", type=float, default=100.0)
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("score", help="WER of a hypothesis file")
    s.add_argument("data")
    s.add_argument("hyp")
    s.add_argument("--split", default="dev")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("run", help="cached end-to-end experiment")
    s.add_argument("--config", default=None, help="key = value file")
    s.add_argument("--work-dir", default=None)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="WER per pre-training checkpoint")
    s.add_argument("--config", default=None)
    s.add_argument("--work-dir", default=None)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args) or 0


if __name__ == "__main__":
    sys.exit(main())
