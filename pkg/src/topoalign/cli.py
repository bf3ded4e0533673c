"""Command-line entry point: ``topoalign <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import functools
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .align_eval import FrameAlignment, corpus_report
from .decoder import (
    BeamConfig, altas_sweep, build_prefix_tree, decode, decode_corpus, downsample,
)
from .dp_kernel import (
    EmissionMatrix, ScaleConfig, TransitionModel, full_sum_gradient, full_sum_loss, log_softmax,
    viterbi,
)
from .errors import TopoAlignError
from .formats import (
    load_emissions, read_alignments, read_table, save_emissions, write_alignments, write_ctm,
    write_key_values, write_table,
)
from .lexicon import Topology, build_inventory, load_lexicon, phonemize
from .lm import NGramLm, load_arpa
from .models import ZeroOrderScores, estimate_ilm, estimate_prior
from .topology import build_alignment_fsa
from . import toy_trainer as tt

EMISSION_SUFFIXES = (".emat", ".bin", ".txt")


class UsageError(Exception):
    pass


def _read_lexicon(path):
    with open(path, encoding="utf-8") as f:
        return load_lexicon(f)


def _inventory(args, lex=None):
    lex = lex if lex is not None else _read_lexicon(args.lexicon)
    return lex, build_inventory(lex, Topology.parse(args.topology))


def _emission_files(path) -> list:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in EMISSION_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no emission files in {path}")
        return files
    return [path]


def _transcripts(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            fields = line.split()
            if fields:
                out[fields[0]] = fields[1:]
    return out


def _transitions(value: str) -> TransitionModel:
    if value == "none":
        return TransitionModel.none()
    if value == "uniform":
        return TransitionModel.uniform()
    if value.startswith("loop="):
        return TransitionModel.global_loop(float(value[5:]))
    raise UsageError(f"--transitions must be none, uniform or loop=<p>, got {value!r}")


def _scales(args) -> ScaleConfig:
    return ScaleConfig(alpha=args.alpha, beta=args.beta, gamma=getattr(args, "gamma", 0.0),
                       lm_scale=getattr(args, "lm_scale", 1.0))


def _out_text(args):
    if args.out in (None, "-"):
        return sys.stdout, False
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    return open(args.out, "w", encoding="utf-8"), True


def _write_csv(path, rows, columns):
    if path in (None, "-"):
        f, close = sys.stdout, False
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        f, close = open(path, "w", encoding="utf-8", newline=""), True
    try:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    finally:
        if close:
            f.close()


# commands


def cmd_lexicon_check(args):
    lex = _read_lexicon(args.lexicon)
    inv = build_inventory(lex, Topology.parse(args.topology))
    print(f"words {len(lex)}")
    print(f"phonemes {len(lex.phonemes())}")
    print(f"labels {len(inv)} {' '.join(inv.names)}")
    return 0


def cmd_fsa_dump(args):
    lex, inv = _inventory(args)
    fsa = build_alignment_fsa(phonemize(args.words.split(), lex), inv, not args.no_silence)
    out, close = _out_text(args)
    try:
        fsa.dump(out)
    finally:
        if close:
            out.close()
    return 0


def cmd_loss_check(args):
    lex, inv = _inventory(args)
    em = load_emissions(args.emissions)
    fsa = build_alignment_fsa(phonemize(args.words.split(), lex), inv, not args.no_silence)
    trans = _transitions(args.transitions)
    scales = _scales(args)
    loss = full_sum_loss(fsa, em, trans, scales)
    path, score = viterbi(fsa, em, trans, scales, inv)
    print(f"full_sum_loss {loss!r}")
    print(f"viterbi_score {score!r}")
    print("viterbi_labels " + " ".join(inv.name(int(x)) for x in path.labels))
    return 0


def _finite_difference_error(fsa, logits, trans, scales, step):
    grad = full_sum_gradient(fsa, logits, trans, scales)
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += step
        minus[idx] -= step
        num[idx] = (full_sum_loss(fsa, log_softmax(plus), trans, scales)
                    - full_sum_loss(fsa, log_softmax(minus), trans, scales)) / (2 * step)
    denom = np.maximum(np.abs(grad) + np.abs(num), 1e-8)
    return float(np.max(np.abs(grad - num) / denom))


def cmd_grad_check(args):
    rng = np.random.default_rng(args.seed)
    lex = tt.demo_lexicon(4, 6, args.seed)
    worst = 0.0
    topologies = ["ctc", "phmm"] if args.topology is None else [args.topology]
    for topo in topologies:
        inv = build_inventory(lex, Topology.parse(topo))
        trans = TransitionModel.none() if inv.topology.uses_blank else TransitionModel.global_loop(0.6)
        for _ in range(args.instances):
            words = [lex.words[int(i)] for i in rng.integers(0, len(lex), size=int(rng.integers(1, 3)))]
            fsa = build_alignment_fsa(phonemize(words, lex), inv)
            T = fsa.min_path_length() + int(rng.integers(0, 4))
            logits = rng.normal(size=(T, len(inv)))
            worst = max(worst, _finite_difference_error(fsa, logits, trans, _scales(args), args.step))
    print(f"max_relative_error {worst:.3e}")
    if worst > args.tolerance:
        print(f"error: gradient check failed ({worst:.3e} > {args.tolerance:g})", file=sys.stderr)
        return 1
    return 0


def cmd_train_toy(args):
    lex = tt.demo_lexicon(args.n_phonemes, args.n_words, args.seed)
    corpus = tt.generate_corpus(args.seed, args.n_utts, lex, noise=args.noise,
                                frame_shift_ms=args.frame_shift_ms)
    cfg = tt.TrainConfig.tuned(args.topology, seed=args.seed, epochs=args.epochs, lr=args.lr,
                               **({"alpha": args.alpha} if args.alpha is not None else {}),
                               **({"beta": args.beta} if args.beta is not None else {}))
    report = tt.TrainReport()
    model = tt.train_zero_order(corpus, cfg, report)
    out = Path(args.out)
    (out / "emissions").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    tt.save_classifier(model, out / "model.npz")
    with open(out / "config.txt", "w", encoding="utf-8") as f:
        write_key_values(cfg.to_dict(), f)
    with open(out / "lexicon.txt", "w", encoding="utf-8") as f:
        for w in lex.words:
            f.write(w + " " + " ".join(p.symbol for p in lex[w]) + "\n")
    with open(out / "transcripts.txt", "w", encoding="utf-8") as f:
        for u in corpus.utterances:
            f.write(u.utt_id + " " + " ".join(u.words) + "\n")
    with open(out / "truth.align", "w", encoding="utf-8") as f:
        write_alignments(corpus.truth_alignments(args.topology), f)
    for u in corpus.utterances:
        save_emissions(EmissionMatrix(u.features, corpus.frame_shift_ms, False), out / "features" / f"{u.utt_id}.emat")
        save_emissions(tt.posteriors(model, u.features, corpus.frame_shift_ms), out / "emissions" / f"{u.utt_id}.emat")
    with open(out / "losses.csv", "w", encoding="utf-8") as f:
        f.write("epoch,loss_per_frame\n")
        for i, loss in enumerate(report.losses, 1):
            f.write(f"{i},{loss!r}\n")
    print(f"trained {args.topology} on {len(corpus)} utterances; final loss/frame {report.losses[-1]:.6f}")
    if report.skipped:
        print(f"skipped {len(report.skipped)} utterances shorter than their alignment")
    return 0


def cmd_align(args):
    lex, inv = _inventory(args)
    trans = _transitions(args.transitions)
    texts = _transcripts(args.transcripts)
    out = []
    for path in _emission_files(args.emissions):
        utt = path.stem
        if utt not in texts:
            raise KeyError(f"no transcript for {utt}")
        em = load_emissions(path)
        fsa = build_alignment_fsa(phonemize(texts[utt], lex), inv, not args.no_silence)
        p, _ = viterbi(fsa, em, trans, _scales(args), inv)
        out.append(FrameAlignment(utt, p.labels, em.frame_shift_ms, inv, texts[utt], p.states))
    f, close = _out_text(args)
    try:
        write_alignments(out, f)
    finally:
        if close:
            f.close()
    if args.ctm:
        with open(args.ctm, "w", encoding="utf-8") as f:
            write_ctm(out, f)
    return 0


def cmd_eval_align(args):
    _, inv = _inventory(args)
    with open(args.hyp, encoding="utf-8") as f:
        hyp = read_alignments(f, inv)
    with open(args.ref, encoding="utf-8") as f:
        ref = {a.utt_id: a for a in read_alignments(f, inv)}
    missing = [a.utt_id for a in hyp if a.utt_id not in ref]
    if missing:
        raise KeyError(f"no reference for {', '.join(missing)}")
    rep = corpus_report([(a, ref[a.utt_id]) for a in hyp], args.ctc_word_end)
    name = "blank" if inv.topology.uses_blank else "silence"
    print(f"TSE {rep.tse_ms}")
    print(f"words {rep.n_words}")
    print(f"{name}_pct {rep.silence_or_blank_pct}")
    print(f"phoneme_ms {rep.avg_phoneme_ms}")
    return 0


def cmd_estimate_prior(args):
    _, inv = _inventory(args)
    with open(args.alignments, encoding="utf-8") as f:
        aligns = read_alignments(f, inv)
    prior = estimate_prior(aligns, len(inv), args.epsilon, inv.special_id)
    f, close = _out_text(args)
    try:
        write_table(prior, f)
    finally:
        if close:
            f.close()
    return 0


def cmd_estimate_ilm(args):
    ilm = estimate_ilm(load_emissions(p) for p in _emission_files(args.emissions))
    f, close = _out_text(args)
    try:
        write_table(ilm, f)
    finally:
        if close:
            f.close()
    return 0


def _load_lm(args, lex):
    if args.lm is None:
        return NGramLm.uniform(lex.words)
    with open(args.lm, encoding="utf-8") as f:
        return load_arpa(f)


def _beam(args) -> BeamConfig:
    return BeamConfig(args.beam, args.max_hyps, args.altas, args.word_end_beam)


def cmd_decode(args):
    lex, inv = _inventory(args)
    lm = _load_lm(args, lex)
    tree = build_prefix_tree(lex)
    ilm = None
    if args.ilm:
        with open(args.ilm, encoding="utf-8") as f:
            ilm = read_table(f)
    trans = _transitions(args.transitions)
    rows = []
    f, close = _out_text(args)
    try:
        for path in _emission_files(args.emissions):
            em = load_emissions(path)
            res = decode(ZeroOrderScores(em), tree, lm, inv, trans=trans, ilm=ilm, scales=_scales(args),
                         cfg=_beam(args), allow_silence=not args.no_silence)
            f.write(" ".join([path.stem, repr(res.score), *res.words]) + "\n")
            st = res.stats
            rows.append({"utt_id": path.stem, "T": st.n_steps, "frame_shift_ms": em.frame_shift_ms,
                         "search_s": st.search_time_s, "rtf": st.rtf,
                         "avg_S": st.avg_active_states, "avg_L": st.avg_active_trees})
    finally:
        if close:
            f.close()
    if args.stats:
        _write_csv(args.stats, rows, STATS_COLUMNS)
    return 0


STATS_COLUMNS = ["utt_id", "T", "frame_shift_ms", "search_s", "rtf", "avg_S", "avg_L"]
SWEEP_COLUMNS = ["altas", "wer", "avg_S", "avg_L", "rtf", "failures"]
BENCH_COLUMNS = ["frame_shift_ms", "steps", "search_s", "audio_s", "rtf", "avg_S", "avg_L", "wer"]


@functools.lru_cache(maxsize=4)
def demo_setup(seed: int, n_utts: int = 100, n_dev: int = 40, noise: float = 1.0):
    """Demo corpus, a P-HMM zero-order model trained on it, and its decoding resources.

    Cached per process; callers must not modify the returned objects.
    """
    lex = tt.demo_lexicon(4, 6, seed)
    corpus = tt.generate_corpus(seed, n_utts, lex, noise=noise)
    dev = tt.generate_corpus(seed + 1, n_dev, lex, noise=noise, means=corpus.means, id_prefix="dev")
    cfg = tt.TrainConfig.tuned("phmm", seed=seed)
    model = tt.train_zero_order(corpus, cfg)
    return lex, corpus, dev, cfg, model


def cmd_altas_sweep(args):
    try:
        values = [float(x) for x in args.scales.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--scales must be comma-separated numbers, got {args.scales!r}") from None
    lex, corpus, dev, cfg, model = demo_setup(args.seed, noise=args.noise)
    items = [tt.zero_order_scores(model, u, corpus.frame_shift_ms) for u in dev.utterances]
    refs = [list(u.words) for u in dev.utterances]
    rows = altas_sweep(items, refs, build_prefix_tree(lex), NGramLm.uniform(lex.words), corpus.inventory,
                       values, BeamConfig(args.beam, args.max_hyps), trans=cfg.transition_model(),
                       scales=cfg.scales)
    _write_csv(args.out, rows, SWEEP_COLUMNS)
    return 0


def bench_downsampling(seed: int, factor: int = 4, n_dev: int = 20, noise: float = 1.0, beam: float = 8.0):
    """Decode the same audio at a fine frame shift and after averaging ``factor`` frames."""
    lex, corpus, _, cfg, model = demo_setup(seed, noise=noise)
    fine = tt.generate_corpus(seed + 2, n_dev, lex, noise=noise, means=corpus.means,
                              durations=corpus.durations.scaled(factor),
                              frame_shift_ms=corpus.frame_shift_ms / factor, id_prefix="fine")
    tree = build_prefix_tree(lex)
    lm = NGramLm.uniform(lex.words)
    refs = [list(u.words) for u in fine.utterances]
    fine_items = [tt.zero_order_scores(model, u, fine.frame_shift_ms) for u in fine.utterances]
    coarse_items = [ZeroOrderScores(downsample(s.em, factor)) for s in fine_items]
    rows = []
    for items in (fine_items, coarse_items):
        res = decode_corpus(items, tree, lm, corpus.inventory, refs, trans=cfg.transition_model(),
                            scales=cfg.scales, cfg=BeamConfig(beam))
        s = res.summary
        rows.append({"frame_shift_ms": items[0].frame_shift_ms, "steps": sum(i.num_frames for i in items),
                     "search_s": s.search_time_s, "audio_s": s.audio_time_s, "rtf": s.rtf,
                     "avg_S": s.avg_active_states, "avg_L": s.avg_active_trees, "wer": res.wer})
    return rows


def cmd_bench_rtf(args):
    rows = bench_downsampling(args.seed, args.factor, noise=args.noise, beam=args.beam)
    _write_csv(args.out, rows, BENCH_COLUMNS)
    return 0


def cmd_demo_pipeline(args):
    res = tt.run_pipeline(seed=args.seed, n_utts=args.n_utts, noise=args.noise, first_order=args.first_order,
                          topologies=("ctc", "phmm") if args.first_order == "mrnnt" else ("phmm", "ctc"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for topo, al in res.alignments.items():
        with open(out / f"{topo}.align", "w", encoding="utf-8") as f:
            write_alignments(al, f)
    with open(out / "truth.align", "w", encoding="utf-8") as f:
        write_alignments(res.corpus.truth_alignments(), f)
    lex = res.corpus.lexicon
    inv = res.corpus.inventory_for("ctc" if args.first_order == "mrnnt" else "phmm")
    refs = [list(u.words) for u in res.dev.utterances]
    items = [res.first_order.scores(u.features, res.dev.frame_shift_ms) for u in res.dev.utterances]
    trans = TransitionModel.uniform() if args.first_order == "fh" else None
    dec = decode_corpus(items, build_prefix_tree(lex), NGramLm.uniform(lex.words), inv, refs,
                        trans=trans, scales=ScaleConfig(beta=0.1))
    with open(out / "decode.txt", "w", encoding="utf-8") as f:
        for u, words, score in zip(res.dev.utterances, dec.hyps, dec.scores):
            f.write(" ".join([u.utt_id, repr(score), *words]) + "\n")
    rows = []
    for key, rep in res.reports.items():
        rows.append({"system": key, "tse_ms": rep.tse_ms, "special_pct": rep.silence_or_blank_pct,
                     "phoneme_ms": rep.avg_phoneme_ms})
    _write_csv(out / "summary.csv", rows, ["system", "tse_ms", "special_pct", "phoneme_ms"])
    for r in rows:
        print(f"{r['system']}: TSE {r['tse_ms']:.1f} ms, silence/blank {r['special_pct']:.1f}%, "
              f"phoneme {r['phoneme_ms']:.1f} ms")
    print(f"{args.first_order} dev WER {dec.wer:.2f}% ({dec.failures} over-pruned)")
    return 0


def _add_scales(p, alpha=1.0, beta=1.0):
    p.add_argument("--alpha", type=float, default=alpha, help="label posterior scale")
    p.add_argument("--beta", type=float, default=beta, help="transition scale")


def _add_beam(p):
    p.add_argument("--beam", type=float, default=float("inf"), help="log-score beam width")
    p.add_argument("--max-hyps", type=int, default=1_000_000)
    p.add_argument("--altas", type=float, default=None, help="acoustic lookahead scale")
    p.add_argument("--word-end-beam", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topoalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--print-config", action="store_true", help="print resolved flags and exit")
        return p

    topo = {"choices": ["ctc", "phmm"], "default": "phmm"}

    p = command("lexicon-check", cmd_lexicon_check, "validate a lexicon and list its labels")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--topology", **topo)

    p = command("fsa-dump", cmd_fsa_dump, "write the alignment FSA of a word sequence")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--words", required=True, help="space-separated word sequence")
    p.add_argument("--topology", **topo)
    p.add_argument("--no-silence", action="store_true")
    p.add_argument("--out")

    p = command("loss-check", cmd_loss_check, "full-sum loss and Viterbi score of one utterance")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--words", required=True)
    p.add_argument("--emissions", required=True)
    p.add_argument("--topology", **topo)
    p.add_argument("--transitions", default="none")
    p.add_argument("--no-silence", action="store_true")
    _add_scales(p)

    p = command("grad-check", cmd_grad_check, "compare the gradient against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topology", choices=["ctc", "phmm"], default=None)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_scales(p)

    p = command("train-toy", cmd_train_toy, "train a zero-order model on a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topology", **topo)
    p.add_argument("--n-utts", type=int, default=100)
    p.add_argument("--n-phonemes", type=int, default=4)
    p.add_argument("--n-words", type=int, default=6)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=None, help="default 0.7 for phmm, 1.0 for ctc")
    p.add_argument("--beta", type=float, default=None, help="default 0.1 for phmm")
    p.add_argument("--frame-shift-ms", type=float, default=40.0)
    p.add_argument("--out", required=True)

    p = command("align", cmd_align, "Viterbi forced alignment of emission files")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--emissions", required=True, help="emission file or directory")
    p.add_argument("--transcripts", required=True, help="lines of '<utt-id> <word> ...'")
    p.add_argument("--topology", **topo)
    p.add_argument("--transitions", default="uniform")
    p.add_argument("--no-silence", action="store_true")
    p.add_argument("--ctm", help="also write word boundaries in CTM format")
    p.add_argument("--out")
    _add_scales(p)

    p = command("eval-align", cmd_eval_align, "word time stamp error and frame statistics")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--topology", **topo)
    p.add_argument("--ctc-word-end", choices=["peak", "pre-next"], default="peak")

    p = command("estimate-prior", cmd_estimate_prior, "diphone prior from alignments")
    p.add_argument("--alignments", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--topology", **topo)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--out")

    p = command("estimate-ilm", cmd_estimate_ilm, "zero-order internal LM from emission files")
    p.add_argument("--emissions", required=True)
    p.add_argument("--out")

    p = command("decode", cmd_decode, "beam search over emission files")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--emissions", required=True)
    p.add_argument("--topology", **topo)
    p.add_argument("--lm", help="ARPA file; default is a uniform unigram over the lexicon")
    p.add_argument("--ilm", help="ILM1D table to subtract with --gamma")
    p.add_argument("--transitions", default="uniform")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--lambda", dest="lm_scale", type=float, default=1.0)
    p.add_argument("--no-silence", action="store_true")
    p.add_argument("--stats", help="per-utterance statistics CSV")
    p.add_argument("--out")
    _add_scales(p)
    _add_beam(p)

    p = command("altas-sweep", cmd_altas_sweep, "WER and search effort across ALTAS scales")
    p.add_argument("--scales", default="0,0.25,0.5,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--beam", type=float, default=6.0)
    p.add_argument("--max-hyps", type=int, default=1_000_000)
    p.add_argument("--out")

    p = command("bench-rtf", cmd_bench_rtf, "search RTF with and without frame downsampling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--beam", type=float, default=8.0)
    p.add_argument("--out")

    p = command("demo-pipeline", cmd_demo_pipeline, "generate, train, align, evaluate and decode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-utts", type=int, default=100)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--first-order", choices=["fh", "mrnnt"], default="fh")
    p.add_argument("--out", required=True)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.print_config:
        for key, value in sorted(vars(args).items()):
            if key not in ("func", "print_config"):
                print(f"{key}={value}")
        return 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (TopoAlignError, ValueError, KeyError, IndexError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
