"""Command-line entry point: ``sidesum <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import Config, load_config, load_kv_file
from .corpus import (
    SynthConfig,
    build_topic_vocab,
    build_vocab,
    detokenize,
    gen_synthetic,
    read_records,
    to_sample,
    write_synthetic,
)

log = logging.getLogger("sidesum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config_keys_help() -> str:
    return "config keys (key = value file, overridable with --set):\n" + "\n".join(
        f"  {f.name} (default {f.default!r})" for f in fields(Config))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="intra-op threads; 1 guarantees determinism")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="sidesum", description="Topic-aware summarization with side information.",
                     epilog=_config_keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus (train/dev/test.jsonl)")
    p.add_argument("--spec", help="key = value file of generator settings: " +
                   ", ".join(f.name for f in fields(SynthConfig)))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoints",
                       epilog=_config_keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--corpus", required=True, help="directory with train.jsonl (and dev.jsonl) or a .jsonl file")
    p.add_argument("--out-dir", required=True)

    def decode_flags(p):
        p.add_argument("--beam", type=int, help="beam size (default: checkpoint config)")
        p.add_argument("--alpha", type=float, help="length-penalty exponent")
        p.add_argument("--min-len", type=int)
        p.add_argument("--max-len", type=int)
        p.add_argument("--mask-side", action="store_true", help="drop side information at inference")

    p = sub.add_parser("generate", parents=[common], help="print one summary per input line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".jsonl corpus file")
    p.add_argument("--output", help="write summaries here instead of stdout")
    decode_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="ROUGE report CSV for a corpus")
    p.add_argument("--checkpoint", help="required for --mode model")
    p.add_argument("--corpus", required=True, help=".jsonl corpus file")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--mode", choices=("model", "oracle", "lead3"), default="model",
                   help="summarizer: the checkpoint, reference copy, or first three sentences")
    decode_flags(p)

    p = sub.add_parser("topics", parents=[common], help="top words per topic and their NPMI coherence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=10, help="words per topic")
    p.add_argument("--corpus", help=".jsonl corpus for the coherence score (documents)")

    p = sub.add_parser("inspect-attention", parents=[common], help="dump decoder routing weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".jsonl corpus file")
    p.add_argument("--out", required=True, help="output CSV (step,kind,index,weight)")
    p.add_argument("--sample", type=int, default=0, help="line index of the sample to inspect")
    decode_flags(p)
    return parser


# --------------------------------------------------------------------------- helpers


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _check_side_kind(records, cfg: Config) -> None:
    for rec in records:
        if rec.side_visual is not None and cfg.side_kind != "visual":
            raise ValueError(f"record {rec.id} has a visual side but side_kind = {cfg.side_kind}")
        if rec.side_text is not None and cfg.side_kind != "text":
            raise ValueError(f"record {rec.id} has a text side but side_kind = {cfg.side_kind}")
        if rec.side_visual is not None and rec.side_visual.shape[1] != cfg.visual_dim:
            raise ValueError(f"record {rec.id}: visual vectors have dimension {rec.side_visual.shape[1]}, "
                             f"config visual_dim = {cfg.visual_dim}")


def _samples(records, vocab, cfg: Config, allow_empty_summary: bool = False):
    out = []
    for rec in records:
        if allow_empty_summary and not rec.summary:
            rec.summary = ["<unk>"]
        out.append(to_sample(rec, vocab, cfg.max_doc_len, cfg.max_side_len, cfg.max_summary_len))
    return out


def _decode_params(args, cfg: Config) -> dict:
    params = {
        "beam": cfg.beam if args.beam is None else args.beam,
        "alpha": cfg.alpha if args.alpha is None else args.alpha,
        "min_len": cfg.min_len if args.min_len is None else args.min_len,
        "max_len": cfg.max_len if args.max_len is None else args.max_len,
        "mask_side": args.mask_side,
    }
    if params["beam"] < 1 or params["min_len"] > params["max_len"]:
        raise UsageError("need --beam >= 1 and --min-len <= --max-len")
    return params


def _load(path):
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(path)
    model = ckpt.build_model()
    return ckpt, model, model.collator(ckpt.topic_index())


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    spec = load_kv_file(args.spec, SynthConfig)
    write_synthetic(gen_synthetic(spec, args.seed), args.out)


def cmd_train(args) -> None:
    from .trainer import train

    cfg = load_config(args.config, _overrides(args.set)).replace(threads=args.threads)
    corpus = Path(args.corpus)
    train_path = corpus / "train.jsonl" if corpus.is_dir() else corpus
    dev_path = corpus / "dev.jsonl" if corpus.is_dir() else None
    train_records = read_records(train_path)
    dev_records = read_records(dev_path) if dev_path and dev_path.exists() else []
    if not train_records:
        raise ValueError(f"{train_path}: no training records")
    _check_side_kind(train_records + dev_records, cfg)
    vocab = build_vocab(train_records, cfg.vocab_size, cfg.min_freq)
    vocab_t = build_topic_vocab(train_records, cfg.topic_vocab_size, cfg.topic_min_freq)
    if len(vocab_t) == 0:
        raise ValueError("topic vocabulary is empty; lower topic_min_freq")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    result = train(cfg, _samples(train_records, vocab, cfg), vocab, vocab_t,
                   _samples(dev_records, vocab, cfg) or None, out_dir)
    for step, score in result.validation:
        print(f"step {step}\tval_rouge_l {score:.4f}")
    print(f"checkpoint\t{out_dir / 'averaged.uss'}")


def cmd_generate(args) -> None:
    ckpt, model, collate = _load(args.checkpoint)
    cfg = ckpt.config
    params = _decode_params(args, cfg)
    records = read_records(args.input)
    _check_side_kind(records, cfg)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for sample in _samples(records, ckpt.vocab, cfg, allow_empty_summary=True):
            ids = model.generate(sample, collate, **params)
            out.write(f"{sample.id}\t{detokenize(ckpt.vocab.decode(ids))}\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_evaluate(args) -> None:
    from .evaluation import evaluate, lead3, model_summarizer

    records = read_records(args.corpus)
    if args.mode == "model":
        if not args.checkpoint:
            raise UsageError("--mode model needs --checkpoint")
        ckpt, model, collate = _load(args.checkpoint)
        _check_side_kind(records, ckpt.config)
        samples = _samples(records, ckpt.vocab, ckpt.config)
        summarize = model_summarizer(model, ckpt.vocab, collate, **_decode_params(args, ckpt.config))
    else:
        cfg = Config()
        samples = [to_sample(r, build_vocab([r], 10_000), cfg.max_doc_len, cfg.max_side_len, cfg.max_summary_len)
                   for r in records]
        summarize = (lambda s: s.reference) if args.mode == "oracle" else (lambda s: lead3(s.document_tokens))
    report = evaluate(summarize, samples, args.report)
    agg = report.aggregate
    print(f"r1_f {agg['r1_f']:.4f}\tr2_f {agg['r2_f']:.4f}\trl_f {agg['rl_f']:.4f}\tsamples {len(report.rows)}")


def cmd_topics(args) -> None:
    from .utm import top_words, topic_coherence_npmi

    ckpt, model, _ = _load(args.checkpoint)
    if not 1 <= args.k <= len(ckpt.vocab_t):
        raise UsageError(f"--k must lie in [1, {len(ckpt.vocab_t)}]")
    topics = top_words(model.utm.w_phi, ckpt.vocab_t, args.k)
    for i, words in enumerate(topics):
        print(f"topic_{i}\t{' '.join(words)}")
    if args.corpus:
        docs = [r.document for r in read_records(args.corpus)]
        if not docs:
            raise ValueError(f"{args.corpus}: empty corpus")
        print(f"npmi\t{topic_coherence_npmi(topics, docs):.6f}")


def cmd_inspect_attention(args) -> None:
    ckpt, model, collate = _load(args.checkpoint)
    params = _decode_params(args, ckpt.config)
    records = read_records(args.input)
    if not 0 <= args.sample < len(records):
        raise UsageError(f"--sample must lie in [0, {len(records) - 1}]")
    _check_side_kind(records, ckpt.config)
    (sample,) = _samples(records[args.sample:args.sample + 1], ckpt.vocab, ckpt.config, allow_empty_summary=True)
    tokens = model.generate(sample, collate, **params)
    trace = model.attention_trace(sample, tokens, collate, params["mask_side"])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "kind", "index", "weight"])
        for step, kind, index, weight in trace.rows():
            writer.writerow([step, kind, index, repr(float(weight))])


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "topics": cmd_topics,
    "inspect-attention": cmd_inspect_attention,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import configure_threads

    configure_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sidesum {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"sidesum {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
