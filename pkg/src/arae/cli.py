"""Command-line entry point: corpus synthesis, training, generation,
evaluation, the discriminator game, and serving.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors, each with a
one-line diagnostic on stderr. Configuration precedence is built-in defaults
< config file < flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import corpus as C
from . import evaluation as E
from . import model as M
from .checkpoint import load_checkpoint, load_lm_checkpoint, save_checkpoint, save_lm_checkpoint


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_config_file(cfg_dict, path):
    """key=value lines; dotted keys reach the per-phase optimizer configs."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            target = cfg_dict
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    raise UsageError(f"{path}: line {lineno}: unknown config section {part!r}")
                target = target[part]
            leaf = parts[-1]
            if leaf not in target:
                raise UsageError(f"{path}: line {lineno}: unknown config key {key!r}")
            old = target[leaf]
            if isinstance(old, bool):
                target[leaf] = value.lower() in ("1", "true", "yes")
            elif isinstance(old, int):
                target[leaf] = int(value)
            elif isinstance(old, float):
                target[leaf] = float(value)
            else:
                target[leaf] = value
    return cfg_dict


def _build_train_config(args):
    cfg_dict = M.TrainConfig().to_dict()
    if args.config:
        _apply_config_file(cfg_dict, args.config)
    if args.iters is not None:
        cfg_dict["iterations"] = args.iters
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.batch_size is not None:
        cfg_dict["batch_size"] = args.batch_size
    if args.conditional:
        cfg_dict["conditional"] = True
    return cfg_dict


def _cmd_synth_corpus(args):
    grammar = C.load_grammar(args.grammar) if args.grammar else C.DEFAULT_GRAMMAR
    corp = C.synthesize_corpus(grammar, n=args.n, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        for cap, label in zip(corp.captions, corp.labels):
            text = C.detokenize(C.decode_caption(corp.vocab, cap))
            fh.write(f"{text}\t{corp.label_names[label]}\n")
    print(f"wrote {len(corp)} captions to {args.out}")
    return 0


def _cmd_train_arae(args):
    corp = C.load_dataset(args.corpus)
    cfg_dict = _build_train_config(args)
    if cfg_dict["conditional"]:
        cfg_dict["num_labels"] = len(corp.label_names)
    cfg = M.TrainConfig.from_dict(cfg_dict)
    ckpt, trace = M.train_arae(cfg, corp, log_every=args.log_every)
    save_checkpoint(ckpt, args.out)
    trace_path = args.trace or args.out + ".trace.csv"
    M.write_trace(trace, trace_path)
    print(f"checkpoint written to {args.out}, trace to {trace_path}")
    return 0


def _cmd_train_lm(args):
    corp = C.load_dataset(args.corpus)
    cfg = E.LmConfig(iterations=args.iters, seed=args.seed)
    lm = E.train_lstm_lm(corp, cfg)
    save_lm_checkpoint(lm, args.out)
    print(f"language model written to {args.out}")
    return 0


def _label_id(ckpt, name):
    if name is None:
        return None
    if not ckpt.conditional:
        raise UsageError("--label given, but the checkpoint is unconditional")
    if name not in ckpt.label_names:
        raise UsageError(f"unknown label {name!r}; choose from {ckpt.label_names}")
    return ckpt.label_names.index(name)


def _cmd_generate(args):
    ckpt = load_checkpoint(args.ckpt)
    label = _label_id(ckpt, args.label)
    for caption in M.generate(ckpt, args.n, label=label, seed=args.seed):
        print(caption)
    return 0


def _cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    lm = load_lm_checkpoint(args.lm)
    label_names = ckpt.label_names if ckpt.conditional else None
    test = C.load_dataset(args.test, max_len=ckpt.cfg.max_len, label_names=label_names, vocab=ckpt.vocab)
    report = E.run_eval(ckpt, lm, test, n_samples=args.n_samples, seed=args.seed)
    report.write(args.out)
    print(report.render(), end="")
    return 0


def _cmd_discriminate(args):
    ckpt = load_checkpoint(args.ckpt)
    result = M.discriminate(ckpt, args.text)
    print(f"score: {result.score:.6g}")
    print(f"threshold: {result.threshold:.6g}")
    print(f"verdict: {result.verdict}")
    if result.label is not None:
        print(f"label: {result.label}")
    return 0


def _cmd_serve(args):
    from .service import serve

    addr = args.addr or os.environ.get("ARAE_ADDR") or "127.0.0.1:8000"
    serve(args.ckpt, addr)
    return 0


def build_parser():
    parser = _Parser(prog="arae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write a synthetic labeled caption file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grammar", help="grammar spec JSON (templates/slots/proportions)")
    p.set_defaults(func=_cmd_synth_corpus)

    p = sub.add_parser("train-arae", help="train the adversarial autoencoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--config", help="key=value config file mirroring TrainConfig")
    p.add_argument("--trace", help="loss-trace CSV path (default <out>.trace.csv)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train_arae)

    p = sub.add_parser("train-lm", help="train the LSTM language-model baseline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_lm)

    p = sub.add_parser("generate", help="sample captions from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--label")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval", help="perplexity protocols against a test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("discriminate", help="score one caption with the critic")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=_cmd_discriminate)

    p = sub.add_parser("serve", help="run the JSON inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--addr", help="HOST:PORT (or env ARAE_ADDR)")
    p.set_defaults(func=_cmd_serve)

    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, BrokenPipeError):
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
