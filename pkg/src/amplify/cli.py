"""Command-line entry point: ``amplify <command> [options]``.

Every TrainConfig field is exposed as a flag with the same dotted name
(``--lr``, ``--model.d_model``, ``--strategy.kind``); values given on the
command line override those read from ``--config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import FIELD_TYPES, build_config, parse_value, read_config_file
from .data import (DELETE, SWAP, SyntheticSpec, Vocab, load_corpus, pad_batch, write_synthetic)
from .errors import ConfigError, DataError, DivergenceError
from .harness import (DEFAULT_N_VALUES, DEFAULT_PROPORTIONS, Data, ablate_depth, compare, evaluate,
                      format_summary, robustness, run_strategy, sweep_n, t_test, write_summary)
from .mixup import KINDS, StrategyConfig
from .model import dump_attention, load_checkpoint

log = logging.getLogger("amplify")


def _csv_list(conv):
    def parse(raw: str):
        return [conv(tok) for tok in raw.replace(",", " ").split()]

    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file (dotted field names)")
    g = p.add_argument_group("config fields")
    for key in FIELD_TYPES:
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", type=Path, required=True, help="training corpus (JSON lines)")
    p.add_argument("--test", type=Path, required=True, help="test corpus (JSON lines)")
    p.add_argument("--val", type=Path, help="validation corpus; carved from --train when absent")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _strategies(raw: str | None, cfg) -> list[StrategyConfig]:
    if raw is None:
        return [StrategyConfig(k) for k in KINDS]
    out = []
    for name in raw.replace(",", " ").split():
        out.append(cfg.strategy if name == cfg.strategy.kind else StrategyConfig(name))
    return out


def _site_sets(raw: str | None):
    if raw is None:
        return None
    sets = []
    for part in raw.split(";"):
        part = part.strip()
        if part == "all":
            sets.append(None)
        elif part in ("", "none"):
            sets.append([])
        else:
            sets.append([int(t) for t in part.replace(",", " ").split()])
    return sets


def load_cfg(args):
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in FIELD_TYPES:
        raw = getattr(args, f"cfg:{key}", None)
        if raw is not None:
            values[key] = parse_value(key, raw)
    return build_config(values)


def load_data(args, cfg) -> Data:
    try:
        train = load_corpus(args.train)
        test = load_corpus(args.test)
        val = load_corpus(args.val) if args.val else None
    except OSError as exc:
        raise DataError(str(exc)) from None
    if not train or not test:
        raise DataError("train and test corpora must be nonempty")
    return Data(train, test, val)


def _finish(results, out: Path) -> None:
    write_summary(results, out / "summary.csv")
    sys.stdout.write(format_summary(results))


def cmd_train(args):
    cfg = load_cfg(args)
    data = load_data(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    res = run_strategy(cfg, cfg.strategy, data, args.out, save_checkpoints=True)
    _finish([res], args.out)


def cmd_compare(args):
    cfg = load_cfg(args)
    data = load_data(args, cfg)
    _finish(compare(cfg, _strategies(args.strategies, cfg), data, args.out), args.out)


def cmd_sweep_n(args):
    cfg = load_cfg(args)
    data = load_data(args, cfg)
    _finish(sweep_n(cfg, data, args.n_values, args.out), args.out)


def cmd_ablate_depth(args):
    cfg = load_cfg(args)
    data = load_data(args, cfg)
    _finish(ablate_depth(cfg, data, _site_sets(args.site_sets), args.out), args.out)


def cmd_robustness(args):
    cfg = load_cfg(args)
    data = load_data(args, cfg)
    results = robustness(cfg, data, _strategies(args.strategies, cfg), args.kinds, args.proportions, args.out)
    _finish(results, args.out)


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.checkpoint / "vocab.json")
    values = {}
    for line in meta.get("train_config", "").splitlines():
        key, _, raw = line.partition("=")
        values[key.strip()] = parse_value(key.strip(), raw)
    cfg = build_config(values)
    try:
        examples = load_corpus(args.data)
    except OSError as exc:
        raise DataError(str(exc)) from None
    if not examples:
        raise DataError("evaluation corpus is empty")
    loss, acc = evaluate(model, examples, vocab, cfg)
    print(json.dumps({"loss": loss, "accuracy": acc, "n": len(examples)}))
    if args.dump_attention or cfg.trace_attention:
        out = args.dump_attention or args.checkpoint / "attention"
        out.mkdir(parents=True, exist_ok=True)
        for k, start in enumerate(range(0, len(examples), cfg.eval_batch_size)):
            chunk = examples[start:start + cfg.eval_batch_size]
            batch = pad_batch(chunk, vocab, cfg.model.max_len, pad_to_longest=True)
            _, trace = model.forward(batch, trace=True)
            rows = [vocab.decode(r[m]) for r, m in zip(batch.token_ids, batch.pad_mask)]
            dump_attention(trace, rows, out / f"batch{k:05d}.jsonl")


def cmd_gen_data(args):
    spec = SyntheticSpec(args.n_classes, args.vocab_size, (args.min_len, args.max_len), args.n_train,
                         args.n_test, args.signal_tokens, args.noise_rate)
    meta = write_synthetic(spec, args.seed, args.out)
    print(json.dumps(meta, sort_keys=True))


def _read_sample(raw: str) -> np.ndarray:
    path = Path(raw)
    if path.is_file():
        raw = path.read_text()
    return np.array([float(t) for t in raw.replace(",", " ").split()])


def cmd_ttest(args):
    res = t_test(_read_sample(args.a), _read_sample(args.b))
    print(json.dumps({"t": res.t, "p": res.p, "df": res.df}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amplify", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one strategy over all seeds, saving checkpoints")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a corpus")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--dump-attention", type=Path, help="directory for per-batch attention JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="multi-seed comparison of mixup strategies")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--strategies", help=f"comma-separated subset of {','.join(KINDS)} (default: all)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-n", help="Amplify with different numbers of weight draws")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--n-values", type=_csv_list(int), default=list(DEFAULT_N_VALUES))
    p.set_defaults(func=cmd_sweep_n)

    p = sub.add_parser("ablate-depth", help="Amplify restricted to subsets of MHA layers")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--site-sets", help="';'-separated layer lists, e.g. 'all;0;1;none' (default: all, first, middle, last)")
    p.set_defaults(func=cmd_ablate_depth)

    p = sub.add_parser("robustness", help="token delete/swap noise on the training split")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--strategies", help="comma-separated strategies (default: all)")
    p.add_argument("--kinds", type=_csv_list(str), default=[DELETE, SWAP])
    p.add_argument("--proportions", type=_csv_list(float), default=list(DEFAULT_PROPORTIONS))
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("gen-data", help="write a synthetic corpus (train.jsonl, test.jsonl, meta.json)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--signal-tokens", type=int, default=5)
    p.add_argument("--noise-rate", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ttest", help="Welch two-sample t-test")
    p.add_argument("--a", required=True, help="comma-separated values or a file of values")
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_ttest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DataError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
