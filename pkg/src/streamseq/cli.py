"""Command line front end.

Verbs: train, decode, align, report, selftest. Exit status is 0 on success,
1 for usage errors, 2 for runtime failures, 3 when a selftest suite fails.
Set STREAMSEQ_LOG=debug|info|warning to control verbosity.
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional, Sequence

import torch

from .evaltool import (
    beam_decode,
    bucketed_report,
    export_alignment_trace,
    greedy_hypothesis,
    mean_boundary_gap,
    read_results_csv,
    word_error_rate,
    write_results_csv,
    UttEval,
)
from .pipeline import (
    TrainConfig,
    build_model,
    load_checkpoint,
    load_dataset,
    parse_config_file,
    save_checkpoint,
    train_stage,
)
from .selftest import run_selftest

log = logging.getLogger("streamseq")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3

_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage problems; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level_name = os.environ.get("STREAMSEQ_LOG", "info").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> _Parser:
    parser = _Parser(prog="streamseq", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    sub = parser.add_subparsers(dest="verb", metavar="verb")
    sub.required = True

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed-checkpoint", default=None,
                   help="checkpoint whose weights initialize this stage")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides, applied after the file")

    p = sub.add_parser("decode", parents=[common], help="decode a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--data", required=True, help="dataset description file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("align", parents=[common],
                       help="export teacher-forced boundary traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset description file")
    p.add_argument("--out", required=True, help="trace file path")

    p = sub.add_parser("report", parents=[common],
                       help="bucket per-utterance results by input length")
    p.add_argument("--results", required=True, help="results csv from decode")
    p.add_argument("--buckets", default=None,
                   help="comma separated edges; omit for decile edges")

    p = sub.add_parser("selftest", parents=[common],
                       help="run the built-in oracle suites")
    p.add_argument("--filter", default="", dest="name_filter",
                   help="substring to select suites")
    return parser


def _validate_overrides(parser: _Parser, overrides: Sequence[str]) -> None:
    for ov in overrides:
        if "=" not in ov:
            parser.error(f"override {ov!r} is not key=value")
        key = ov.split("=", 1)[0].strip()
        if key not in _CONFIG_KEYS:
            parser.error(f"override names unknown config key {key!r}")


def _load_model(path: str):
    config, state = load_checkpoint(path)
    model = build_model(config)
    model.load_state_dict(state)
    model.eval()
    return config, model


def _cmd_train(args) -> int:
    config = parse_config_file(args.config, args.overrides)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.seed_checkpoint is not None:
        config = dataclasses.replace(config, seed_checkpoint=args.seed_checkpoint)
    seed_state = None
    if config.seed_checkpoint:
        _, seed_state = load_checkpoint(config.seed_checkpoint)
    result = train_stage(
        config, seed_state=seed_state, metrics_path=config.metrics_out or None
    )
    save_checkpoint(result.model, config, config.out_checkpoint)
    print(f"trained {config.stage}: {result.steps} steps, "
          f"best dev loss {result.best_dev:.6f} -> {config.out_checkpoint}")
    return EXIT_OK


def _cmd_decode(args) -> int:
    if args.beam < 1:
        raise ValueError(f"beam width must be >= 1, got {args.beam}")
    config, model = _load_model(args.checkpoint)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    utts = load_dataset(args.data)
    chunk = config.encoder_chunk()
    os.makedirs(args.out, exist_ok=True)
    per_utt: List[UttEval] = []
    hyp_path = os.path.join(args.out, "hyps.tsv")
    with open(hyp_path, "w", encoding="utf-8") as fh:
        fh.write("utt_id\tref\thyp\tscore\n")
        for k, u in enumerate(utts):
            if args.beam == 1:
                hyp = greedy_hypothesis(model, u.features, chunk=chunk)
            else:
                hyp = beam_decode(model, u.features, beam=args.beam, chunk=chunk)
            _, s, d, i = word_error_rate(hyp.tokens, u.labels)
            per_utt.append(UttEval(length=u.features.size(0), errors=s + d + i,
                                   ref_len=len(u.labels)))
            fh.write("utt{:04d}\t{}\t{}\t{:.6f}\n".format(
                k, " ".join(map(str, u.labels)),
                " ".join(map(str, hyp.tokens)), hyp.score))
    results_path = os.path.join(args.out, "results.csv")
    write_results_csv(per_utt, results_path)
    total_err = sum(r.errors for r in per_utt)
    total_ref = sum(r.ref_len for r in per_utt)
    print(f"decoded {len(utts)} utts, beam {args.beam}, "
          f"token error rate {total_err / total_ref:.4f}")
    print(f"wrote {hyp_path} and {results_path}")
    return EXIT_OK


def _cmd_align(args) -> int:
    config, model = _load_model(args.checkpoint)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    utts = load_dataset(args.data)
    records = export_alignment_trace(model, utts, args.out,
                                     chunk=config.encoder_chunk())
    print(f"wrote {len(records)} trace records to {args.out}, "
          f"mean boundary gap {mean_boundary_gap(records):.3f}")
    return EXIT_OK


def _decile_edges(lengths: Sequence[int]) -> List[int]:
    import numpy as np

    qs = np.quantile(lengths, [i / 10 for i in range(1, 10)], method="higher")
    edges: List[int] = []
    for q in qs:
        q = int(q)
        if not edges or q > edges[-1]:
            edges.append(q)
    return edges


def _cmd_report(args) -> int:
    per_utt = read_results_csv(args.results)
    if not per_utt:
        raise ValueError(f"no rows in {args.results}")
    if args.buckets is None:
        edges = _decile_edges([u.length for u in per_utt])
    else:
        edges = [int(tok) for tok in args.buckets.split(",") if tok.strip()]
    rows = bucketed_report(per_utt, edges)
    print(f"{'bucket':>10} {'utts':>6} {'ref_tok':>8} {'errors':>7} {'wer':>8}")
    for r in rows:
        print(f"{r.label:>10} {r.n_utts:>6} {r.ref_tokens:>8} {r.errors:>7} "
              f"{r.wer:>8.4f}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    if args.seed is not None:
        torch.manual_seed(args.seed)
    ok = run_selftest(args.name_filter)
    return EXIT_OK if ok else EXIT_SELFTEST


_COMMANDS = {
    "train": _cmd_train,
    "decode": _cmd_decode,
    "align": _cmd_align,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verb == "train":
        _validate_overrides(parser, args.overrides)
    try:
        return _COMMANDS[args.verb](args)
    except Exception as exc:  # noqa: BLE001 - the contract is an exit status
        log.debug("unhandled failure", exc_info=True)
        print(f"streamseq {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
