"""Command-line entry point: ``python -m tale <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration (including bad flags), 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from pydantic import ValidationError

from . import autodiff as ad
from .config import settings
from .errors import InputError, TaleError
from .events import EventSequence, apply_rollup, load_dataset, load_rollup, read_records, save_dataset, split, write_records
from .metrics import binary_metrics, code_metrics, code_predictions
from .model import ModelState, loss_joint
from .schemas import PROCESS_KINDS, SyntheticTruth, load_run_config
from .simulation import simulate_dataset
from .storage import load_checkpoint, write_instances, write_report
from .tasks import load_task_data, make_window_task, save_task_data
from .temporal import dump_curve
from .train import finetune, pretrain, pretrainable, task_scores
from .vocab import CodeVocabulary, guess_format, load_vocabulary, random_vocabulary, save_vocabulary

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# Shared helpers


def _vocabulary(args: argparse.Namespace) -> CodeVocabulary:
    if args.vocab and args.random_vocab:
        raise InputError("use either --vocab or --random-vocab, not both")
    if args.vocab:
        fmt = args.vocab_format or guess_format(args.vocab)
        return load_vocabulary(args.vocab, fmt)
    if args.random_vocab:
        try:
            n, d, seed = (int(part) for part in args.random_vocab.split(":"))
        except ValueError as exc:
            raise InputError(f"--random-vocab expects N:D:SEED, got {args.random_vocab!r}") from exc
        return random_vocabulary(n, d, seed)
    raise InputError("a vocabulary is required (--vocab PATH or --random-vocab N:D:SEED)")


def _overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed = {args.seed}")
    return overrides


def _grid(text: str) -> np.ndarray:
    """``start:stop:step`` with both ends inclusive."""

    try:
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError as exc:
        raise InputError(f"--grid expects start:stop:step, got {text!r}") from exc
    if step <= 0 or stop < start:
        raise InputError(f"--grid needs step > 0 and stop >= start, got {text!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _write_vocab_next_to(vocab: CodeVocabulary, out: str, vocab_out: str | None) -> Path:
    target = Path(vocab_out) if vocab_out else Path(out).with_suffix(".vocab.tsv")
    save_vocabulary(vocab, target, "binary" if target.suffix == ".bin" else "tsv")
    return target


# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    rates = [float(r) for r in args.rates.split(",")] if args.rates else [0.5, 2.0]
    truth = SyntheticTruth(process_kind=args.kind, rate=args.rate, rates=rates, mu=args.mu,
                           alpha_h=args.alpha_h, beta_h=args.beta_h)
    vocab = random_vocabulary(args.n_codes, args.d_emb, args.seed)
    sequences = simulate_dataset(truth, args.T, vocab.size, args.n_seq, args.seed)
    count = save_dataset(sequences, vocab, args.out)
    vocab_path = _write_vocab_next_to(vocab, args.out, args.vocab_out)
    print(f"wrote {count} sequences to {args.out} (vocabulary: {vocab_path})")
    return EXIT_OK


def cmd_synth_task(args: argparse.Namespace) -> int:
    vocab = random_vocabulary(args.n_codes, args.d_emb, args.seed)
    examples = make_window_task(args.n_seq, args.n_codes, args.marker_code, args.window_days, args.seed)
    count = save_task_data(examples, vocab, args.out)
    vocab_path = _write_vocab_next_to(vocab, args.out, args.vocab_out)
    print(f"wrote {count} task examples to {args.out} (vocabulary: {vocab_path})")
    return EXIT_OK


def cmd_rollup(args: argparse.Namespace) -> int:
    mapping = load_rollup(args.map)
    records = []
    for _, record in read_records(args.data):
        record.events = apply_rollup(record.events, mapping)
        records.append(record)
    count = write_records(records, args.out)
    print(f"rewrote {count} records to {args.out}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, _overrides(args))
    vocab = _vocabulary(args)
    sequences = load_dataset(args.data, vocab, age_index=config.data.age_index,
                             max_age_years=config.data.max_age_years)
    if not sequences:
        raise InputError(f"{args.data} holds no sequences with events")
    train, val, _ = split(sequences, config.data.split, config.train.seed) if len(sequences) >= 3 else (sequences, [], [])
    n_demographics = len(sequences[0].demographics)
    model = ModelState(vocab, config, n_demographics)
    result = pretrain(model, train, val, out_dir=args.out, threads=args.threads)
    print(f"pre-trained for {result.steps} steps; checkpoint in {args.out}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    model.config = load_run_config(args.config, _overrides(args), base=model.config.model_dump(mode="json"))
    examples = load_task_data(args.task_data, model.vocab, age_index=model.config.data.age_index,
                              max_age_years=model.config.data.max_age_years)
    train, val, _ = split(examples, (0.8, 0.2, 0.0), model.config.train.seed) if len(examples) >= 2 else (examples, [], [])
    _, result = finetune(model, train, val, args.task, out_dir=args.out, threads=args.threads)
    print(f"fine-tuned task {args.task!r} for {result.steps} steps; checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    instances = args.instances or str(Path(args.out).with_suffix(".csv"))
    if args.task_data:
        if not args.task:
            raise InputError("--task is required with --task-data")
        examples = load_task_data(args.task_data, model.vocab, age_index=model.config.data.age_index,
                                  max_age_years=model.config.data.max_age_years)
        scores = task_scores(model, examples, args.task)
        labels = [e.label for e in examples]
        auroc, auprc, f1 = binary_metrics(scores, labels)
        report = {"auroc": auroc, "auprc": auprc, "f1": f1, "n_instances": float(len(examples))}
        rows = [{"patient_id": e.seq.patient_id, "score": s, "label": e.label} for e, s in zip(examples, scores)]
        write_instances(rows, ["patient_id", "score", "label"], instances)
    else:
        if not args.data:
            raise InputError("eval needs --data (code prediction) or --task-data with --task")
        sequences = load_dataset(args.data, model.vocab, age_index=model.config.data.age_index,
                                 max_age_years=model.config.data.max_age_years)
        predictions = code_predictions(model, sequences)
        report = code_metrics([p for _, _, p in predictions])
        rows = [
            {
                "patient_id": pid,
                "event_index": j,
                "top1": model.vocab.codes[int(p.top_k(1)[0])],
                "top1_score": float(p.scores[p.top_k(1)[0]]),
                "truth": " ".join(model.vocab.codes[c] for c in sorted(p.truth)),
            }
            for pid, j, p in predictions
        ]
        write_instances(rows, ["patient_id", "event_index", "top1", "top1_score", "truth"], instances)
    write_report(report, args.out)
    for key in sorted(report):
        print(f"{key}\t{report[key]:.6f}")
    return EXIT_OK


def _gradcheck_setup(args: argparse.Namespace) -> tuple[ModelState, EventSequence]:
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
    else:
        config = load_run_config(
            args.config,
            ["model.d = 16", "model.d_z = 8", "time_weight.variant = polynomial", "time_weight.order = 5",
             "loss.n_mc = 16", *_overrides(args)],
        )
        vocab = random_vocabulary(6, 16, config.train.seed)
        model = ModelState(vocab, config, 2)
    if args.data:
        usable = pretrainable(load_dataset(args.data, model.vocab, age_index=model.config.data.age_index,
                                           max_age_years=model.config.data.max_age_years))
        if not usable:
            raise InputError(f"{args.data} has no sequence usable for the loss")
        return model, usable[0]
    rng = np.random.default_rng(model.config.train.seed)
    codes = rng.integers(model.vocab.size, size=5)
    demographics = ([1.0] + [0.5] * model.n_demographics)[: model.n_demographics]
    seq = EventSequence("gradcheck", [0.0, 0.4, 0.9, 1.5, 2.2], codes, demographics, 3.0)
    return model, seq


def cmd_gradcheck(args: argparse.Namespace) -> int:
    model, seq = _gradcheck_setup(args)
    params = list(model.named_parameters().values())
    error = ad.grad_check(lambda: loss_joint(model, seq, seed=args.seed or 0), params, args.eps,
                          max_coords=args.max_coords, seed=args.seed or 0)
    passed = error < args.tol
    print(f"max_relative_error\t{error:.3e}\t{'PASS' if passed else 'FAIL'} (tol {args.tol:g})")
    return EXIT_OK if passed else EXIT_RUNTIME


def cmd_dump_weights(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    rows = dump_curve(model.wfn, _grid(args.grid), args.out)
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


# Parser


def _add_vocab_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--vocab", default=None, help="vocabulary file (tsv or binary)")
    parser.add_argument("--vocab-format", choices=["tsv", "binary"], default=None,
                        help="vocabulary format; guessed from the extension when omitted")
    parser.add_argument("--random-vocab", default=None, metavar="N:D:SEED",
                        help="use a random Gaussian vocabulary instead of a file")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat 'section.key = value' config file")
    parser.add_argument("--set", action="append", default=None, metavar="KEY=VALUE",
                        help="override one config key (repeatable; wins over --config)")
    parser.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    parser.add_argument("--threads", type=int, default=settings.threads, help="batch-level worker threads")


def build_argparser() -> ArgumentParser:
    parser = ArgumentParser(prog="tale", description="Time-aware attention point-process model for EHR sequences",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sub.set_defaults(handler=handler)
        return sub

    synth = add("synth", cmd_synth, "simulate a synthetic dataset")
    synth.add_argument("--kind", choices=sorted(PROCESS_KINDS), required=True, help="process to simulate")
    synth.add_argument("--rate", type=float, default=1.0, help="constant rate (const_poisson, deterministic_code)")
    synth.add_argument("--rates", default=None, help="comma-separated segment rates (piecewise_poisson)")
    synth.add_argument("--mu", type=float, default=0.5, help="baseline rate (self_exciting)")
    synth.add_argument("--alpha-h", type=float, default=0.5, help="excitation (self_exciting)")
    synth.add_argument("--beta-h", type=float, default=1.0, help="decay (self_exciting)")
    synth.add_argument("--T", type=float, required=True, help="horizon in model time units")
    synth.add_argument("--n-seq", type=int, required=True, help="number of sequences")
    synth.add_argument("--n-codes", type=int, default=10, help="vocabulary size")
    synth.add_argument("--d-emb", type=int, default=64, help="embedding width of the random vocabulary")
    synth.add_argument("--seed", type=int, default=0, help="seeds the vocabulary and the process")
    synth.add_argument("--out", required=True, help="JSONL dataset path")
    synth.add_argument("--vocab-out", default=None, help="defaults to <out>.vocab.tsv")

    task = add("synth-task", cmd_synth_task, "write a labeled marker-window task")
    task.add_argument("--n-seq", type=int, required=True, help="number of labeled examples")
    task.add_argument("--n-codes", type=int, default=8, help="vocabulary size")
    task.add_argument("--marker-code", type=int, default=0, help="code whose recency decides the label")
    task.add_argument("--window-days", type=float, default=30.0, help="positive when the marker falls this many days before the cut")
    task.add_argument("--d-emb", type=int, default=64, help="embedding width of the random vocabulary")
    task.add_argument("--seed", type=int, default=0, help="seeds the vocabulary and the examples")
    task.add_argument("--out", required=True, help="JSONL task path")
    task.add_argument("--vocab-out", default=None, help="defaults to <out>.vocab.tsv")

    rollup = add("rollup", cmd_rollup, "rewrite codes of a dataset through a roll-up map")
    rollup.add_argument("--data", required=True, help="JSONL records to rewrite")
    rollup.add_argument("--map", required=True, help="two-column TSV: source<TAB>target")
    rollup.add_argument("--out", required=True, help="rewritten JSONL path")

    pre = add("pretrain", cmd_pretrain, "pre-train on the joint loss")
    pre.add_argument("--data", required=True, help="JSONL sequences")
    _add_vocab_flags(pre)
    _add_config_flags(pre)
    pre.add_argument("--out", default=str(Path(settings.output_dir) / "pretrain"), help="checkpoint directory")

    fine = add("finetune", cmd_finetune, "fine-tune a pre-trained checkpoint on a labeled task")
    fine.add_argument("--ckpt", required=True, help="pre-trained checkpoint (file or run directory)")
    fine.add_argument("--task-data", required=True, help="JSONL task examples")
    fine.add_argument("--task", required=True, help="name of the new task head")
    _add_config_flags(fine)
    fine.add_argument("--out", default=str(Path(settings.output_dir) / "finetune"), help="checkpoint directory")

    ev = add("eval", cmd_eval, "evaluate code prediction or a fine-tuned task")
    ev.add_argument("--ckpt", required=True, help="checkpoint (file or run directory)")
    ev.add_argument("--data", default=None, help="JSONL sequences for code-prediction metrics")
    ev.add_argument("--task-data", default=None, help="JSONL task examples for binary metrics")
    ev.add_argument("--task", default=None, help="task head to score with --task-data")
    ev.add_argument("--out", required=True, help="JSON report path")
    ev.add_argument("--instances", default=None, help="per-instance CSV; defaults to the report path with .csv")

    gc = add("gradcheck", cmd_gradcheck, "compare tape gradients of the joint loss with finite differences")
    gc.add_argument("--ckpt", default=None, help="checkpoint; a small random model when omitted")
    gc.add_argument("--data", default=None, help="JSONL sequences; a fixed 5-event sequence when omitted")
    gc.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    gc.add_argument("--tol", type=float, default=1e-4, help="largest accepted relative error")
    gc.add_argument("--max-coords", type=int, default=16, help="sampled coordinates per parameter tensor")
    _add_config_flags(gc)

    dump = add("dump-weights", cmd_dump_weights, "write the temporal weight curve w(dt) over a day grid")
    dump.add_argument("--ckpt", required=True, help="checkpoint (file or run directory)")
    dump.add_argument("--grid", default="0:730:1", metavar="START:STOP:STEP", help="inclusive day grid")
    dump.add_argument("--out", required=True, help="CSV path")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=settings.log_level)
    args = build_argparser().parse_args(argv)
    try:
        return args.handler(args)
    except (InputError, ValidationError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (TaleError, OSError) as exc:
        logger.exception("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
