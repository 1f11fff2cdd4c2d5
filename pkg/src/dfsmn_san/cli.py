"""Command-line entry point: train, eval, gradcheck, inspect, gen-corpus.

Exit codes: 0 success, 1 usage error, 2 check or validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .ctc import CtcError
from .datapipe import DataError, load_batch, save_batch
from .gradcheck import format_table, run_gradchecks
from .layers import AttentionLayer
from .model import (
    WEIGHTS_MAGIC,
    ConfigError,
    Model,
    WeightFileError,
    float32_megabytes,
    load_weights,
    param_count,
    save_weights,
)
from .training import (
    TrainingDiverged,
    config_from_dict,
    evaluate_cer,
    frontend,
    load_config,
    parse_config_text,
    prepare_corpus,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK = 2

log = logging.getLogger("dfsmn_san")


class UsageError(Exception):
    pass


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "deterministic", False):
        out["deterministic"] = "true"
    return out


def _out_dir(args: argparse.Namespace) -> Path:
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(args)
    try:
        model, runlog = train(cfg)
    except TrainingDiverged as exc:
        log.error("training aborted: %s", exc)
        return EXIT_CHECK
    save_weights(model, out / "weights.bin")
    (out / "runlog.txt").write_text(runlog.to_text())
    last = runlog.records[-1] if runlog.records else None
    print(f"weights: {out / 'weights.bin'}")
    print(f"runlog:  {out / 'runlog.txt'}")
    if last is not None:
        print(f"final epoch {last.epoch}: loss {last.loss:.6f}  cer {last.cer:.4f}")
    return EXIT_OK


def _eval_sets(data: Path) -> list[tuple[str, Path]]:
    if data.is_dir():
        sets = [(p.stem, p.with_suffix("")) for p in sorted(data.glob("*.feats"))]
    else:
        stem = data.with_suffix("") if data.suffix in (".feats", ".labels") else data
        sets = [(stem.name, stem)]
    if not sets:
        raise UsageError(f"no .feats files under {data}")
    return sets


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_weights(args.weights)
    rows = []
    for name, stem in _eval_sets(Path(args.data)):
        batch = load_batch(stem, model.config.output_labels)
        if not len(batch):
            raise DataError(f"test set {name} is empty")
        batch = frontend(model, batch)
        if batch.feat_dim != model.config.input_dim:
            raise DataError(
                f"test set {name}: features are {batch.feat_dim}-dim after the front end, "
                f"model expects {model.config.input_dim}"
            )
        rows.append((name, len(batch), evaluate_cer(model, batch)))
    width = max(len(r[0]) for r in rows)
    for name, count, value in rows:
        print(f"{name:<{width}}  {count:>6} utts  CER {100 * value:6.2f}%", file=sys.stderr)
    for name, _, value in rows:
        print(f"{name}\t{value:.6f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    values.update(_overrides(args))
    cfg = config_from_dict(values)
    sizes = (cfg.model.memory_n,) if "model.memory_n" in values else (1, 4)
    results = run_gradchecks(seed=cfg.seed, memory_sizes=sizes)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    print("all gradient checks passed")
    return EXIT_OK


def inspect_report(model: Model) -> str:
    lines = [f"architecture {model.config.architecture}: {' '.join(model.tags)}"]
    for prefix, module in model.modules():
        count = module.param_count()
        lines.append(f"{prefix:<24}{count:>12,d}")
        for name, value in module.named_parameters():
            shape = "x".join(str(s) for s in value.shape)
            lines.append(f"    {name:<28}{shape:>14}{value.size:>12,d}")
    total = model.param_count()
    memory = model.memory_param_count()
    share = memory / total if total else 0.0
    lines += [
        f"total parameters        {total:>12,d}",
        f"float32 size            {float32_megabytes(total):>12.1f} MB",
        f"memory variant          {model.config.memory_variant:>12} (N={model.config.memory_n})",
        f"memory parameters       {memory:>12,d}",
        f"memory share            {100 * share:>11.3f}%",
    ]
    return "\n".join(lines)


def cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.weights)
    with open(path, "rb") as fh:
        head = fh.read(len(WEIGHTS_MAGIC))
    if head == WEIGHTS_MAGIC.encode():
        model = load_weights(path)
    else:
        # a training config: describe the model it would build
        cfg = load_config(path, _overrides(args))
        model = Model(cfg.model, cfg.seed)
        assert model.param_count() == param_count(cfg.model)
    print(inspect_report(model))
    return EXIT_OK


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides(args))
    if cfg.train_path:
        raise UsageError("gen-corpus needs a synthetic data.* section, not train_path")
    out = _out_dir(args)
    train_set, test_set = prepare_corpus(cfg)
    save_batch(out / "train", train_set)
    save_batch(out / "test", test_set)
    print(f"wrote {len(train_set)} train and {len(test_set)} test sequences to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise-reproducible run")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dfsmn-san", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train a model from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="greedy-decode CER per test set")
    p.add_argument("weights")
    p.add_argument("data", help="a <stem>, <stem>.feats, or a directory of *.feats/*.labels pairs")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check every layer")
    p.add_argument("config", nargs="?", default=None)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("inspect", parents=[common], help="layer shapes and parameter counts")
    p.add_argument("weights", help="weight file, or a config file to size without training")
    p.set_defaults(func=cmd_inspect)
    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus")
    p.add_argument("config")
    p.set_defaults(func=cmd_gen_corpus)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WeightFileError, DataError, CtcError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
