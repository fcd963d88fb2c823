"""``voxelformer`` command line: generate, train, eval, params.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a
valid run fails (I/O error, non-finite loss, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .data import (
    dataset_exists,
    generate,
    least_squares_oracle,
    load_dataset,
    write_dataset,
)
from .errors import ConfigError, ContractError, ShapeError
from .model import VoxelFormer
from .retrieval import evaluate
from .train import STREAM_INIT, count_params, embedder, load_trained, stream, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.data.seed = args.seed
    if getattr(args, "data", None):
        cfg.dataset_path = str(args.data)
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise ConfigError("generate needs --out")
    dataset = generate(cfg.data, cfg.model.merge, cfg.model.layers)
    path = write_dataset(dataset, args.out)
    summary = {"out": str(path), "subjects": [s.n_voxels for s in dataset.subjects],
               "train": int(dataset.train_ids.size), "test": int(dataset.test_ids.size)}
    if dataset.test_ids.size >= cfg.eval_pool_size:
        oracle = least_squares_oracle(dataset, cfg.eval_pool_size, cfg.eval_trials, cfg.seed)
        summary["least_squares_fwd_top1"] = oracle.fwd_top1
        summary["least_squares_bwd_top1"] = oracle.bwd_top1
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.checkpoint_path
    if not out:
        raise ConfigError("train needs --out (or checkpoint_path in the config)")
    result = train(cfg, out_dir=out, log=print)
    print(f"checkpoint: {Path(out) / 'checkpoint.bin'}")
    if result.report is not None:
        print(result.report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model, projection, cfg, _ = load_trained(args.checkpoint)
    data_path = args.data or cfg.dataset_path
    if data_path:
        if not dataset_exists(data_path):
            raise ConfigError(f"no dataset at {data_path}")
        dataset = load_dataset(data_path)
    else:
        dataset = generate(cfg.data, cfg.model.merge, cfg.model.layers)
    pool = args.pool_size if args.pool_size is not None else cfg.eval_pool_size
    trials = args.trials if args.trials is not None else cfg.eval_trials
    seed = args.seed if args.seed is not None else cfg.seed
    report = evaluate(embedder(model), dataset, projection, pool, trials, seed)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.to_json())
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _config(args)
    cfg.model.validate()
    count = count_params(VoxelFormer(cfg.model, stream(cfg.seed, STREAM_INIT)))
    print(count.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxelformer", description="Voxel-to-embedding decoder on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="single source of all randomness")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, "dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and checkpoint a model")
    common(p, "run directory for metrics.jsonl and checkpoint.bin")
    p.add_argument("--data", help="dataset directory (generated in memory when omitted)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval report for a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--data", help="dataset directory (defaults to the one used for training)")
    p.add_argument("--pool-size", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write the per-subject CSV table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter count by module")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
