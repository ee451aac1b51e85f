"""Command-line front door: gen-data, train, evaluate, retrieve, gradcheck.

Every command writes a run manifest next to its outputs recording the fully
resolved configuration, seeds and paths. Exit codes: 0 success, 1 usage or
config error, 2 runtime/numeric failure.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from . import tensor as T
from .data import (SynthConfig, generate_synthetic, load_dataset, save_dataset, split)
from .errors import ContractError, DatasetFormatError, CheckpointError, TrainingDivergedError
from .losses import LossWeights, combined_loss
from .model import ModelConfig, embed
from .retrieval import (build_index, evaluate_cross_modal, metrics_to_csv,
                        retrieve, summary_table)
from .trainer import TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _parse_kv_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            values[key] = value
    return values


def _parse_sets(pairs):
    values = {}
    for item in pairs or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _write_manifest(out_dir, command, config, inputs, outputs, seed, started):
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = os.path.join(out_dir, f"manifest_{command.replace('-', '_')}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _ensure_out_dir(path, mkdirs):
    directory = path if os.path.splitext(path)[1] == "" else os.path.dirname(path) or "."
    if not os.path.isdir(directory):
        if mkdirs:
            os.makedirs(directory, exist_ok=True)
        else:
            raise ContractError(f"output directory {directory!r} does not exist "
                                "(pass --mkdirs to create it)")


def _split_dataset(ds, fractions_str, seed):
    fractions = tuple(float(f) for f in fractions_str.split(","))
    return split(ds, fractions, seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    started = _now()
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config:
        config = SynthConfig.from_file(args.config, overrides)
    else:
        config = SynthConfig.from_mapping(overrides)
    _ensure_out_dir(args.out, args.mkdirs)
    ds = generate_synthetic(config)
    save_dataset(ds, args.out)
    out_dir = os.path.dirname(args.out) or "."
    _write_manifest(out_dir, "gen-data", config.__dict__ | {"labels_per_tuple":
                    list(config.labels_per_tuple)},
                    {"config_file": args.config}, {"dataset": args.out},
                    config.seed, started)
    print(f"wrote {len(ds)} tuples x {ds.num_modalities} modalities to {args.out}")
    return EXIT_OK


def _model_config_from_args(args, input_dim):
    values = {"input_dim": input_dim}
    if args.model_config:
        raw = _parse_kv_file(args.model_config)
        casts = {"num_modalities": int, "input_dim": int, "feature_dim": int,
                 "embedding_dim": int, "activation": str, "seed": int,
                 "backbone_hidden_dims": lambda s: tuple(int(x) for x in s.split(","))}
        for key, value in raw.items():
            if key not in casts:
                raise ContractError(f"unknown model config key {key!r}")
            values[key] = casts[key](value)
    return ModelConfig(**values)


def cmd_train(args):
    started = _now()
    ds = load_dataset(args.dataset)
    model_config = _model_config_from_args(args, ds.input_dim)
    train_values = _parse_kv_file(args.train_config) if args.train_config else {}
    train_values.update(_parse_sets(args.set))
    for flag in ("epochs", "batch_size", "seed"):
        if getattr(args, flag) is not None:
            train_values[flag] = str(getattr(args, flag))
    if args.lr is not None:
        train_values["learning_rate"] = str(args.lr)
    train_config = TrainConfig.from_mapping(train_values)

    os.makedirs(args.out_dir, exist_ok=True)
    ds_train, ds_val, _ = _split_dataset(ds, args.split, args.split_seed)
    params, report = train(ds_train, ds_val, model_config, train_config,
                           out_dir=args.out_dir, resume_from=args.resume_from)
    csv_path = os.path.join(args.out_dir, "train_report.csv")
    report.to_csv(csv_path, include_timing=args.timing)
    final = report.epochs[-1]
    ckpt = os.path.join(args.out_dir, f"checkpoint_epoch{final.epoch}.ckpt")
    _write_manifest(args.out_dir, "train",
                    {"model": model_config.to_dict(), "train": train_config.to_dict(),
                     "split": args.split, "split_seed": args.split_seed},
                    {"dataset": args.dataset},
                    {"report_csv": csv_path, "checkpoint": ckpt},
                    train_config.seed, started)
    print(f"epoch {final.epoch}: mim={final.mim:.6f} mde={final.mde:.6f} "
          f"msp={final.msp:.6f} total={final.total:.6f} "
          f"alpha={final.alpha:.6g} beta={final.beta:.6g}")
    return EXIT_OK


_SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


def cmd_evaluate(args):
    started = _now()
    params, _, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    parts = _split_dataset(ds, args.split, args.split_seed)
    query_ds = parts[_SPLIT_INDEX[args.query_split]]
    index_ds = parts[_SPLIT_INDEX[args.index_split]]
    index = build_index(params, index_ds)

    if args.direction == "both":
        directions = [(0, 1), (1, 0)]
    else:
        src, tgt = (int(x) for x in args.direction.split("->"))
        directions = [(src, tgt)]
    reports = [evaluate_cross_modal(params, index, query_ds, src, tgt, k=args.k)
               for src, tgt in directions]
    _ensure_out_dir(args.out, args.mkdirs)
    metrics_to_csv(reports, args.out)
    out_dir = os.path.dirname(args.out) or "."
    _write_manifest(out_dir, "evaluate",
                    {"k": args.k, "direction": args.direction,
                     "query_split": args.query_split, "index_split": args.index_split,
                     "split": args.split, "split_seed": args.split_seed},
                    {"checkpoint": args.checkpoint, "dataset": args.dataset},
                    {"metrics_csv": args.out}, args.split_seed, started)
    print(summary_table(reports))
    return EXIT_OK


def cmd_retrieve(args):
    params, _, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    by_id = {g[0].tuple_id: g for g in ds.tuples}
    if args.query_id not in by_id:
        raise ContractError(f"tuple_id {args.query_id} not in dataset")
    rec = by_id[args.query_id][args.src]
    q = embed(params, args.src, rec.features[None, :]).data[0]
    index = build_index(params, ds)
    result = retrieve(index, q, args.tgt, args.k, exclude_tuple_id=args.query_id,
                      query_id=args.query_id, query_modality=args.src)
    for rank, (tid, score) in enumerate(result.items, 1):
        print(f"{args.query_id},{rank},{tid},{score:.17g}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .model import init_params, forward_backbone, forward_encoder
    from .losses import loss_mim, loss_mde, loss_msp

    if args.trials < 1:
        raise ContractError("gradcheck needs at least one trial")
    rng = np.random.default_rng(args.seed)
    t_batch, dim = args.batch, args.dims
    worst = {"mim": 0.0, "mde": 0.0, "msp": 0.0, "combined": 0.0}
    weights = LossWeights(alpha=0.7, beta=0.4, tau=0.2)

    def check(name, f, x0):
        x = T.Tensor(x0, grad_enabled=True)
        loss = f(x)
        T.backward(loss)
        analytic = x.grad
        numeric = T.finite_diff_grad(lambda t: f(t), x0, h=1e-5).data
        worst[name] = max(worst[name], T.rel_error(analytic, numeric))

    for _ in range(args.trials):
        z_j = rng.normal(size=(t_batch, dim))
        z_k = rng.normal(size=(t_batch, dim))
        y_k = rng.normal(size=(t_batch, dim))
        check("mim", lambda x: loss_mim(x, T.Tensor(z_k), 0.2), z_j)
        check("mde", lambda x: loss_mde(x, T.Tensor(y_k)), z_j)
        check("msp", lambda x: loss_msp(x, T.Tensor(y_k)), z_j)
        check("combined",
              lambda x: combined_loss(x, T.Tensor(z_k), x, T.Tensor(y_k),
                                      weights).total_node, z_j)
    failed = [name for name, err in worst.items() if err >= 1e-4]
    for name, err in worst.items():
        status = "FAIL" if name in failed else "ok"
        print(f"{name:<10} max rel error {err:.3e}  {status}")
    if failed:
        print(f"gradcheck FAILED for: {', '.join(failed)}")
        return EXIT_RUNTIME
    print("gradcheck passed")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="xmodal",
                                     description="Self-supervised cross-modal retrieval pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired-modality dataset")
    p.add_argument("--config", help="key=value SynthConfig file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--mkdirs", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model-config", help="key=value ModelConfig file")
    p.add_argument("--train-config", help="key=value TrainConfig file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="0.52,0.24,0.24")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--resume-from")
    p.add_argument("--timing", action="store_true",
                   help="include wall time in the report CSV (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="cross-modal retrieval metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--query-split", default="train", choices=sorted(_SPLIT_INDEX))
    p.add_argument("--index-split", default="test", choices=sorted(_SPLIT_INDEX))
    p.add_argument("--direction", default="both",
                   help="'both' or 'SRC->TGT' with modality indices")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--split", default="0.52,0.24,0.24")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mkdirs", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve", help="dump ranked results for a single query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--src", type=int, default=0)
    p.add_argument("--tgt", type=int, default=1)
    p.add_argument("--k", type=int, default=8)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; remap to the documented 1
        raise SystemExit(EXIT_USAGE if exc.code else EXIT_OK) from None
    try:
        return args.func(args)
    except (ContractError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDivergedError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
