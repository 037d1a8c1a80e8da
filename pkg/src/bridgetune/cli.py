"""Command-line surface for the bridge-regularized PET pipeline.

Subcommands: pretrain, fit-map, train-pet, eval, fewshot, sample-bridge,
analyze. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import bridges
from .analysis import (StatisticsError, bridge_distance, centroid_distance,
                       pearson, trace_from_arrays)
from .backbone import (ModelConfig, PretrainConfig, freeze, load_backbone,
                       masked_accuracy, mlm_samples, pretrain_mlm,
                       save_backbone)
from .latent_map import (EndpointTable, FitMapConfig, build_endpoints,
                         fit_map, load_mapnet, save_mapnet)
from .pets import PetConfig, load_pet
from .pipeline import TrainConfig, evaluate, fewshot_split, run_training
from .snapshot import SnapshotFormatError, load_snapshot
from .tasks import (DataError, load_jsonl, make_pretrain_corpus,
                    make_task_dataset, write_jsonl)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dataclass_from(cls, section: dict, overrides: dict):
    """Defaults, then config-file section, then explicit CLI overrides."""
    values = {}
    known = {f.name for f in fields(cls)}
    for src in (section, overrides):
        for key, val in src.items():
            if key in known and val is not None:
                values[key] = val
    return cls(**values)


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read config {path}: {e}") from e


def _build_parser():
    parser = _Parser(prog="bridgetune",
                     description="Stochastic-bridge regularizers for PET training")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file with section overrides")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")

    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("pretrain", parents=[common],
                       help="build and pretrain the frozen backbone")
    p.add_argument("--steps", type=int, default=2500)
    p.add_argument("--corpus-size", type=int, default=300)
    p.add_argument("--seq-len", type=int, default=12)

    p = sub.add_parser("fit-map", parents=[common],
                       help="fit the latent mapping on a frozen backbone")
    p.add_argument("--backbone", required=True)
    p.add_argument("--corpus", required=True, help="corpus JSON from pretrain")
    p.add_argument("--method", choices=["pdf", "sde"], required=True)
    p.add_argument("--bridge", choices=[bridges.BROWNIAN, bridges.OU],
                   default=bridges.BROWNIAN)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--latent-dim", type=int, default=None)

    p = sub.add_parser("train-pet", parents=[common],
                       help="train one PET with an optional bridge regularizer")
    p.add_argument("--backbone", required=True)
    p.add_argument("--map", help="map snapshot (required unless method none)")
    p.add_argument("--pet", choices=["prompt", "lora", "bitfit", "adapter"],
                   required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--method", choices=["none", "pdf", "sde"], default=None)
    p.add_argument("--bridge", choices=[bridges.BROWNIAN, bridges.OU], default=None)
    p.add_argument("--train", required=True, help="training JSONL")
    p.add_argument("--dev", required=True, help="dev JSONL")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--metric", choices=["accuracy", "f1", "matthews"], default=None)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a PET checkpoint on a dataset")
    p.add_argument("--backbone", required=True)
    p.add_argument("--pet", required=True, help="PET snapshot path")
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=["accuracy", "f1", "matthews"],
                   default="accuracy")

    p = sub.add_parser("fewshot", parents=[common],
                       help="build k-shot train/dev splits over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("sample-bridge", parents=[common],
                       help="sample bridge paths to CSV")
    p.add_argument("--bridge", choices=[bridges.BROWNIAN, bridges.OU],
                   default=bridges.BROWNIAN)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--paths", type=int, default=3)
    p.add_argument("--q", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)

    p = sub.add_parser("analyze", parents=[common],
                       help="centroid/bridge-distance analysis over run dirs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--map", help="map snapshot for bridge distances")

    p = sub.add_parser("make-task", parents=[common],
                       help="generate a synthetic downstream dataset")
    p.add_argument("--per-class", type=int, default=None,
                   help="examples per class (default 80)")
    p.add_argument("--seq-len", type=int, default=None,
                   help="sequence length before the mask (default 12)")
    p.add_argument("--mix", type=float, default=None,
                   help="minority-topic mixing rate (default 0.35)")

    return parser


def _cmd_pretrain(args):
    cfg_file = _load_config(args.config)
    model_cfg = _dataclass_from(ModelConfig, cfg_file.get("model", {}), {})
    rng = np.random.default_rng(args.seed)
    corpus = make_pretrain_corpus(args.corpus_size, args.seq_len, rng)
    holdout = make_pretrain_corpus(60, args.seq_len, rng)
    pre_cfg = _dataclass_from(PretrainConfig, cfg_file.get("pretrain", {}),
                              {"max_steps": args.steps, "seed": args.seed})
    state = freeze(pretrain_mlm(model_cfg, corpus, pre_cfg))
    os.makedirs(args.out, exist_ok=True)
    save_backbone(os.path.join(args.out, "backbone.bin"), state)
    with open(os.path.join(args.out, "corpus.json"), "w", encoding="utf-8") as f:
        json.dump(corpus, f)
    acc = masked_accuracy(state, mlm_samples(holdout, np.random.default_rng(args.seed)))
    print(f"held-out masked accuracy: {acc:.4f}")
    print(f"wrote {os.path.join(args.out, 'backbone.bin')}")
    return 0


def _load_corpus(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            corpus = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    if not isinstance(corpus, list) or not corpus:
        raise DataError(f"{path}: expected a non-empty list of sequences")
    return corpus


def _cmd_fit_map(args):
    cfg_file = _load_config(args.config)
    state = load_backbone(args.backbone)
    corpus = _load_corpus(args.corpus)
    overrides = {"method": args.method, "bridge_kind": args.bridge,
                 "max_steps": args.steps, "latent_dim": args.latent_dim,
                 "seed": args.seed}
    cfg = _dataclass_from(FitMapConfig, cfg_file.get("fitmap", {}), overrides)
    eta = args.eta if args.eta is not None else 1.0
    endpoints = build_endpoints(state["embed"].data, cfg.latent_dim, eta)
    rng = np.random.default_rng(args.seed)
    samples = mlm_samples(corpus, rng)
    mapnet, history = fit_map(state, samples, cfg, endpoints)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"map-{args.method}.bin")
    save_mapnet(path, mapnet, args.method, endpoints,
                bridge_kind=cfg.bridge_kind, q=cfg.q, sigma=cfg.sigma)
    final = history[-1] if history else (0, float("nan"), float("nan"))
    print(f"final training loss: {final[1]:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_train_pet(args):
    cfg_file = _load_config(args.config)
    state = load_backbone(args.backbone)
    overrides = {
        "alpha": args.alpha, "method": args.method, "bridge_kind": args.bridge,
        "learning_rate": args.lr, "batch_size": args.batch_size,
        "max_steps": args.steps, "eval_every": args.eval_every,
        "seed": args.seed, "metric": args.metric,
    }
    cfg = _dataclass_from(TrainConfig, cfg_file.get("train", {}), overrides)
    pet_cfg = _dataclass_from(PetConfig, cfg_file.get("pet", {}),
                              {"kind": args.pet})
    mapnet = endpoints = None
    if args.map is not None:
        mapnet, endpoints, _ = load_mapnet(args.map)
    elif cfg.method != "none":
        raise DataError(f"method {cfg.method!r} requires --map")
    train_set = load_jsonl(args.train)
    dev_set = load_jsonl(args.dev)
    _, _, summary = run_training(args.out, state, pet_cfg, mapnet, endpoints,
                                 train_set, dev_set, cfg)
    print(f"best dev {cfg.metric}: {summary['best_dev_metric']:.4f} "
          f"at step {summary['best_step']}")
    print(f"wrote {os.path.join(args.out, 'metrics.csv')}")
    return 0


def _cmd_eval(args):
    _load_config(args.config)  # validate even though no section applies
    state = load_backbone(args.backbone)
    pet = load_pet(args.pet, state)
    data = load_jsonl(args.data)
    value = evaluate(state, pet, data, args.metric)
    print(f"{args.metric}: {value:.6f}")
    return 0


def _cmd_fewshot(args):
    _load_config(args.config)
    data = load_jsonl(args.data)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.seeds):
        seed = args.seed + i
        train, dev = fewshot_split(data, args.k, seed)
        d = os.path.join(args.out, f"seed{seed}")
        os.makedirs(d, exist_ok=True)
        write_jsonl(os.path.join(d, "train.jsonl"), train)
        write_jsonl(os.path.join(d, "dev.jsonl"), dev)
        print(f"seed {seed}: {len(train)} train / {len(dev)} dev -> {d}")
    return 0


def _cmd_sample_bridge(args):
    _load_config(args.config)
    spec = bridges.BridgeSpec(kind=args.bridge, beta=np.asarray([args.beta]),
                              horizon=1.0, q=args.q, sigma=args.sigma)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bridge_paths.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("path,t,value\n")
        for p in range(args.paths):
            sample = bridges.sample_path(spec, args.steps, rng)
            # --steps rows per path: the pinned terminal point is omitted
            for k in range(args.steps):
                f.write(f"{p},{float(sample.times[k])!r},"
                        f"{float(sample.values[k, 0])!r}\n")
    print(f"wrote {path}")
    return 0


def _cmd_analyze(args):
    _load_config(args.config)
    mapnet = endpoints = header = None
    if args.map is not None:
        mapnet, endpoints, header = load_mapnet(args.map)
    rows = []
    for run in args.runs:
        cfg_path = os.path.join(run, "config.json")
        probe_path = os.path.join(run, "probe.bin")
        try:
            with open(cfg_path, "r", encoding="utf-8") as f:
                cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read {cfg_path}: {e}") from e
        alpha = cfg["train"]["alpha"]
        probe_header, tensors = load_snapshot(probe_path)
        labels = probe_header["labels"]
        by_label = {}
        dists = []
        for i, label in enumerate(labels):
            h_out = tensors[f"s{i}.h_out"]
            by_label.setdefault(label, []).append(h_out[-1])
            if mapnet is not None:
                trace = trace_from_arrays(h_out, tensors[f"s{i}.h_ctx"])
                spec = bridges.BridgeSpec(
                    kind=header.get("bridge_kind", bridges.BROWNIAN),
                    beta=endpoints.row(label), horizon=1.0,
                    q=header.get("q", 1.0), sigma=header.get("sigma", 1.0))
                total, per_layer = bridge_distance(trace, mapnet, spec)
                dists.append((total, per_layer))
        row = {"run": run, "alpha": alpha,
               "centroid_distance": centroid_distance(by_label)}
        if dists:
            row["bridge_distance_sum"] = sum(d[0] for d in dists) / len(dists)
            row["bridge_distance_per_layer"] = sum(d[1] for d in dists) / len(dists)
        rows.append(row)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "analyze.csv")
    cols = list(rows[0].keys())
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float)
                             else str(row[c]) for c in cols) + "\n")
    print(f"wrote {out_path}")

    alphas = [row["alpha"] for row in rows]
    cds = [row["centroid_distance"] for row in rows]
    try:
        r, p = pearson(alphas, cds)
        print(f"pearson(alpha, centroid_distance): r={r:.6f} p={p:.6f}")
    except StatisticsError as e:
        print(f"pearson(alpha, centroid_distance): not computable ({e})")
    return 0


def _cmd_make_task(args):
    section = _load_config(args.config).get("task", {})

    def resolve(flag, key, fallback):
        return flag if flag is not None else section.get(key, fallback)

    rng = np.random.default_rng(args.seed)
    samples = make_task_dataset(resolve(args.per_class, "per_class", 80),
                                resolve(args.seq_len, "seq_len", 12),
                                resolve(args.mix, "mix", 0.35), rng)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "task.jsonl")
    write_jsonl(path, samples)
    print(f"wrote {path} ({len(samples)} samples)")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "fit-map": _cmd_fit_map,
    "train-pet": _cmd_train_pet,
    "eval": _cmd_eval,
    "fewshot": _cmd_fewshot,
    "sample-bridge": _cmd_sample_bridge,
    "analyze": _cmd_analyze,
    "make-task": _cmd_make_task,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help paths
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (DataError, SnapshotFormatError, StatisticsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli())
