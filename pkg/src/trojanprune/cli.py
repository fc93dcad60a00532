"""Batch command-line front door.

Subcommands cover the full flow (make-data, train, score, prune, eval), the
composite pipeline, and the reporting extras (sweep, ablate, wilcoxon). A JSON
config drives everything; flags override file values, and the fully resolved
config is echoed next to every artifact so any output can be reproduced from
its own metadata.

Exit codes: 0 ok, 2 usage/config, 3 data stage, 4 train stage, 5 score stage,
6 prune stage, 7 eval stage.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import (
    ablate,
    default_mu_grid,
    evaluate,
    sweep_mu,
    wilcoxon_signed_rank,
    write_ablation_csv,
    write_sweep_csv,
    write_wilcoxon_json,
)
from .network import ConvBlock, NetworkSpec, init_params, load_model, save_model
from .poison import (
    Dataset,
    PoisonConfig,
    TriggerSpec,
    build_asr_eval_set,
    build_defense_set,
    generate_synthetic,
    load_cifar_binary,
    load_dataset,
    poison_dataset,
    save_dataset,
)
from .pruning import PruneConfig, PruneReport, prune
from .scoring import VARIANTS, ScoreTable, score_network
from .training import TrainConfig, train

STAGE_CODES = {"usage": 2, "data": 3, "train": 4, "score": 5, "prune": 6, "eval": 7}

ARTIFACTS = {
    "config": "resolved_config.json",
    "train_set": "train_poisoned.pdst",
    "test_set": "test_clean.pdst",
    "asr_set": "asr_eval.pdst",
    "defense_set": "defense.pdst",
    "model": "model_backdoored.bdnp",
    "history": "history.csv",
    "scores": "scores.csv",
    "pruned_model": "model_pruned.bdnp",
    "prune_report": "prune_report.json",
    "summary": "summary.json",
    "sweep": "sweep.csv",
    "ablation": "ablation.csv",
    "wilcoxon": "wilcoxon.json",
}

DEFAULT_CONFIG = {
    "seed": 0,
    "precision": "float32",
    "output_dir": "out",
    "deterministic": True,
    "dataset": {
        "source": "synthetic",
        "classes": 4,
        "size": 16,
        "per_class_train": 100,
        "per_class_test": 50,
        "noise": 0.18,
        "train_seed": None,
        "test_seed": None,
        "train_paths": [],
        "test_paths": [],
    },
    "network": {
        "channels": [16, 32, 64],
        "pools": [True, True, False],
        "kernel_size": 3,
        "stride": 1,
        "padding": 1,
        "bn_eps": 1e-5,
        "init_seed": None,
    },
    "poison": {
        "target_label": 0,
        "rate": 0.1,
        "seed": None,
        "trigger": {
            "kind": "patch",
            "size": 3,
            "position": "bottom-right",
            "value": 1.0,
            "alpha": 0.2,
            "pattern_seed": 0,
        },
    },
    "train": {
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "shuffle": True,
        "seed": None,
    },
    "defense": {"seed": None},
    "prune": {"mu": 3.5, "eps": 0.01, "variant": "full"},
    "sweep": {"mu_start": 0.0, "mu_stop": 10.0, "mu_step": 0.5},
}

# Sub-seed derivation order; a single run seed fans out deterministically.
_STAGE_STREAMS = ("data_train", "data_test", "poison", "init", "train", "defense")


class CommandError(Exception):
    def __init__(self, code: int, stage: str, message: str):
        super().__init__(message)
        self.code = code
        self.stage = stage


def _usage_error(message: str) -> CommandError:
    return CommandError(STAGE_CODES["usage"], "usage", message)


def _derive_seed(master: int, stream: str) -> int:
    idx = _STAGE_STREAMS.index(stream)
    return int(np.random.SeedSequence([int(master), idx]).generate_state(1)[0])


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(raw: dict, args) -> dict:
    """Merge file values over defaults, apply flag overrides, fan out seeds."""
    if not isinstance(raw, dict):
        raise _usage_error("config file must hold a JSON object")
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise _usage_error(f"unknown config keys: {sorted(unknown)}")
    cfg = _deep_merge(DEFAULT_CONFIG, raw)

    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        cfg["output_dir"] = args.out_dir
    if getattr(args, "mu", None) is not None:
        cfg["prune"]["mu"] = args.mu
    if getattr(args, "variant", None) is not None:
        cfg["prune"]["variant"] = args.variant
    if getattr(args, "alpha", None) is not None:
        cfg["poison"]["trigger"]["alpha"] = args.alpha
    if getattr(args, "poison_rate", None) is not None:
        cfg["poison"]["rate"] = args.poison_rate
    if getattr(args, "target_label", None) is not None:
        cfg["poison"]["target_label"] = args.target_label
    if getattr(args, "deterministic", False):
        cfg["deterministic"] = True

    master = cfg["seed"]
    ds = cfg["dataset"]
    if ds["train_seed"] is None:
        ds["train_seed"] = _derive_seed(master, "data_train")
    if ds["test_seed"] is None:
        ds["test_seed"] = _derive_seed(master, "data_test")
    if cfg["poison"]["seed"] is None:
        cfg["poison"]["seed"] = _derive_seed(master, "poison")
    if cfg["network"]["init_seed"] is None:
        cfg["network"]["init_seed"] = _derive_seed(master, "init")
    if cfg["train"]["seed"] is None:
        cfg["train"]["seed"] = _derive_seed(master, "train")
    if cfg["defense"]["seed"] is None:
        cfg["defense"]["seed"] = _derive_seed(master, "defense")

    if cfg["precision"] not in ("float32", "float64"):
        raise _usage_error(f"precision must be float32 or float64, got {cfg['precision']!r}")
    if ds["source"] not in ("synthetic", "cifar-binary"):
        raise _usage_error(f"dataset source must be synthetic or cifar-binary, got {ds['source']!r}")
    if cfg["prune"]["variant"] not in VARIANTS:
        raise _usage_error(f"variant must be one of {VARIANTS}, got {cfg['prune']['variant']!r}")
    return cfg


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise _usage_error(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise _usage_error(f"config file {p} is not valid JSON: {e}")


def _out_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _artifact(cfg, name) -> Path:
    return _out_dir(cfg) / ARTIFACTS[name]


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _write_meta(path: Path, cfg: dict) -> None:
    _write_json(Path(str(path) + ".meta.json"), {"config": cfg})


def _echo_config(cfg) -> None:
    _write_json(_artifact(cfg, "config"), cfg)


def _require_inputs(cfg, names) -> None:
    missing = [str(_artifact(cfg, n)) for n in names if not _artifact(cfg, n).is_file()]
    if missing:
        raise _usage_error(f"missing input file(s): {', '.join(missing)}")


def _network_spec(cfg, in_channels: int, image_size: int, num_classes: int) -> NetworkSpec:
    net = cfg["network"]
    if len(net["channels"]) != len(net["pools"]):
        raise _usage_error("network.channels and network.pools must have equal lengths")
    blocks = tuple(
        ConvBlock(int(c), int(net["kernel_size"]), int(net["stride"]), int(net["padding"]), pool=bool(p))
        for c, p in zip(net["channels"], net["pools"])
    )
    return NetworkSpec(in_channels=in_channels, image_size=image_size,
                       blocks=blocks, num_classes=num_classes, bn_eps=float(net["bn_eps"]))


def _trigger(cfg) -> TriggerSpec:
    return TriggerSpec.from_dict(cfg["poison"]["trigger"])


def _load_sets(cfg, names):
    classes = _num_classes(cfg)
    return [load_dataset(_artifact(cfg, n), num_classes=classes) for n in names]


def _num_classes(cfg) -> int:
    if cfg["dataset"]["source"] == "synthetic":
        return int(cfg["dataset"]["classes"])
    return 10


def stage_data(cfg) -> None:
    """Build the poisoned train set, clean test set, ASR eval set, and defense set."""
    ds = cfg["dataset"]
    if ds["source"] == "synthetic":
        train_set = generate_synthetic(int(ds["classes"]), int(ds["per_class_train"]),
                                       int(ds["size"]), int(ds["train_seed"]),
                                       noise=float(ds["noise"]))
        test_set = generate_synthetic(int(ds["classes"]), int(ds["per_class_test"]),
                                      int(ds["size"]), int(ds["test_seed"]),
                                      noise=float(ds["noise"]))
    else:
        if not ds["train_paths"] or not ds["test_paths"]:
            raise _usage_error("cifar-binary source needs dataset.train_paths and dataset.test_paths")
        for p in [*ds["train_paths"], *ds["test_paths"]]:
            if not Path(p).is_file():
                raise _usage_error(f"missing input file: {p}")
        train_set = load_cifar_binary(ds["train_paths"])
        test_set = load_cifar_binary(ds["test_paths"])

    trigger = _trigger(cfg)
    poison_cfg = PoisonConfig(rate=float(cfg["poison"]["rate"]), trigger=trigger,
                              target_label=int(cfg["poison"]["target_label"]),
                              seed=int(cfg["poison"]["seed"]))
    poisoned = poison_dataset(train_set, poison_cfg)
    defense = build_defense_set(test_set, int(cfg["defense"]["seed"]))
    asr_set = build_asr_eval_set(test_set, trigger, poison_cfg.target_label)

    for name, dataset in (("train_set", poisoned.dataset), ("test_set", test_set),
                          ("asr_set", asr_set), ("defense_set", defense)):
        path = _artifact(cfg, name)
        save_dataset(dataset, path)
        _write_meta(path, cfg)


def stage_train(cfg) -> None:
    _require_inputs(cfg, ["train_set"])
    train_set = load_dataset(_artifact(cfg, "train_set"), num_classes=_num_classes(cfg))
    spec = _network_spec(cfg, train_set.images.shape[1], train_set.images.shape[2],
                         train_set.num_classes)
    params = init_params(spec, int(cfg["network"]["init_seed"]), cfg["precision"])
    tc = cfg["train"]
    config = TrainConfig(epochs=int(tc["epochs"]), batch_size=int(tc["batch_size"]),
                         learning_rate=float(tc["learning_rate"]),
                         momentum=float(tc["momentum"]), seed=int(tc["seed"]),
                         shuffle=bool(tc["shuffle"]))
    params, history = train(spec, params, train_set, config)
    model_path = _artifact(cfg, "model")
    save_model(spec, params, model_path)
    _write_meta(model_path, cfg)
    history_path = _artifact(cfg, "history")
    history.to_csv(history_path)
    _write_meta(history_path, cfg)


def stage_score(cfg, model_path=None) -> None:
    model_path = Path(model_path) if model_path else _artifact(cfg, "model")
    if not model_path.is_file():
        raise _usage_error(f"missing input file: {model_path}")
    _require_inputs(cfg, ["defense_set"])
    spec, params = load_model(model_path)
    defense = load_dataset(_artifact(cfg, "defense_set"), num_classes=spec.num_classes)
    table = score_network(spec, params, defense, variant=cfg["prune"]["variant"],
                          eps=float(cfg["prune"]["eps"]))
    scores_path = _artifact(cfg, "scores")
    table.to_csv(scores_path)
    _write_meta(scores_path, cfg)


def stage_prune(cfg) -> None:
    _require_inputs(cfg, ["model", "scores"])
    spec, params = load_model(_artifact(cfg, "model"))
    table = ScoreTable.from_csv(_artifact(cfg, "scores"), eps=float(cfg["prune"]["eps"]))
    pruned, report = prune(spec, params, table,
                           PruneConfig(mu=float(cfg["prune"]["mu"]), eps=float(cfg["prune"]["eps"])))
    pruned_path = _artifact(cfg, "pruned_model")
    save_model(spec, pruned, pruned_path)
    _write_meta(pruned_path, cfg)
    report.to_json(_artifact(cfg, "prune_report"), config=cfg)


def stage_eval(cfg) -> None:
    _require_inputs(cfg, ["model", "pruned_model", "test_set", "asr_set", "prune_report"])
    spec, params = load_model(_artifact(cfg, "model"))
    _, pruned_params = load_model(_artifact(cfg, "pruned_model"))
    test_set, asr_set = _load_sets(cfg, ["test_set", "asr_set"])
    target = int(cfg["poison"]["target_label"])
    before = evaluate(spec, params, test_set, asr_set, target)
    after = evaluate(spec, pruned_params, test_set, asr_set, target)
    report = json.loads(_artifact(cfg, "prune_report").read_text())
    summary = {
        "config": cfg,
        "backdoored": {"acc": before.acc, "asr": before.asr},
        "pruned": {"acc": after.acc, "asr": after.asr},
        "pruned_filters": report["total_pruned"],
        "mu": float(cfg["prune"]["mu"]),
    }
    _write_json(_artifact(cfg, "summary"), summary)


def stage_sweep(cfg) -> None:
    _require_inputs(cfg, ["model", "scores", "test_set", "asr_set"])
    spec, params = load_model(_artifact(cfg, "model"))
    table = ScoreTable.from_csv(_artifact(cfg, "scores"), eps=float(cfg["prune"]["eps"]))
    test_set, asr_set = _load_sets(cfg, ["test_set", "asr_set"])
    sw = cfg["sweep"]
    start, stop, step = float(sw["mu_start"]), float(sw["mu_stop"]), float(sw["mu_step"])
    if step <= 0 or stop < start:
        raise _usage_error("sweep needs mu_step > 0 and mu_stop >= mu_start")
    count = int(round((stop - start) / step)) + 1
    grid = [start + i * step for i in range(count)]
    rows = sweep_mu(spec, params, table, grid, test_set, asr_set,
                    int(cfg["poison"]["target_label"]))
    sweep_path = _artifact(cfg, "sweep")
    write_sweep_csv(rows, sweep_path)
    _write_meta(sweep_path, cfg)


def stage_ablate(cfg) -> None:
    _require_inputs(cfg, ["model", "defense_set", "test_set", "asr_set"])
    spec, params = load_model(_artifact(cfg, "model"))
    defense = load_dataset(_artifact(cfg, "defense_set"), num_classes=spec.num_classes)
    test_set, asr_set = _load_sets(cfg, ["test_set", "asr_set"])
    rows = ablate(spec, params, defense, test_set, asr_set,
                  int(cfg["poison"]["target_label"]),
                  mu=float(cfg["prune"]["mu"]), eps=float(cfg["prune"]["eps"]))
    ablation_path = _artifact(cfg, "ablation")
    write_ablation_csv(rows, ablation_path)
    _write_meta(ablation_path, cfg)


def cmd_wilcoxon(args) -> int:
    path = Path(args.csv)
    if not path.is_file():
        raise _usage_error(f"missing input file: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise _usage_error(f"{path} is empty")
        rows = list(reader)
    col_a = args.col_a or header[0]
    col_b = args.col_b or (header[1] if len(header) > 1 else None)
    if col_a not in header or col_b not in header:
        raise _usage_error(f"columns {col_a!r}/{col_b!r} not found in header {header}")
    ia, ib = header.index(col_a), header.index(col_b)

    def run():
        a = np.array([float(r[ia]) for r in rows])
        b = np.array([float(r[ib]) for r in rows])
        result = wilcoxon_signed_rank(a, b, alternative=args.alternative)
        doc = result.to_dict()
        doc["columns"] = [col_a, col_b]
        if args.out:
            out = Path(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            _write_json(out, doc)
        print(json.dumps(doc))
        return 0

    return _run_stage("eval", run)


def _run_stage(stage: str, fn):
    try:
        return fn()
    except CommandError:
        raise
    except Exception as e:
        raise CommandError(STAGE_CODES[stage], stage, str(e)) from e


PIPELINE = (
    ("data", stage_data),
    ("train", stage_train),
    ("score", stage_score),
    ("prune", stage_prune),
    ("eval", stage_eval),
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="master run seed (overrides config)")
    p.add_argument("--mu", type=float, help="prune threshold multiplier (overrides config)")
    p.add_argument("--variant", choices=VARIANTS, help="scoring variant (overrides config)")
    p.add_argument("--alpha", type=float, help="blend trigger alpha (overrides config)")
    p.add_argument("--poison-rate", type=float, help="poison rate (overrides config)")
    p.add_argument("--target-label", type=int, help="attack target label (overrides config)")
    p.add_argument("--deterministic", action="store_true",
                   help="force reference (sequential) execution; already the default")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trojanprune",
        description="Implant a backdoor in a small CNN, locate the poisoned filters, prune them, "
                    "and report clean accuracy plus attack success rate before and after.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("pipeline", "run make-data, train, score, prune, and eval in sequence"),
        ("make-data", "build the poisoned train set, clean/triggered test sets, and defense set"),
        ("train", "train the classifier on the poisoned train set"),
        ("score", "score every conv filter of a trained model"),
        ("prune", "prune filters above their per-layer outlier threshold"),
        ("eval", "evaluate ACC/ASR of the backdoored and pruned models"),
        ("sweep", "prune and evaluate across a grid of mu thresholds"),
        ("ablate", "evaluate every scoring variant independently"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "score":
            p.add_argument("--model", help="model file to score (default: the run's backdoored model)")

    w = sub.add_parser("wilcoxon", help="paired signed-rank test over two CSV columns")
    w.add_argument("--csv", required=True, help="CSV file with a header row")
    w.add_argument("--col-a", help="first column name (default: first column)")
    w.add_argument("--col-b", help="second column name (default: second column)")
    w.add_argument("--alternative", choices=["greater", "two-sided"], default="greater")
    w.add_argument("--out", help="write the result JSON here as well as stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        if args.command == "wilcoxon":
            return cmd_wilcoxon(args)

        cfg = resolve_config(load_config_file(args.config), args)
        _echo_config(cfg)
        if args.command == "pipeline":
            for stage, fn in PIPELINE:
                _run_stage(stage, lambda fn=fn: fn(cfg))
        elif args.command == "make-data":
            _run_stage("data", lambda: stage_data(cfg))
        elif args.command == "train":
            _run_stage("train", lambda: stage_train(cfg))
        elif args.command == "score":
            _run_stage("score", lambda: stage_score(cfg, model_path=args.model))
        elif args.command == "prune":
            _run_stage("prune", lambda: stage_prune(cfg))
        elif args.command == "eval":
            _run_stage("eval", lambda: stage_eval(cfg))
        elif args.command == "sweep":
            _run_stage("eval", lambda: stage_sweep(cfg))
        elif args.command == "ablate":
            _run_stage("eval", lambda: stage_ablate(cfg))
        return 0
    except CommandError as e:
        print(f"trojanprune: {e.stage} stage failed: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
