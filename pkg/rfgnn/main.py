import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from rfgnn.commands.experiments import (
    RUN_ERRORS,
    CommandError,
    cmd_ablate,
    cmd_evaluate,
    cmd_export_embeddings,
    cmd_gen_synth,
    cmd_noise,
    cmd_sweep,
    cmd_train,
)
from rfgnn.config import DEFAULT_RUNS, DEFAULT_SEED, DEFAULT_THREADS, LOG_FORMAT, LOG_LEVEL, OUTPUT_DIR, PRESETS
from rfgnn.models import RunConfig, SyntheticParams
from rfgnn.services.numkit import derive_seed

logger = logging.getLogger("rfgnn")

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CONFIG = 2


class ConfigFileError(Exception):
    pass


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file mirroring RunConfig")
    p.add_argument("--seed", type=int, default=None, help="Master seed (default: %d)" % DEFAULT_SEED)
    p.add_argument("--out", help="Output directory")
    p.add_argument("--threads", type=int, default=None, help="Worker threads for branch training")
    p.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory")
    p.add_argument("--log-level", default=None, help="Logging level (default: %s)" % LOG_LEVEL)


def _add_synth(p: argparse.ArgumentParser):
    g = p.add_argument_group("synthetic benchmark")
    g.add_argument("--nodes", type=int, dest="n")
    g.add_argument("--classes", type=int)
    g.add_argument("--p-in", type=float)
    g.add_argument("--p-out", type=float)
    g.add_argument("--informative", type=int, dest="informative_dims")
    g.add_argument("--redundant", type=int, dest="redundant_dims")
    g.add_argument("--noise-dims", type=int, dest="noise_dims")
    g.add_argument("--class-separation", type=float)
    g.add_argument("--redundant-noise", type=float)
    g.add_argument("--relations", type=int)


def _add_source(p: argparse.ArgumentParser):
    p.add_argument("--dataset", help="Dataset directory")
    p.add_argument("--synthetic", action="store_true", help="Generate the synthetic benchmark in memory")
    p.add_argument("--data-seed", type=int, default=None, help="Generator seed with --synthetic")
    _add_synth(p)


def _add_training(p: argparse.ArgumentParser):
    _add_source(p)
    p.add_argument("--preset", choices=sorted(PRESETS), help="Named alpha/beta/gamma preset")
    p.add_argument("--variant", choices=["e", "es", "full"])
    p.add_argument("--backbone", choices=["gcn", "sgc", "rgcn"])
    p.add_argument("--S", type=int, dest="branches", help="Number of branches")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--sgc-power", type=int)
    p.add_argument("--select-best-val", action="store_true", default=None)
    p.add_argument("--runs", type=int, help="Number of seeded runs (default: %d)" % DEFAULT_RUNS)
    p.add_argument("--seeds", type=_int_list, help="Explicit comma-separated run seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfgnn",
        description="Ensembles of GNNs on randomized subgraphs with feature aligning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="Write the synthetic benchmark as a dataset directory")
    _add_common(p)
    _add_synth(p)

    for name, help_text in [
        ("train", "Train ensembles and write checkpoints and reports"),
        ("ablate", "Compare baseline, E, ES and FULL"),
        ("sweep", "Sweep alpha, beta, gamma or S"),
        ("noise", "Accuracy under Gaussian feature noise"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_training(p)
        if name == "sweep":
            p.add_argument("--parameter", required=True, choices=["alpha", "beta", "gamma", "S"])
            p.add_argument("--values", required=True, type=_float_list)
        if name == "noise":
            p.add_argument("--fractions", type=_float_list, help="Comma-separated entry fractions")

    for name, help_text in [
        ("evaluate", "Score a saved ensemble"),
        ("export-embeddings", "Write per-node scores and branch embeddings"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_source(p)
        p.add_argument("--checkpoint", required=True, help="Ensemble checkpoint directory")
        if name == "export-embeddings":
            p.add_argument("--include-embeddings", action="store_true")
    return parser


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{path}:{e.lineno}: invalid JSON: {e.msg}")
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top-level JSON value must be an object")
    return data


def _given(args: argparse.Namespace, names) -> Dict[str, Any]:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


SYNTH_FLAGS = ("n", "classes", "p_in", "p_out", "informative_dims", "redundant_dims", "noise_dims",
               "class_separation", "redundant_noise", "relations")
TRAIN_FLAGS = ("branches", "alpha", "beta", "gamma", "epochs", "lr", "weight_decay", "dropout", "select_best_val")
BACKBONE_FLAGS = ("hidden", "layers", "sgc_power")


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults < preset < config file < flags into a validated RunConfig.

    Run seeds: --seeds as given, else run r of --runs uses derive_seed(--seed, r).
    """
    merged: Dict[str, Any] = {}
    preset = getattr(args, "preset", None)
    if preset:
        merged = {"train": dict(PRESETS[preset])}
    merged = _deep_merge(merged, _read_config_file(args.config))

    flags: Dict[str, Any] = {"train": _given(args, TRAIN_FLAGS)}
    backbone = _given(args, BACKBONE_FLAGS)
    if getattr(args, "backbone", None):
        backbone["kind"] = args.backbone
    if "hidden" in backbone:
        backbone["out_dim"] = backbone["hidden"]
    if backbone:
        flags["train"]["backbone"] = backbone
    if getattr(args, "variant", None):
        flags["variant"] = args.variant

    if args.dataset:
        flags["dataset"] = args.dataset
        merged.pop("synthetic", None)
    elif args.synthetic or any(getattr(args, n, None) is not None for n in SYNTH_FLAGS):
        synth = _given(args, SYNTH_FLAGS)
        if args.data_seed is not None:
            synth["seed"] = args.data_seed
        flags["synthetic"] = _deep_merge(merged.get("synthetic") or {}, synth)
        merged.pop("dataset", None)

    seeds = getattr(args, "seeds", None)
    runs = getattr(args, "runs", None)
    if seeds:
        flags["seeds"] = seeds
    elif runs is not None or args.seed is not None or "seeds" not in merged:
        base = DEFAULT_SEED if args.seed is None else args.seed
        flags["seeds"] = [derive_seed(base, r) for r in range(DEFAULT_RUNS if runs is None else runs)]
    if args.threads is not None:
        flags["threads"] = args.threads
    elif "threads" not in merged:
        flags["threads"] = DEFAULT_THREADS

    return RunConfig.model_validate(_deep_merge(merged, flags))


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else OUTPUT_DIR / args.command


def _synthetic_params(args: argparse.Namespace) -> SyntheticParams:
    merged = _deep_merge(_read_config_file(args.config).get("synthetic") or {}, _given(args, SYNTH_FLAGS))
    if args.seed is not None:
        merged["seed"] = args.seed
    return SyntheticParams.model_validate(merged)


def run(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    if args.command == "gen-synth":
        cmd_gen_synth(_synthetic_params(args), out, force=args.force)
        return EXIT_OK

    run_cfg = resolve_run_config(args)
    if args.command == "train":
        result = cmd_train(run_cfg, out, force=args.force)
    elif args.command == "ablate":
        result = cmd_ablate(run_cfg, out, force=args.force)
    elif args.command == "sweep":
        result = cmd_sweep(run_cfg, args.parameter, args.values, out, force=args.force)
    elif args.command == "noise":
        result = cmd_noise(run_cfg, out, fractions=args.fractions, force=args.force)
    elif args.command == "evaluate":
        result = cmd_evaluate(args.checkpoint, run_cfg, out, force=args.force)
    else:
        result = cmd_export_embeddings(
            args.checkpoint, run_cfg, out, include_embeddings=args.include_embeddings, force=args.force,
        )

    if not result.ok:
        logger.error("Failed seeds: %s", ", ".join(str(s) for s in result.failed_seeds))
        return EXIT_RUN_FAILED
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(args.log_level or LOG_LEVEL).upper(), format=LOG_FORMAT)

    try:
        return run(args)
    except (ValidationError, ConfigFileError) as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG
    except (CommandError,) + RUN_ERRORS as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
