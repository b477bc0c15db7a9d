"""Command-line entry point.

Subcommands: synth, train, eval, infer, search, bench, gradcheck. Settings
come from an optional JSON config file with sections train/fusion/search/
synth; flags override file values and unknown keys are rejected. Exit codes:
0 success, 1 configuration or validation problem, 2 runtime or numeric
failure. VSP_LOG_LEVEL (error/warn/info/debug) controls verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .bench import account_forward, format_cost_table, time_forward
from .errors import (
    ConfigError,
    DeterminismError,
    FormatError,
    NumericError,
    ShapeError,
    ValidationError,
)
from .fusion import FusionConfig, forward, init_params, leaf_tensors
from .inference import evaluate, format_report, predict_averaged, report_records
from .search import SearchConfig, format_table, run_search, save_results
from .selection import (
    SelectionMatrix,
    SelectionVector,
    load_selection,
)
from .store import (
    check_against_cache,
    load_manifest,
    matrix_instances,
    partition,
    read_cache,
    vector_instances,
)
from .synth import SynthConfig, generate
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)
from .util import configure_logging, derived_rng, get_logger

log = get_logger("cli")

CONFIG_SECTIONS = ("train", "fusion", "search", "synth")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(
            f"{path}: unknown config sections {sorted(unknown)}, "
            f"allowed: {list(CONFIG_SECTIONS)}"
        )
    for section, value in data.items():
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
    return data


def _section(cfg: dict, name: str, cls) -> dict:
    values = dict(cfg.get(name, {}))
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(
            f"unknown keys in config section {name!r}: {sorted(unknown)}"
        )
    if name == "synth" and "informative_views" in values:
        values["informative_views"] = tuple(
            tuple(p) for p in values["informative_views"]
        )
    if name == "synth" and "gain_range" in values:
        values["gain_range"] = tuple(values["gain_range"])
    return values


def _override(values: dict, **flags) -> dict:
    for key, value in flags.items():
        if value is not None:
            values[key] = value
    return values


def _echo(name: str, values: dict) -> None:
    for key in sorted(values):
        log.info("config %s.%s = %r", name, key, values[key])


_TARGET_ALIASES = {"age": "age_days", "age_days": "age_days",
                   "leaf": "leaf_count", "leaf_count": "leaf_count"}


def _resolve_target(raw: str | None) -> str | None:
    if raw is None:
        return None
    if raw not in _TARGET_ALIASES:
        raise ConfigError(f"unknown target {raw!r}, expected age or leaf")
    return _TARGET_ALIASES[raw]


def _parse_informative(spec: str, levels: int, views: int):
    if spec.strip() == "all":
        return ()
    pairs = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            lv, vw = item.split(":", 1)
            pairs.append((int(lv), int(vw)))
        else:
            vw = int(item)
            pairs.extend((lv, vw) for lv in range(levels))
    if not pairs:
        raise ConfigError(f"no informative views parsed from {spec!r}")
    return tuple(pairs)


def _build_parser() -> Parser:
    parser = Parser(prog="viewsel", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="JSON config file with sections "
                                        "train/fusion/search/synth")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel worker cap")

    p = sub.add_parser("synth", help="generate a synthetic feature cache + manifest")
    common(p)
    p.add_argument("--plants", type=int, help="number of plants")
    p.add_argument("--days", type=int, help="days per plant")
    p.add_argument("--levels", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--redundancy-rho", type=float)
    p.add_argument("--signal-scale", type=float)
    p.add_argument("--latent-jitter", type=float)
    p.add_argument("--informative", help="'all' or comma list of level:view "
                                         "pairs (bare view means every level)")

    for name, help_text in (("train", "train a fusion model"),
                            ("eval", "evaluate a checkpoint on a split"),
                            ("infer", "predict single samples"),
                            ("search", "rank candidate selections")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--features", help="feature cache path")
        p.add_argument("--manifest", help="manifest CSV path")
        p.add_argument("--mode", choices=["vector", "matrix"])
        p.add_argument("--level", type=int, help="restrict vector mode to one level")
        p.add_argument("--target", help="age or leaf")
        if name != "search":
            p.add_argument("--selection", help="selection text file")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr-fusion", type=float)
            p.add_argument("--lr-head", type=float)
            p.add_argument("--dropout", type=float)
            p.add_argument("--d-model", type=int)
            p.add_argument("--early-stopping", type=int)
            p.add_argument("--merge-train-val", action="store_true", default=None)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", choices=["train", "val", "test"], default="test")
            p.add_argument("--round-predictions", action="store_true")
        if name == "infer":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--index", type=int, action="append",
                           help="cache row to predict; repeatable, default all")
        if name == "search":
            p.add_argument("--candidates", type=int)
            p.add_argument("--density", type=float)
            p.add_argument("--epochs", type=int)
            p.add_argument("--d-model", type=int)
            p.add_argument("--lr-fusion", type=float)
            p.add_argument("--lr-head", type=float)

    p = sub.add_parser("bench", help="forward-pass cost accounting")
    common(p)
    p.add_argument("--mode", choices=["vector", "matrix"], default="vector")
    p.add_argument("--selection", help="extra selection file to account")
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-in", type=int)
    p.add_argument("--time", action="store_true", help="also measure wall time")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--tokens", type=int, default=3)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _load_dataset(args, target: str, merge_train_val: bool = False):
    if not args.features or not args.manifest:
        raise ConfigError("--features and --manifest are required")
    cache = read_cache(args.features)
    entries = load_manifest(args.manifest)
    check_against_cache(entries, cache.header)
    splits = partition(entries, merge_train_val=merge_train_val)
    mode = args.mode or "vector"
    level = getattr(args, "level", None)

    def build(split):
        idx = splits[split]
        if mode == "vector":
            return vector_instances(cache, entries, idx, target, level)
        return matrix_instances(cache, entries, idx, target)

    return cache, entries, splits, mode, build


def _fusion_config(cfg_file: dict, cache_header, mode: str, flags: dict) -> FusionConfig:
    values = _section(cfg_file, "fusion", FusionConfig)
    values.setdefault("d_in", cache_header.dim)
    pe = cache_header.views if mode == "vector" else cache_header.levels * cache_header.views
    values.setdefault("pe_count", pe)
    _override(values, **flags)
    _echo("fusion", values)
    return FusionConfig(**values)


def _selection_for(args, cache_header):
    if not args.selection:
        raise ConfigError("--selection is required")
    sel = load_selection(args.selection, views=cache_header.views)
    mode = args.mode or "vector"
    if mode == "vector" and not isinstance(sel, SelectionVector):
        raise ConfigError("vector mode needs a one-line selection file")
    if mode == "matrix" and not isinstance(sel, SelectionMatrix):
        raise ConfigError("matrix mode needs a multi-line selection file")
    return sel


def _cmd_synth(args) -> int:
    cfg_file = _load_config_file(args.config) if args.config else {}
    values = _section(cfg_file, "synth", SynthConfig)
    _override(
        values,
        n_plants=args.plants,
        n_days=args.days,
        levels=args.levels,
        views=args.views,
        dim=args.dim,
        noise_sigma=args.noise_sigma,
        redundancy_rho=args.redundancy_rho,
        signal_scale=args.signal_scale,
        latent_jitter=args.latent_jitter,
        seed=args.seed,
    )
    if args.informative is not None:
        values["informative_views"] = _parse_informative(
            args.informative, values.get("levels", 5), values.get("views", 24)
        )
    if "n_plants" not in values or "n_days" not in values:
        raise ConfigError("synth needs --plants and --days (or a config file)")
    _echo("synth", values)
    config = SynthConfig(**values)
    dataset = generate(config)
    outdir = args.out or "."
    cache_path, manifest_path = dataset.save(outdir)
    echo_path = os.path.join(str(outdir), "synth_config.json")
    with open(echo_path, "w", encoding="utf-8") as f:
        json.dump(dataclasses.asdict(config), f, sort_keys=True, indent=2)
    print(f"wrote {cache_path} ({config.n_samples} samples) and {manifest_path}")
    return 0


def _cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config) if args.config else {}
    tvals = _section(cfg_file, "train", TrainConfig)
    _override(
        tvals,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_fusion=args.lr_fusion,
        lr_head=args.lr_head,
        seed=args.seed,
        early_stopping=args.early_stopping,
        target=_resolve_target(args.target),
    )
    _echo("train", tvals)
    tconfig = TrainConfig(**tvals)
    merge = bool(args.merge_train_val)
    cache, entries, splits, mode, build = _load_dataset(args, tconfig.target, merge)
    sel = _selection_for(args, cache.header)
    fconfig = _fusion_config(
        cfg_file, cache.header, mode,
        {"d_model": args.d_model, "dropout": args.dropout},
    )
    train_instances = build("train")
    val_instances = build("val") or None
    result = train(train_instances, val_instances, sel, fconfig, tconfig)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    ckpt = os.path.join(str(outdir), "checkpoint.vsck")
    save_checkpoint(result.params, ckpt, extra={"train_config": dataclasses.asdict(tconfig)})
    history_path = os.path.join(str(outdir), "train_log.jsonl")
    write_history(result.history, history_path)
    final = result.history[-1]
    print(
        f"trained {len(result.history)} epochs; final train loss "
        f"{final['train_loss']:.6f}; checkpoint {ckpt}"
    )
    return 0


def _cmd_eval(args) -> int:
    target = _resolve_target(args.target) or "age_days"
    params, header_meta = load_checkpoint(args.checkpoint)
    cache, entries, splits, mode, build = _load_dataset(args, target)
    sel = _selection_for(args, cache.header)
    instances = build(args.split)
    workers = args.workers or 1
    report = evaluate(params, instances, sel,
                      round_predictions=args.round_predictions, workers=workers)
    print(format_report(report, title=f"{args.split} split ({target})"))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.jsonl"), "w", encoding="utf-8") as f:
            for row in report_records(report):
                f.write(json.dumps(row, sort_keys=True) + "\n")
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
            f.write(format_report(report, title=f"{args.split} split ({target})") + "\n")
    return 0


def _cmd_infer(args) -> int:
    target = _resolve_target(args.target) or "age_days"
    params, _ = load_checkpoint(args.checkpoint)
    if not args.features:
        raise ConfigError("--features is required")
    cache = read_cache(args.features)
    sel = _selection_for(args, cache.header)
    mode = args.mode or "vector"
    indices = args.index if args.index else list(range(len(cache)))
    level = args.level if args.level is not None else 0
    for i in indices:
        stack = cache.stack(i)
        block = stack[level] if mode == "vector" else stack
        pred = predict_averaged(params, block, sel, level=level)
        print(f"sample {i}: {pred:.6f}")
    return 0


def _cmd_search(args) -> int:
    cfg_file = _load_config_file(args.config) if args.config else {}
    target = _resolve_target(args.target) or "age_days"
    cache, entries, splits, mode, build = _load_dataset(args, target)
    svals = _section(cfg_file, "search", SearchConfig)
    svals.setdefault("mode", mode)
    _override(
        svals,
        n_candidates=args.candidates,
        density=args.density,
        epochs_per_candidate=args.epochs,
        seed=args.seed,
        workers=args.workers,
    )
    _echo("search", svals)
    sconfig = SearchConfig(**svals)
    tvals = _section(cfg_file, "train", TrainConfig)
    _override(tvals, lr_fusion=args.lr_fusion, lr_head=args.lr_head)
    tconfig = TrainConfig(**tvals)
    fconfig = _fusion_config(cfg_file, cache.header, sconfig.mode,
                             {"d_model": args.d_model})
    train_instances = build("train")
    val_instances = build("val")
    result = run_search(
        train_instances, val_instances, fconfig, sconfig, tconfig,
        levels=cache.header.levels, views=cache.header.views,
    )
    print(format_table(result))
    if args.out:
        table_path, best_path = save_results(result, args.out)
        print(f"wrote {table_path} and {best_path}")
    return 0


def _cmd_bench(args) -> int:
    cfg_file = _load_config_file(args.config) if args.config else {}
    values = _section(cfg_file, "fusion", FusionConfig)
    values.setdefault("d_in", args.d_in or 32)
    values.setdefault("pe_count", 24 if args.mode == "vector" else 120)
    _override(values, d_model=args.d_model)
    fconfig = FusionConfig(**values)
    from .search import matrix_baselines, vector_baselines

    named = vector_baselines() if args.mode == "vector" else matrix_baselines()
    if args.selection:
        named = named + [("from file", load_selection(args.selection))]
    reports = []
    for name, sel in named:
        report = account_forward(fconfig, sel, name=name)
        if args.time:
            report.wall_time_s = time_forward(fconfig, sel, seed=args.seed or 0)
        reports.append(report)
    print(format_cost_table(reports))
    return 0


def _cmd_gradcheck(args) -> int:
    from .autodiff import grad_check
    from .selection import SelectedTokenSet

    d_in = args.d_model
    config = FusionConfig(
        d_in=d_in, d_model=args.d_model, n_layers=args.n_layers,
        n_heads=args.n_heads, dropout=0.0, pe_count=max(args.tokens, 1),
        use_projection=True, head_hidden=8,
    )
    worst = 0.0
    for s in range(args.seeds):
        rng = derived_rng(args.seed or 0, "gradcheck", s)
        params = init_params(rng, config, dtype=np.float64)
        features = rng.standard_normal((args.tokens, d_in))
        tokens = SelectedTokenSet(
            features=features,
            pe_indices=np.arange(args.tokens),
            levels=np.zeros(args.tokens, dtype=int),
            physical_views=np.arange(args.tokens),
        )

        def run():
            return forward(params, tokens, train=False)

        err = grad_check(run, leaf_tensors(params), eps=args.eps)
        worst = max(worst, err)
        log.info("gradcheck seed %d: max relative error %.3e", s, err)
    print(f"max relative error over {args.seeds} seeds: {worst:.3e}")
    if worst > args.tolerance:
        raise NumericError(
            f"gradient check failed: {worst:.3e} above tolerance {args.tolerance:.1e}"
        )
    print(f"within tolerance {args.tolerance:.1e}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "search": _cmd_search,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ValidationError, FormatError, ShapeError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError, IndexError, KeyError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, DeterminismError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # runtime failures distinct from bad input
        log.error("unexpected failure: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
