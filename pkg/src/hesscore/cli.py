"""Command-line entry point: ``hesscore {run,select,verify,synth}``.

Exit codes are a stable contract: 0 success, 1 runtime or property
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

from . import coreset as cs
from .data import save_libsvm
from .harness import ConfigError, ExperimentConfig, _Selector, load_data, make_model, run_experiment
from .numerics import SeededRng
from .verify import run_all

log = logging.getLogger("hesscore")

ENV_OUTPUT = "HESSCORE_OUTPUT"
DEFAULT_OUTPUT = "hesscore-out"

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# config file section for every ExperimentConfig field
SECTIONS: dict[str, tuple[str, ...]] = {
    "data": (
        "data_source", "train_path", "test_path", "synth_n", "synth_d", "class_fractions", "separation",
        "modes", "scale_spread", "mode_spread", "noise", "data_seed", "test_fraction", "standardize",
        "normalize_divisor",
    ),
    "model": ("model", "mu", "lam", "hidden", "weight_decay"),
    "optimizer": (
        "optimizer", "schedule", "lr0", "lr_decay", "milestones", "lr_factor", "warmup_epochs", "momentum",
        "hessian_power", "batch_size", "batch_weighting",
    ),
    "selection": (
        "method", "fraction", "refresh", "greedy", "curvature", "beta1", "beta2", "hessian_batch",
        "hutchinson_samples", "delta_floor", "unit_preconditioner", "dense_threshold",
    ),
    "run": ("epochs", "seed", "output_dir", "track_examples"),
}
FIELD_SECTION = {name: sec for sec, names in SECTIONS.items() for name in names}
TUPLE_ITEMS = {"class_fractions": float, "milestones": int}


def _parse_value(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is tuple:
            item = TUPLE_ITEMS.get(key, float)
            return tuple(item(x) for x in raw.replace(",", " ").split())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _apply(values: dict, key: str, raw: str, types: dict) -> None:
    if key not in types:
        raise ConfigError(key, "unknown key")
    values[key] = _parse_value(key, raw, types[key])


def load_config(path: str | Path | None, overrides=()) -> ExperimentConfig:
    """Read an INI config and ``key=value`` overrides into a validated :class:`ExperimentConfig`.

    Unknown sections or keys, and keys placed in the wrong section, are errors.
    Overrides may be written ``key=value`` or ``section.key=value``.
    """
    types = ExperimentConfig.field_types()
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError("config", str(exc).splitlines()[0]) from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(section, f"unknown section; expected one of {sorted(SECTIONS)}")
            for key, raw in parser.items(section):
                if key in types and FIELD_SECTION[key] != section:
                    raise ConfigError(key, f"belongs in section [{FIELD_SECTION[key]}], not [{section}]")
                _apply(values, key, raw, types)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip().rsplit(".", 1)[-1]
        _apply(values, key, raw, types)
    cfg = ExperimentConfig(**values)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back to the same config."""
    lines = []
    for section, names in SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            val = getattr(cfg, name)
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{name} = {val}")
        lines.append("")
    return "\n".join(lines)


def output_dir(flag: str | None, cfg: ExperimentConfig | None = None) -> Path:
    """``--out`` wins over the environment, which wins over the config file."""
    if flag:
        return Path(flag)
    if os.environ.get(ENV_OUTPUT):
        return Path(os.environ[ENV_OUTPUT])
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(DEFAULT_OUTPUT)


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    out = output_dir(args.out, cfg)
    cfg.output_dir = str(out)
    result = run_experiment(cfg)
    (out / "config.ini").write_text(dump_config(cfg))
    last = result.metrics[-1]
    print(f"epochs={len(result.metrics)} train_loss={last.train_loss:.6g} test_acc={last.test_acc:.4f} seconds={last.seconds:.3f}")
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = load_config(args.config, args.set)
    out = output_dir(args.out, cfg)
    train, _ = load_data(cfg)
    model = make_model(cfg, train)
    init_rng, select_rng, _, _ = SeededRng(cfg.seed).spawn(4)
    w0 = model.init_params(init_rng)
    core = _Selector(cfg, model, train, select_rng).select(w0)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "coreset.csv"
    cs.write_coreset_csv(core, path, train.labels)
    counts = ", ".join(f"class {c}: {len(ix)}" for c, (ix, _) in sorted(core.per_class.items()))
    print(f"selected {len(core)} of {train.n} ({counts})")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    out = output_dir(args.out, cfg)
    if cfg.data_source != "synthetic":
        raise ConfigError("data_source", "synth writes the synthetic source only")
    train, test = load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_libsvm(train, out / "train.libsvm")
    save_libsvm(test, out / "test.libsvm")
    sizes = ", ".join(str(s) for s in train.class_sizes())
    print(f"train n={train.n} (class sizes {sizes}), test n={test.n}, d={train.d}")
    print(f"wrote {out / 'train.libsvm'} and {out / 'test.libsvm'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(seed=args.seed, fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    for r in results:
        line = f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}"
        if args.verbose:
            line += f"  [{r.seconds:.3f}s]"
        print(line)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} properties hold")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hesscore", description="Curvature-aware coreset selection and training.")
    parser.add_argument("-v", "--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI config file (see configs/schema.md)")
        p.add_argument("--set", "--override", dest="set", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable")
        p.add_argument("--out", help=f"output directory (overrides ${ENV_OUTPUT} and run.output_dir)")
        return p

    with_config(sub.add_parser("run", help="train with periodic coreset refresh and write CSV metrics")).set_defaults(func=cmd_run)
    with_config(sub.add_parser("select", help="select one coreset at initialization and write it as CSV")).set_defaults(func=cmd_select)
    with_config(sub.add_parser("synth", help="write the synthetic dataset as LIBSVM train/test files")).set_defaults(func=cmd_synth)
    p = sub.add_parser("verify", help="run the brute-force property checks")
    p.add_argument("--verbose", action="store_true", help="print per-property timings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
