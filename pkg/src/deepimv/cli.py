"""Command-line entry point.

Usage::

    deepimv COMMAND [--config FILE] [--set KEY=VALUE ...] [--output-dir DIR]

Configuration is flat ``key = value`` text; ``#`` starts a comment. Every
run writes ``config.txt`` to the output directory holding the effective
configuration, which can be fed back with ``--config`` to rerun it.
The ``DEEPIMV_OUTPUT_DIR`` environment variable overrides ``output_dir``;
``--output-dir`` overrides both.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .data import (
    MultiViewDataset,
    SynthConfig,
    apply_missingness,
    load_dataset,
    save_dataset,
    split_dataset,
    synthesize_dataset,
)
from .errors import ContractError, LoadError, NumericError
from .evaluation import information_report, latent_pca_projection, missing_rate_sweep, run_ablation, view_count_auroc
from .evaluation.report import MetricsReport
from .metrics import auroc_from_probs
from .model import MOE, POE, load_params, predict_proba, save_params
from .numerics import make_rng
from .training import TrainConfig, grad_check, tiny_gradcheck_setup, train_deepimv

log = logging.getLogger("deepimv")

COMMANDS = ("synth", "train", "eval", "predict", "ablate", "sweep", "gradcheck", "project")
OUTPUT_ENV = "DEEPIMV_OUTPUT_DIR"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config parsing


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _opt_float_list(text: str) -> Optional[tuple[float, ...]]:
    return None if text.strip().lower() in ("", "none") else _float_list(text)


def _opt_int_list(text: str) -> Optional[tuple[int, ...]]:
    return None if text.strip().lower() in ("", "none") else _int_list(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _fraction(v) -> bool:
    return 0.0 <= v <= 1.0


def _all(check):
    return lambda vs: vs is None or all(check(v) for v in vs)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    hint: str = ""


KEYS: dict[str, Key] = {
    # training
    "epochs": Key(int, 500, _positive, "must be >= 1"),
    "batch_size": Key(int, 32, _positive, "must be >= 1"),
    "lr": Key(float, 1e-4, _positive, "must be > 0"),
    "alpha": Key(float, 1.0, _nonneg, "must be >= 0"),
    "beta": Key(float, 0.01, _nonneg, "must be >= 0"),
    "beta_v": Key(_opt_float_list, None, _all(_nonneg), "entries must be >= 0"),
    "dropout": Key(float, 0.7, lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"),
    "l1": Key(float, 0.0, _nonneg, "must be >= 0"),
    "fusion": Key(_choice(POE, MOE), POE),
    "marginal_ib": Key(_bool, True),
    "seed": Key(int, 0, _nonneg, "must be >= 0"),
    "patience": Key(int, 20, _positive, "must be >= 1"),
    "latent_dim": Key(int, 50, _positive, "must be >= 1"),
    "encoder_hidden": Key(_int_list, (100, 100), _all(_positive), "widths must be >= 1"),
    "predictor_hidden": Key(_int_list, (100, 100), _all(_positive), "widths must be >= 1"),
    "selection": Key(_choice("total", "joint"), "total"),
    "eval_samples": Key(int, 0, _nonneg, "must be >= 0"),
    # data and protocol
    "split": Key(_float_list, (0.64, 0.16, 0.20), lambda v: len(v) == 3 and min(v) > 0 and abs(sum(v) - 1) < 1e-9, "needs three positive fractions summing to 1"),
    "missing_rate": Key(float, 0.0, _fraction, "must lie in [0, 1]"),
    "repeats": Key(int, 10, _positive, "must be >= 1"),
    "rates": Key(_float_list, (0.0, 0.3, 0.6, 0.9), lambda v: len(v) > 0 and all(_fraction(r) for r in v), "entries must lie in [0, 1]"),
    "views": Key(_opt_int_list, None, lambda v: v is None or (len(v) > 0 and min(v) >= 1), "1-based view indices"),
    # synthesis
    "n_samples": Key(int, 2000, _positive, "must be >= 1"),
    "n_views": Key(int, 4, lambda v: v >= 2, "must be >= 2"),
    "n_factors": Key(int, 8, _positive, "must be >= 1"),
    "view_dim": Key(int, 20, _positive, "must be >= 1"),
    "noise": Key(float, 0.5, _nonneg, "must be >= 0"),
    "label_flip": Key(float, 0.05, lambda v: 0.0 <= v < 0.5, "must lie in [0, 0.5)"),
    "synth_seed": Key(int, 0, _nonneg, "must be >= 0"),
    # paths
    "data_dir": Key(str, ""),
    "checkpoint": Key(str, ""),
    "output_dir": Key(str, "deepimv_out"),
}


def parse_config(text: str, base: Optional[dict] = None) -> dict[str, Any]:
    """Parse flat ``key = value`` text over the defaults (or over ``base``)."""
    cfg = dict(base) if base is not None else {k: spec.default for k, spec in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        cfg[key] = _parse_value(key, value)
    return cfg


def _parse_value(key: str, value: str) -> Any:
    spec = KEYS.get(key)
    if spec is None:
        raise UsageError(f"unknown config key {key!r}")
    try:
        parsed = spec.parse(value)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: invalid value {value!r} ({exc})") from None
    if not spec.check(parsed):
        raise UsageError(f"config key {key!r}: value {value!r} out of range ({spec.hint})")
    return parsed


def format_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in KEYS)


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in names})


def synth_config(cfg: dict[str, Any]) -> SynthConfig:
    return SynthConfig(
        n_samples=cfg["n_samples"], n_views=cfg["n_views"], n_factors=cfg["n_factors"],
        view_dims=[cfg["view_dim"]] * cfg["n_views"], noise=cfg["noise"],
        label_flip=cfg["label_flip"], seed=cfg["synth_seed"],
    )


# ---------------------------------------------------------------- commands


def _need_path(cfg: dict, key: str, must_exist: bool = True) -> str:
    path = cfg[key]
    if not path:
        raise UsageError(f"config key {key!r} is required for this command")
    if must_exist and not os.path.exists(path):
        raise LoadError(f"{key} {path!r} does not exist")
    return path


def _checkpoint_path(cfg: dict) -> str:
    return cfg["checkpoint"] or os.path.join(cfg["output_dir"], "checkpoint.json")


def _splits(cfg: dict, ds: MultiViewDataset):
    return split_dataset(ds, cfg["split"], make_rng(cfg["seed"]))


def _restrict(ds: MultiViewDataset, views: Optional[Sequence[int]]) -> MultiViewDataset:
    if views is None:
        return ds
    if max(views) > ds.n_views:
        raise UsageError(f"config key 'views': dataset has only {ds.n_views} views")
    keep = np.zeros(ds.n_views, dtype=bool)
    keep[[v - 1 for v in views]] = True
    mask = ds.mask & keep
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size < ds.n:
        log.warning("%d samples observe none of views %s and are skipped", ds.n - rows.size, _fmt(views))
    return ds.subset(rows).with_mask(mask[rows])


def _write(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_synth(cfg: dict) -> None:
    out = _need_path(cfg, "data_dir", must_exist=False)
    ds = synthesize_dataset(synth_config(cfg))
    save_dataset(ds, out)
    log.info("wrote %d samples with %d views to %s", ds.n, ds.n_views, out)


def cmd_train(cfg: dict) -> None:
    ds = load_dataset(_need_path(cfg, "data_dir"))
    tc = train_config(cfg)
    train, val, test = _splits(cfg, ds)
    if cfg["missing_rate"] > 0:
        train = apply_missingness(train, cfg["missing_rate"], make_rng(cfg["seed"] + 1))
    params, history = train_deepimv(tc, train, val)
    out = cfg["output_dir"]
    save_params(params, _checkpoint_path(cfg))
    history.write_csv(os.path.join(out, "history.csv"))
    rep = MetricsReport(["split"])
    for name, part in (("validation", val), ("test", test)):
        rep.add({"split": name}, [auroc_from_probs(predict_proba(params, part.batch(), tc.fusion), part.labels)])
    rep.write(os.path.join(out, "metrics.csv"))
    print(rep.format())


def cmd_eval(cfg: dict) -> None:
    ds = load_dataset(_need_path(cfg, "data_dir"))
    params = load_params(_checkpoint_path(cfg))
    _, _, test = _splits(cfg, ds)
    test = _restrict(test, cfg["views"])
    fusion = cfg["fusion"]
    rep = MetricsReport(["split", "n_views"])
    for k, score in view_count_auroc(lambda d: predict_proba(params, d.batch(), fusion), test).items():
        rep.add({"split": "test", "n_views": k}, [score])
    info = information_report(params, test, fusion)
    out = cfg["output_dir"]
    rep.write(os.path.join(out, "metrics.csv"))
    info.write(os.path.join(out, "information.csv"))
    print(rep.format())
    print(info.format())


def cmd_predict(cfg: dict) -> None:
    ds = _restrict(load_dataset(_need_path(cfg, "data_dir")), cfg["views"])
    params = load_params(_checkpoint_path(cfg))
    rng = make_rng(cfg["seed"]) if cfg["eval_samples"] else None
    probs = predict_proba(params, ds.batch(), cfg["fusion"], cfg["eval_samples"], rng)
    rows = ([i, *(repr(float(p)) for p in row)] for i, row in zip(ds.ids, probs))
    _write(os.path.join(cfg["output_dir"], "predictions.csv"), ["id", *(f"p_{c}" for c in range(probs.shape[1]))], rows)
    log.info("wrote predictions for %d samples", ds.n)


def cmd_ablate(cfg: dict) -> None:
    ds = load_dataset(_need_path(cfg, "data_dir"))
    rep = run_ablation(train_config(cfg), ds, cfg["repeats"], cfg["missing_rate"], cfg["seed"])
    out = cfg["output_dir"]
    rep.write(os.path.join(out, "ablation.csv"), os.path.join(out, "ablation_long.csv"))
    print(rep.format())


def cmd_sweep(cfg: dict) -> None:
    ds = load_dataset(_need_path(cfg, "data_dir"))
    rep = missing_rate_sweep(train_config(cfg), ds, cfg["rates"], cfg["repeats"], cfg["seed"])
    out = cfg["output_dir"]
    rep.write(os.path.join(out, "sweep.csv"), os.path.join(out, "sweep_long.csv"))
    print(rep.format())


def cmd_gradcheck(cfg: dict) -> None:
    tc, ds = tiny_gradcheck_setup(cfg["seed"])
    res = grad_check(tc, ds)
    _write(
        os.path.join(cfg["output_dir"], "gradcheck.csv"),
        ["n_params", "max_rel_error", "max_abs_error", "worst_param", "passed"],
        [[res.n_params, repr(res.max_rel_error), repr(res.max_abs_error), res.worst_param, int(res.passed)]],
    )
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_params} parameters (worst: {res.worst_param})")
    if not res.passed:
        raise NumericError(f"gradient check failed: max relative error {res.max_rel_error:.3e} >= 1e-4")


def cmd_project(cfg: dict) -> None:
    ds = load_dataset(_need_path(cfg, "data_dir"))
    params = load_params(_checkpoint_path(cfg))
    views = cfg["views"] or tuple(range(1, ds.n_views + 1))
    sub = _restrict(ds, views)
    pattern = np.zeros(ds.n_views, dtype=bool)
    pattern[[v - 1 for v in views]] = True
    coords = latent_pca_projection(params, sub, pattern, cfg["fusion"])
    rows = ([i, int(y), repr(float(a)), repr(float(b))] for i, y, (a, b) in zip(sub.ids, sub.labels, coords))
    _write(os.path.join(cfg["output_dir"], "projection.csv"), ["id", "label", "pc1", "pc2"], rows)


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "project": cmd_project,
}


# ---------------------------------------------------------------- entry point


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # report through our exit codes, not argparse's
        raise _ArgError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepimv", description="Incomplete multi-view classification with a variational information bottleneck.")
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return p


def build_config(args: argparse.Namespace) -> dict[str, Any]:
    text = ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except (OSError, UnicodeDecodeError) as exc:
            raise LoadError(f"cannot read config {args.config}: {exc}") from exc
    cfg = parse_config(text)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg["output_dir"] = env
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    return cfg


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command not in HANDLERS:
            raise UsageError(f"unknown command {args.command!r}; choose one of: {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
        cfg = build_config(args)
        try:
            train_config(cfg)
        except ContractError as exc:
            raise UsageError(str(exc)) from None
        os.makedirs(cfg["output_dir"], exist_ok=True)
        with open(os.path.join(cfg["output_dir"], "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_config(cfg))
        HANDLERS[args.command](cfg)
    except (UsageError, _ArgError) as exc:
        print(f"deepimv: usage error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except NumericError as exc:
        print(f"deepimv: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (LoadError, ContractError, OSError) as exc:
        print(f"deepimv: data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
