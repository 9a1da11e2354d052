"""``hcal`` command line: synth, train, eval, metrics and gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data or validation
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
import typing
from pathlib import Path

import numpy as np

from . import numcore as nc
from .dataio import SynthSpec, load_dataset, write_synth
from .encoder import EncoderConfig, encode, init_encoder
from .errors import CheckpointError, ConfigError, DataError, HCALError, NumericalError, TaxonomyError
from .evalmetrics import DEFAULT_HVR_NORM, HVR_NORMS, PREDICT_MODES, metrics_report, read_predictions
from .evalmetrics import records_from_arrays, write_metrics, write_predictions
from .hierfeat import hierarchy_features, per_sample
from .objective import adaptive_weights, info_nce_level1, info_nce_levelk, total_loss
from .protobank import init_prototypes, perturbed_view
from .taxonomy import Taxonomy, balanced, load_taxonomy
from .trainer import TrainConfig, features_of, fit, load_checkpoint, predict_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PATH_KEYS = ("taxonomy", "train", "test", "out")
ABLATIONS = {
    "multitask": {"multi_task": False},
    "aggregation": {"feature_aggregation": False},
    "perturbation": {"prototype_perturbation": False},
    "weighting": {"adaptive_weighting": False},
}


class UsageError(Exception):
    """Bad command line; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- flat key = value configs ---------------------------------------------------


def _field_types() -> dict[str, typing.Any]:
    return typing.get_type_hints(TrainConfig)


def coerce(key: str, raw: str):
    """Turn a textual value into the type the TrainConfig field expects."""
    hint = _field_types()[key]
    raw = raw.strip()
    text = str(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if "tuple" in text:
            if raw.lower() in ("", "none", "()"):
                return None if "None" in text else ()
            item = float if "float" in text else int
            return tuple(item(v) for v in raw.strip("()[]").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve_config(raw: dict[str, str], overrides: dict[str, typing.Any]) -> tuple[TrainConfig, dict[str, str]]:
    """Merge file values, flag overrides and ``HCAL_SEED`` into a TrainConfig plus paths."""
    types = _field_types()
    unknown = sorted(set(raw) - set(types) - set(PATH_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = {k: coerce(k, v) for k, v in raw.items() if k in types}
    paths = {k: v for k, v in raw.items() if k in PATH_KEYS}
    for k, v in overrides.items():
        if v is None:
            continue
        if k in PATH_KEYS:
            paths[k] = str(v)
        else:
            values[k] = coerce(k, v) if isinstance(v, str) else v
    if os.environ.get("HCAL_SEED"):
        try:
            values["seed"] = int(os.environ["HCAL_SEED"])
        except ValueError as exc:
            raise ConfigError(f"HCAL_SEED must be an integer, got {os.environ['HCAL_SEED']!r}") from exc
    if "epochs" not in values:
        raise ConfigError("missing required key: epochs")
    return TrainConfig(**values), paths


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v) if v else "()"
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def config_text(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def write_resolved(out: Path, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(values), encoding="utf-8")


# -- commands -------------------------------------------------------------------


def _levels(text: str) -> tuple[int, ...]:
    try:
        sizes = [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--levels expects comma-separated integers, got {text!r}") from exc
    # accepted in either order; stored finest first
    return tuple(sorted(sizes, reverse=True))


def cmd_synth(args) -> int:
    spec = SynthSpec(
        classes_per_level=_levels(args.levels),
        input_dim=args.input_dim,
        separation=args.separation,
        sigma=args.sigma,
        per_class=args.per_class,
        seed=args.seed,
        train_fraction=args.train_fraction,
        test_fraction=round(1.0 - args.train_fraction, 12),
    )
    balanced(spec.classes_per_level)
    paths = write_synth(spec, args.out)
    write_resolved(Path(args.out), dataclasses.asdict(spec))
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    overrides = {k: getattr(args, k) for k in list(_field_types()) + list(PATH_KEYS)}
    for name in args.ablate or []:
        overrides.update(ABLATIONS[name])
    config, paths = resolve_config(raw, overrides)
    for key in ("taxonomy", "train", "out"):
        if key not in paths:
            raise ConfigError(f"missing required key: {key}")
    tax = load_taxonomy(paths["taxonomy"])
    train = load_dataset(paths["train"], tax)
    out = Path(paths["out"])
    write_resolved(out, {**config.to_dict(), **paths})

    def log(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch}: total {rec.total:.4f} losses {np.round(rec.losses, 4).tolist()}")

    model = state = None
    if args.resume:
        model, state, _ = load_checkpoint(args.resume, expect_dim=config.dim)
        if model.tax.to_dict() != tax.to_dict():
            raise TaxonomyError("resume checkpoint was trained on a different taxonomy")
    t0 = time.perf_counter()
    report, _, _ = fit(train, tax, config, model=model, state=state, out_dir=out, log=log)
    (out / "report.csv").write_text(report.to_csv(tax.m), encoding="utf-8")
    timing = {"total_seconds": time.perf_counter() - t0, "epoch_seconds": [r.wall_time for r in report.records]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    print(f"checkpoint {report.checkpoint}")
    return EXIT_OK


def _dump_embeddings(out: Path, ids, feats: list[np.ndarray], model) -> None:
    with (out / "embeddings.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for t, f in enumerate(feats):
            for sid, row in zip(ids, f):
                w.writerow([t, sid, *map(repr, row.tolist())])
    with (out / "prototypes.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for t, tower in enumerate(model.towers):
            for k in tower.levels:
                for c, row in enumerate(tower.bank.base(k).data):
                    w.writerow([t, k, c, *map(repr, row.tolist())])


def cmd_eval(args) -> int:
    model, _, config = load_checkpoint(args.checkpoint)
    tax = load_taxonomy(args.taxonomy) if args.taxonomy else model.tax
    if tax.to_dict() != model.tax.to_dict():
        raise TaxonomyError("taxonomy file differs from the one stored in the checkpoint")
    data = load_dataset(args.test, tax)
    if len(data) == 0:
        raise DataError("evaluation set is empty")
    out = Path(args.out)
    write_resolved(
        out,
        {**config.to_dict(), "checkpoint": args.checkpoint, "test": args.test, "out": args.out,
         "mode": args.mode, "hvr_norm": args.hvr_norm},
    )
    preds, scores = predict_model(model, data.features, args.mode)
    records = records_from_arrays(preds, scores, tax.m, data.ids)
    write_predictions(records, out / "predictions.jsonl")
    report = metrics_report(records, dict(zip(data.ids, data.labels.tolist())), tax, args.hvr_norm)
    write_metrics(report, out / "metrics.json")
    if args.dump_embeddings:
        _dump_embeddings(out, data.ids, features_of(model, data.features), model)
    print(json.dumps({"acc": report.acc, "hvr": report.hvr, "hvr_default": report.hvr_default}))
    return EXIT_OK


def cmd_metrics(args) -> int:
    tax = load_taxonomy(args.taxonomy)
    preds = read_predictions(args.predictions, m=tax.m)
    truths = load_dataset(args.truths, tax)
    report = metrics_report(preds, dict(zip(truths.ids, truths.labels.tolist())), tax, args.hvr_norm)
    if args.out:
        write_metrics(report, args.out)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def spread_taxonomy(sizes: tuple[int, ...]) -> Taxonomy:
    """Contiguous blocks of children per parent; sizes need not divide evenly."""
    parents = [[i * sizes[k + 1] // sizes[k] for i in range(sizes[k])] for k in range(len(sizes) - 1)]
    return Taxonomy(len(sizes), tuple(sizes), tuple(tuple(p) for p in parents))


def gradcheck(
    n: int = 4,
    d: int = 8,
    sizes: tuple[int, ...] = (3, 2),
    input_dim: int = 5,
    epsilon: float = 0.05,
    tau: float = 0.1,
    seed: int = 0,
    step: float = 1e-5,
    corrupt: bool = False,
) -> float:
    """Max relative error of the frozen-weight total-loss gradient vs central differences."""
    rng = np.random.default_rng(seed)
    tax = spread_taxonomy(sizes)
    fine = np.arange(n) % tax.size(1)
    labels = np.array([tax.chain(int(c)) for c in fine])
    x = rng.standard_normal((n, input_dim))
    enc = init_encoder(EncoderConfig(input_dim, (6,), d, seed=seed + 1))
    bank = init_prototypes(tax, d, seed=seed + 2, epsilon=epsilon)

    def losses():
        f1 = encode(enc, x)
        pert = perturbed_view(bank, seed)
        out = [info_nce_level1(f1, labels[:, 0], bank, tau, pert)]
        for fk in hierarchy_features(per_sample(f1, labels[:, 0]), labels, tax):
            out.append(info_nce_levelk(fk, bank, fk.level, tau, pert))
        return out

    weights = adaptive_weights([l.item() for l in losses()], 0.5)
    params = enc.parameters() + bank.parameters()

    def objective():
        return total_loss(losses(), weights)

    for p in params:
        p.zero_grad()
    nc.backward(objective())
    analytic = [p.grad.copy() for p in params]
    if corrupt:
        # negative control: a plausible bug that drops half of one prototype gradient
        analytic[-1] = analytic[-1] * 0.5
    return nc.finite_diff_check(objective, params, step, analytic=analytic)


def cmd_gradcheck(args) -> int:
    err = gradcheck(
        n=args.n, d=args.d, sizes=_levels(args.levels), input_dim=args.input_dim, epsilon=args.epsilon,
        tau=args.tau, seed=args.seed, step=args.step, corrupt=args.corrupt,
    )
    ok = err < args.tol
    print(f"max relative error {err:.3e} (tolerance {args.tol:.0e}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ---------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for name in _field_types():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic hierarchical dataset")
    s.add_argument("--levels", default="8,4,2", help="classes per level, e.g. 2,4,8")
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--input-dim", type=int, default=16)
    s.add_argument("--separation", type=float, default=10.0)
    s.add_argument("--sigma", type=float, default=0.5)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write report.csv plus a checkpoint")
    t.add_argument("--config", help="flat 'key = value' file")
    for key in PATH_KEYS:
        t.add_argument("--" + key, dest=key, default=None)
    _add_train_flags(t)
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint for --epochs more epochs")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="predict a dataset and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--taxonomy")
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=PREDICT_MODES, default="per_sample")
    e.add_argument("--hvr-norm", choices=HVR_NORMS, default=DEFAULT_HVR_NORM)
    e.add_argument("--dump-embeddings", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="score a predictions file against labelled data")
    m.add_argument("--predictions", required=True)
    m.add_argument("--truths", required=True)
    m.add_argument("--taxonomy", required=True)
    m.add_argument("--hvr-norm", choices=HVR_NORMS, default=DEFAULT_HVR_NORM)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)

    g = sub.add_parser("gradcheck", help="finite-difference audit of the loss gradients")
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--levels", default="3,2")
    g.add_argument("--input-dim", type=int, default=5)
    g.add_argument("--epsilon", type=float, default=0.05)
    g.add_argument("--tau", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--corrupt", action="store_true")
    g.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"hcal: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"hcal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"hcal: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TaxonomyError, CheckpointError, HCALError, ValueError, OSError) as exc:
        print(f"hcal: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
