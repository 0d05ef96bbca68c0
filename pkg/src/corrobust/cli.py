"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks
from .checkpoint import CheckpointError, CheckpointMeta, load_checkpoint, save_checkpoint
from .corruptions import KINDS, VALIDATION_KINDS, CorruptedSet, export_corrupted
from .data import DataError, parse_data_arg, write_cifar10_binary, write_manifest
from .graphgen import check_random_graphs
from .metrics import (
    distance_stats,
    logits_of,
    model_ece,
    sigma_probe,
    temperature_rescale,
)
from .perceptual import LpaConfig, lpa_attack, lpips, reference_lpips_config
from .report import ReportError, emit_report, load_results, make_results, save_results, summarize_model
from .tensor import NonFiniteError
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("corrobust")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive of stop) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}; use start:stop:step or a comma list") from None


def _kinds(arg: str | None, validation: bool) -> list[str]:
    if validation:
        return list(VALIDATION_KINDS)
    if arg in (None, "all"):
        return list(KINDS)
    kinds = [k.strip() for k in arg.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise UsageError(f"unknown corruption kinds {unknown}; choose from {list(KINDS)}")
    return kinds


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = parse_data_arg(args.data)
    write_cifar10_binary(args.out, ds)
    write_manifest(args.out + ".json", ds)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    ds = parse_data_arg(args.data)
    path = export_corrupted(ds, args.out, _kinds(args.corruptions, False), seed=args.seed)
    print(f"wrote {path}")
    return EXIT_OK


def _load_config(path: str, seed: int | None) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if seed is not None:
        raw["seed"] = seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config {path}: {exc}") from None


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    ds = parse_data_arg(args.data)
    eval_set = parse_data_arg(args.eval_data) if args.eval_data else None
    model, tlog = train(config, ds, eval_set)
    _check_finite(model)
    save_checkpoint(model, CheckpointMeta(config.method, config.seed, config.epochs, {"config": config.to_dict()}),
                    args.out)
    if args.log:
        Path(args.log).write_text(json.dumps(tlog.to_dict(), indent=2))
    last = tlog.records[-1]
    print(f"trained {config.epochs} epochs, final loss {last.train_loss:.4f}; saved {args.out}")
    return EXIT_OK


def _check_finite(model) -> None:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise NumericError(f"parameter {name} is not finite")


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    ds = parse_data_arg(args.data)
    kinds = _kinds(args.corruptions, args.validation_split)
    corrupted = CorruptedSet.build(ds, kinds, seed=args.seed) if args.corruptions or args.validation_split else None
    summary = summarize_model(meta.method, model, ds, corrupted)
    print(f"clean accuracy: {summary['clean_accuracy']:.4f}")
    if summary["corruption_accuracy"] is not None:
        print(f"corruption accuracy: {summary['corruption_accuracy']:.4f}")
    which = "corruption ece" if corrupted is not None else "ece"
    print(f"{which}: {summary['ece']:.4f}  after rescaling: {summary['ece_rescaled']:.4f} "
          f"(t={summary['temperature']:.3f}, fitted on clean)")
    if args.out:
        doc = make_results([summary], meta={"command": "eval", "checkpoint": args.ckpt, "data": args.data,
                                            "seed": args.seed, "kinds": kinds if corrupted else []})
        save_results(doc, args.out)
    return EXIT_OK


def cmd_attack(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = parse_data_arg(args.data)
    rng = np.random.default_rng(args.seed)
    p = 2 if args.norm == "l2" else np.inf
    if args.method == "lpa":
        extractor = load_checkpoint(args.lpips_ckpt)[0] if args.lpips_ckpt else model
        cfg = reference_lpips_config(extractor)
        lpa = LpaConfig(args.eps, steps=args.steps or 20, step_size=args.step_size or 0.1)
    hits = 0
    for i in range(0, len(ds), args.batch_size):
        x, y = ds.images[i : i + args.batch_size], ds.labels[i : i + args.batch_size]
        if args.method == "fgm":
            delta = attacks.fgm(model, x, y, args.eps)
        elif args.method == "fgsm":
            delta = attacks.fgsm(model, x, y, args.eps)
        elif args.method == "pgd":
            conf = attacks.AttackConfig(attacks.ThreatModel(p, args.eps), args.steps or 10, args.step_size,
                                        "random" if args.random_init else "zero")
            delta = attacks.pgd(model, x, y, conf, rng=rng)
        else:
            delta = lpa_attack(model, cfg, x, y, lpa)
        hits += int(np.sum(logits_of(model, attacks.perturb(x, delta)).argmax(1) == y))
    print(f"robust accuracy ({args.method}, eps={args.eps:g}): {hits / len(ds):.4f}")
    return EXIT_OK


def cmd_probe_sigma(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = parse_data_arg(args.data)
    curve = sigma_probe(model, ds, parse_grid(args.grid), "sphere" if args.sphere else "gaussian",
                        args.samples, args.seed)
    _write_csv(args.out, ["sigma", "loss"], [[f"{s:g}", f"{v:.6f}"] for s, v in zip(curve.grid, curve.losses)])
    return EXIT_OK


def cmd_distances(args) -> int:
    ds = parse_data_arg(args.data)
    corrupted = CorruptedSet.build(ds, _kinds(args.corruptions, False), seed=args.seed)
    if args.metric == "lpips":
        if not args.lpips_ckpt:
            raise UsageError("--metric lpips needs --lpips-ckpt")
        cfg = reference_lpips_config(load_checkpoint(args.lpips_ckpt)[0])

        def metric(a, b):
            return np.concatenate([lpips(cfg, a[i : i + 500], b[i : i + 500]) for i in range(0, len(a), 500)])

        metric.name = "lpips"
        table = distance_stats(corrupted, metric)
    else:
        table = distance_stats(corrupted, "l2")
    rows = [[k, s + 1, f"{d:.6f}"] for k, row in table.distances.items() for s, d in enumerate(row)]
    _write_csv(args.out, ["kind", "severity", table.metric], rows)
    for kind, sev in table.non_monotone.items():
        log.warning("%s: distance does not increase at severities %s", kind, sev)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = parse_data_arg(args.data)
    t, rep = temperature_rescale(logits_of(model, ds.images), ds.labels)
    before = model_ece(model, ds.images, ds.labels)
    print(f"temperature: {t:.4f}")
    print(f"ece before: {before:.4f}  ece after: {rep.ece:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _load_config(args.config, None)
    if args.param not in base.to_dict():
        raise UsageError(f"unknown config field {args.param!r}")
    grid = parse_grid(args.grid)
    data = parse_data_arg(args.data)
    if args.test_data:
        train_set, test_set = data, parse_data_arg(args.test_data)
    else:
        train_set, test_set = data.split(int(round(0.8 * len(data))))
    kinds = _kinds(args.corruptions, args.validation_split)
    corrupted = CorruptedSet.build(test_set, kinds, seed=args.seed) if args.corruptions or args.validation_split \
        else None
    runs, methods = [], []
    for value in grid:
        for k in range(args.seeds):
            seed = args.seed + k
            current = getattr(base, args.param)
            cast = int if isinstance(current, int) and not isinstance(current, bool) else float
            try:
                config = replace(base, **{args.param: cast(value)}, seed=seed)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{args.param}={value}: {exc}") from None
            model, tlog = train(config, train_set)
            _check_finite(model)
            label = f"{config.method}[{args.param}={value:g},seed={seed}]"
            summary = summarize_model(label, model, test_set, corrupted)
            methods.append(summary)
            runs.append({"param": args.param, "value": value, "seed": seed, "method": label,
                         "final_loss": tlog.records[-1].train_loss})
            print(f"{label}: clean {summary['clean_accuracy']:.4f} corruption {summary['corruption_accuracy']}")
    doc = make_results(methods, meta={"command": "sweep", "param": args.param, "grid": grid, "seeds": args.seeds,
                                      "base_seed": args.seed}, config=base.to_dict(), runs=runs)
    save_results(doc, args.out)
    print(f"wrote {len(runs)} runs to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    text = emit_report(load_results(args.input), args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = check_random_graphs(args.graphs, args.seed, args.tolerance)
    for r in results:
        print(f"graph seed={r.seed} params={r.params} max_rel_error={r.max_rel_error:.3e} "
              f"{'ok' if r.passed else 'FAIL'}")
    if not all(r.passed for r in results):
        raise NumericError("gradcheck failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="corrobust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "render a dataset to a binary record file")
    p.add_argument("--data", default="synthetic")
    p.add_argument("--out", required=True)

    p = add("export-corruptions", cmd_export, "write corrupted shards of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corruptions", default="all")

    p = add("train", cmd_train, "train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--log")
    p.set_defaults(seed=None)

    p = add("eval", cmd_eval, "clean / corruption accuracy and calibration")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--corruptions")
    p.add_argument("--validation-split", action="store_true")
    p.add_argument("--out")

    p = add("attack", cmd_attack, "robust accuracy under an attack")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["fgm", "fgsm", "pgd", "lpa"], required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--norm", choices=["l2", "linf"], default="l2")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--lpips-ckpt")
    p.add_argument("--batch-size", type=int, default=256)

    p = add("probe-sigma", cmd_probe_sigma, "loss under additive noise over a sigma grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--sphere", action="store_true")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out")

    p = add("distances", cmd_distances, "clean-to-corrupted distances per kind and severity")
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=["l2", "lpips"], default="l2")
    p.add_argument("--lpips-ckpt")
    p.add_argument("--corruptions", default="all")
    p.add_argument("--out")

    p = add("calibrate", cmd_calibrate, "fit a softmax temperature minimizing ECE")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = add("sweep", cmd_sweep, "train over a grid of one config field and several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--param", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--corruptions")
    p.add_argument("--validation-split", action="store_true")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "render a results JSON as CSV or Markdown")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--out")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check on random graphs")
    p.add_argument("--graphs", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-6)
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ReportError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
