"""Command-line interface: ``graphnmf <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, gradcheck, svgplot
from .admm import SolverConfig, ao_admm, nndsvd_init
from .factormer import ModelConfig, init_params
from .graph_core import DimensionError
from .models import learned_accel, learned_init
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("graphnmf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {value}")
    return value


def _block(text):
    parts = text.split(",")
    if len(parts) != 5:
        raise argparse.ArgumentTypeError(f"block must be 'count,rmin,rmax,cmin,cmax', got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"block fields must be integers, got {text!r}") from None


def _image_shape(text):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"image shape must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"image shape must be positive, got {text!r}")
    return h, w


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _num(x):
    return repr(float(x))


def _threads():
    raw = os.environ.get("NMF_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"NMF_THREADS must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise UsageError(f"NMF_THREADS must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


# -- gen --------------------------------------------------------------------

def cmd_gen(args):
    specs = [
        data.SyntheticSpec(count, (rmin, rmax), (cmin, cmax), args.rank, args.lam, args.sigma, args.seed)
        for count, rmin, rmax, cmin, cmax in args.block
    ]
    manifest = data.gen_synthetic(args.out, specs)
    print(f"wrote {len(manifest['files'])} matrices to {args.out}")
    if args.stats:
        stats = data.dataset_stats(data.load_dataset(args.out))
        stats.write_histogram_csv(Path(args.out) / "histogram.csv")
        print(f"entries {stats.count}  mean {stats.mean:.6g}  variance {stats.variance:.6g}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _load_train_config(path, kind, rank):
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise data.FormatError(f"{path}: invalid JSON ({err})") from err
        if not isinstance(raw, dict) or set(raw) - {"model", "train"}:
            raise data.FormatError(f"{path}: expected an object with 'model' and/or 'train' sections")
    model = dict(raw.get("model", {}))
    model.setdefault("rank", rank)
    train_cfg = dict(raw.get("train", {}))
    if train_cfg.setdefault("model_kind", kind) != kind:
        raise UsageError(f"config says model_kind={train_cfg['model_kind']!r} but --kind is {kind!r}")
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train_cfg)
    except (TypeError, ValueError) as err:
        raise data.FormatError(f"{path}: {err}") from err


def cmd_train(args):
    dataset = data.load_dataset(args.data)
    rank = data.read_manifest(args.data)["rank"]
    val = data.load_dataset(args.val) if args.val else None
    model_cfg, train_cfg = _load_train_config(args.config, args.kind, rank)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    params = init_params(model_cfg, args.kind, train_cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    width = len(str(train_cfg.epochs - 1))

    def on_epoch_end(epoch, params, history):
        data.save_checkpoint(f"{out}.epoch{epoch:0{width}d}", params, model_cfg, args.kind)
        print(f"epoch {epoch}: loss {history.epochs[-1][1]:.6g}  val_rmse {history.epochs[-1][2]:.6g}"
              f"  nbr_acc {history.epochs[-1][3]}", flush=True)

    params, history = train(dataset, params, train_cfg, model_cfg, val=val, on_epoch_end=on_epoch_end)
    data.save_checkpoint(out, params, model_cfg, args.kind)
    with open(f"{out}.steps.csv", "w", newline="", encoding="utf-8") as fh:
        w = _csv_writer(fh)
        w.writerow(["epoch", "step", "lr", "loss", "nbr_acc"])
        for epoch, step, lr, loss, nbr_acc in history.steps:
            w.writerow([epoch, step, _num(lr), _num(loss), nbr_acc])
    with open(f"{out}.epochs.csv", "w", newline="", encoding="utf-8") as fh:
        w = _csv_writer(fh)
        w.writerow(["epoch", "mean_loss", "val_rmse", "nbr_acc"])
        for epoch, loss, val_rmse, nbr_acc in history.epochs:
            w.writerow([epoch, _num(loss), _num(val_rmse), nbr_acc])
    return EXIT_OK


# -- run --------------------------------------------------------------------

def _load_model(path, kind):
    params, cfg, saved_kind = data.load_checkpoint(path)
    if saved_kind != kind:
        raise UsageError(f"{path} holds a {saved_kind!r} model, not {kind!r}")
    return params, cfg


def _solve(method, V, W0, H0, iters, inner, rho, model=None, nbr_acc=None):
    if method == "baseline":
        return ao_admm(V, W0, H0, SolverConfig(rho=rho, inner_iters=inner, outer_iters=iters))
    params, cfg = model
    cfg = replace(cfg, outer_iters=iters, inner_iters=inner, rho=rho)
    if method == "init":
        return learned_init(W0, H0, V, params, cfg)
    return learned_accel(W0, H0, V, params, cfg, min(nbr_acc, iters))


def cmd_run(args):
    if args.method != "baseline" and not args.model:
        raise UsageError(f"--method {args.method} requires --model")
    V = data.load_any_matrix(args.matrix)
    if args.normalize:
        V = data.normalize_mean_one(V)
    model = None
    if args.method != "baseline":
        model = _load_model(args.model, args.method)
        if model[1].rank != args.rank:
            raise UsageError(f"--rank {args.rank} does not match the model rank {model[1].rank}")
    W0, H0 = nndsvd_init(V, args.rank)
    traj = _solve(args.method, V, W0, H0, args.iters, args.inner, args.rho, model, args.nbr_acc)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = _csv_writer(fh)
            w.writerow(["iteration", "rmse", "seconds"])
            for t, (r, s) in enumerate(zip(traj.rmse, traj.seconds)):
                w.writerow([t, _num(r), _num(s)])
    if args.save_factors:
        out = Path(args.save_factors)
        out.mkdir(parents=True, exist_ok=True)
        data.save_matrix(out / "W.fmat", traj.W[-1])
        data.save_matrix(out / "H.fmat", traj.H[-1])
    print(f"final rmse {traj.rmse[-1]:.6e} after {len(traj) - 1} iterations")
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def quartiles(values):
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(q1), float(med), float(q3)


def _ratio(a, b):
    if b > 0:
        return a / b
    return 1.0 if a == b else float("inf")


def cmd_eval(args):
    methods = []
    models = {}
    if args.init:
        models["init"] = _load_model(args.init, "init")
        methods.append("init")
    if args.accel:
        models["accel"] = _load_model(args.accel, "accel")
        methods.append("accel")
    if not (args.baseline or methods):
        raise UsageError("nothing to evaluate: pass --baseline, --init or --accel")
    dataset = data.load_dataset(args.data)
    ranks = {cfg.rank for _, cfg in models.values()}
    rank = data.read_manifest(args.data)["rank"] if not ranks else ranks.pop()
    if ranks:
        raise UsageError("init and accel models have different ranks")
    nbr_acc = args.iters if args.nbr_acc is None else args.nbr_acc

    def solve_one(item):
        name, V = item
        W0, H0 = nndsvd_init(V, rank)
        curves = {"baseline": _solve("baseline", V, W0, H0, args.iters, args.inner, args.rho).rmse}
        for method in methods:
            curves[method] = _solve(method, V, W0, H0, args.iters, args.inner, args.rho,
                                    models[method], nbr_acc).rmse
        return name, curves

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = sorted(pool.map(solve_one, dataset), key=lambda item: item[0])

    shown = (["baseline"] if args.baseline else []) + methods
    iterations = range(args.iters + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rmse_per_matrix.csv", "w", newline="", encoding="utf-8") as fh:
        w = _csv_writer(fh)
        w.writerow(["method", "matrix", "iteration", "rmse"])
        for method in shown:
            for name, curves in results:
                for t in iterations:
                    w.writerow([method, name, t, _num(curves[method][t])])
    means = {m: [float(np.mean([c[m][t] for _, c in results])) for t in iterations] for m in shown}
    with open(out / "rmse_curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = _csv_writer(fh)
        w.writerow(["method", "iteration", "mean_rmse"])
        for method in shown:
            for t in iterations:
                w.writerow([method, t, _num(means[method][t])])
    quart = {}
    with open(out / "ratio_quartiles.csv", "w", newline="", encoding="utf-8") as fh:
        w = _csv_writer(fh)
        w.writerow(["method", "iteration", "q1", "median", "q3"])
        for method in methods:
            quart[method] = []
            for t in iterations:
                # Numerator and denominator come from the same matrix record.
                ratios = [_ratio(c[method][t], c["baseline"][t]) for _, c in results]
                q = quartiles(ratios)
                quart[method].append(q)
                w.writerow([method, t, *(_num(v) for v in q)])
    xs = list(iterations)
    (out / "rmse_curves.svg").write_text(svgplot.line_chart(
        {m: (xs, means[m]) for m in shown}, "Mean RMSE per iteration", "outer iteration", "RMSE", log_y=True),
        encoding="utf-8")
    (out / "ratio_quartiles.svg").write_text(svgplot.line_chart(
        {f"{m}/baseline": (xs, [q[1] for q in quart[m]]) for m in methods},
        "Pairwise RMSE ratio (median, Q1-Q3 band)", "outer iteration", "ratio", log_y=True,
        bands={f"{m}/baseline": (xs, [q[0] for q in quart[m]], [q[2] for q in quart[m]]) for m in methods}),
        encoding="utf-8")
    for method in shown:
        print(f"{method:>8}: mean rmse at iteration {args.iters} = {means[method][-1]:.6g}")
    return EXIT_OK


# -- grad-check -------------------------------------------------------------

def cmd_grad_check(args):
    worst = 0.0
    for name in gradcheck.CASES:
        err = gradcheck.check(name, args.seed)
        worst = max(worst, err)
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:<14} max relative error {err:.3e}  {status}")
    if worst > args.tol:
        print(f"gradient check failed: {worst:.3e} > tol {args.tol:.1e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- export-basis -----------------------------------------------------------

def basis_image(column, shape):
    """Min-max scale a column to 0..255 and reshape; a constant column maps to zeros."""
    column = np.asarray(column, dtype=np.float64)
    lo, hi = column.min(), column.max()
    if hi > lo:
        scaled = np.rint((column - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(column)
    return scaled.astype(np.uint8).reshape(shape)


def write_pgm(path, image):
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes())


def cmd_export_basis(args):
    W = data.load_matrix(args.factors)
    h, w = args.image_shape
    if h * w != W.shape[0]:
        raise DimensionError(f"image shape {h}x{w} has {h * w} pixels but columns have length {W.shape[0]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(W.shape[1] - 1)))
    for k in range(W.shape[1]):
        write_pgm(out / f"basis_{k:0{width}d}.pgm", basis_image(W[:, k], (h, w)))
    print(f"wrote {W.shape[1]} images to {out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser():
    p = _Parser(prog="graphnmf", description="Graph-network accelerated NMF.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--block", type=_block, action="append", required=True,
                   help="count,rmin,rmax,cmin,cmax (repeatable)")
    g.add_argument("--rank", type=_positive_int, required=True)
    g.add_argument("--sigma", type=float, default=0.01)
    g.add_argument("--lambda", dest="lam", type=float, default=None, help="exponential mean (default 1/sqrt(rank))")
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--stats", action="store_true", help="also write histogram.csv and print moments")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a learned-init or learned-acceleration model")
    t.add_argument("--kind", choices=("init", "accel"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="factorize one matrix")
    r.add_argument("--matrix", required=True, help="FMAT1 or CSV file")
    r.add_argument("--rank", type=_positive_int, required=True)
    r.add_argument("--method", choices=("baseline", "init", "accel"), default="baseline")
    r.add_argument("--model")
    r.add_argument("--iters", type=_nonneg_int, default=50)
    r.add_argument("--inner", type=_positive_int, default=5)
    r.add_argument("--rho", type=float, default=1.0)
    r.add_argument("--nbr-acc", type=_nonneg_int, default=5)
    r.add_argument("--normalize", action="store_true", help="scale the matrix to mean 1 first")
    r.add_argument("--csv")
    r.add_argument("--save-factors", metavar="DIR")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compare methods over a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", action="store_true")
    e.add_argument("--init")
    e.add_argument("--accel")
    e.add_argument("--iters", type=_nonneg_int, default=5)
    e.add_argument("--inner", type=_positive_int, default=5)
    e.add_argument("--rho", type=float, default=1.0)
    e.add_argument("--nbr-acc", type=_nonneg_int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference check of the differentiable pipeline")
    c.add_argument("--seed", type=_nonneg_int, default=0)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_grad_check)

    x = sub.add_parser("export-basis", help="write factor columns as PGM images")
    x.add_argument("--factors", required=True)
    x.add_argument("--image-shape", type=_image_shape, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_basis)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
