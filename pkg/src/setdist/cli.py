"""Command-line interface: ``python -m setdist <command> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
Every command accepts ``--config FILE``: a JSON object whose keys are the
command's long flag names (``lambda``, ``window``, ``out-dim`` ...);
flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from setdist import checkpoint, data
from setdist.evaluate import (
    evaluate,
    rank_gallery,
    reports_to_csv,
    reports_to_json,
    sweep_lambda,
    sweep_window,
)
from setdist.learn import TrainConfig, train
from setdist.ot import ConvergenceError, DistanceParams, set_distance

METHOD_CHOICES = ("exact", "sinkhorn", "gaussian", "mean-euclid")
DEFAULT_LAMBDAS = (0.0, 5.0, 10.0, 20.0, 30.0, 50.0)
DEFAULT_WINDOWS = (1, 2, 4, 8)
COMMAND_NAMES = ("gen", "dist", "rank", "train", "eval", "sweep-lambda", "sweep-window")


class UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


# ---------------------------------------------------------------------------
# parser


def _distance_flags(p: argparse.ArgumentParser, methods: bool = True) -> None:
    if methods:
        p.add_argument("--method", choices=METHOD_CHOICES, default="sinkhorn")
    p.add_argument("--lambda", dest="lam", type=float, default=20.0,
                   help="entropic strength on the max-normalised cost (default 20)")
    p.add_argument("--window", type=int, default=1, help="moving-average window K (default 1)")
    p.add_argument("--eps", type=float, default=1e-6, help="covariance ridge for gaussian")
    p.add_argument("--model", type=Path, help="checkpoint; raw features when omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setdist", description="Set-to-set distances for tracklets.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", help="write a synthetic dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--modes", type=int, default=2)
    p.add_argument("--outlier-rate", type=float, default=0.1)
    p.add_argument("--separable", action="store_true",
                   help="two tight identities without outliers (other shape flags ignored)")

    p = sub.add_parser("dist", help="distance between two tracklets")
    p.add_argument("a", help="dataset dir holding one tracklet, or DIR:TRACKLET_ID")
    p.add_argument("b")
    _distance_flags(p)
    p.add_argument("--emit-plan", type=Path, help="write the transport plan as CSV")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("rank", help="rank a dataset's tracklets against one query")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--query", required=True, help="tracklet id of the query")
    _distance_flags(p)
    p.add_argument("--same-camera", action="store_true",
                   help="keep gallery entries of the query identity from the query camera")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("train", help="train an embedding; writes a checkpoint and loss history")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, help="loss-history CSV (default: OUT with .csv suffix)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=TrainConfig.total_epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--lambda", dest="lam", type=float, default=TrainConfig.lam)
    p.add_argument("--distance", choices=("sinkhorn", "exact"), default="sinkhorn")
    p.add_argument("--margin", type=float, default=TrainConfig.margin)
    p.add_argument("--out-dim", type=int, default=TrainConfig.out_dim)
    p.add_argument("--activation", choices=("identity", "relu"), default="identity")
    p.add_argument("--batch", type=int, default=TrainConfig.batch_tracklets)
    p.add_argument("--frames", type=int, default=TrainConfig.frames_per_tracklet)

    for name, helptext in (("eval", "CMC and mAP over a dataset"),
                           ("sweep-lambda", "evaluate sinkhorn over a lambda grid"),
                           ("sweep-window", "evaluate one method over a window grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", type=Path, required=True)
        _distance_flags(p, methods=name != "sweep-lambda")
        if name == "sweep-lambda":
            p.add_argument("--lambdas", type=_float_list, default=list(DEFAULT_LAMBDAS))
        if name == "sweep-window":
            p.add_argument("--windows", type=_int_list, default=list(DEFAULT_WINDOWS))
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", type=Path, help="write the report (CSV, or JSON with --json)")
        p.add_argument("--json", action="store_true")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    sub = _subparser(parser, command)
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        sub.error(f"cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        sub.error("config must be a JSON object")
    flags = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                flags[opt[2:]] = action
    defaults = {}
    for key, value in cfg.items():
        action = flags.get(key)
        if action is None or key == "help":
            sub.error(f"unknown config key {key!r}")
        if isinstance(value, list) and action.type in (_float_list, _int_list):
            value = ",".join(str(v) for v in value)
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        elif action.type is Path and value is not None:
            value = Path(value)
        if action.choices is not None and value not in action.choices:
            sub.error(f"config key {key!r}: invalid choice {value!r}")
        defaults[action.dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    for name in COMMAND_NAMES:
        _subparser(parser, name).add_argument(
            "--config", help="JSON file with flag values (flags override)")
    if argv and argv[0] in COMMAND_NAMES:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[1:])
        if known.config:
            _apply_config(parser, argv[0], known.config)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands


def _params(args) -> DistanceParams:
    return DistanceParams(lam=args.lam, eps=args.eps, window=args.window)


def _model(args):
    if args.model is None:
        return None
    model, _ = checkpoint.load(args.model)
    return model


def _single_tracklet(spec: str):
    directory, _, tid = spec.partition(":")
    ds = data.load(directory)
    if tid:
        return ds.by_id(tid)
    if len(ds) != 1:
        raise UsageError(f"{directory} holds {len(ds)} tracklets; name one as DIR:TRACKLET_ID")
    return ds.tracklets[0]


def cmd_gen(args, out) -> None:
    if args.separable:
        cfg = data.separable_config(args.seed)
    else:
        cfg = data.SyntheticConfig(num_identities=args.identities, cameras_per_identity=args.cameras,
                                   raw_dim=args.dim, modes_per_identity=args.modes,
                                   outlier_rate=args.outlier_rate, seed=args.seed)
    ds = data.generate(cfg)
    data.save(ds, args.out)
    print(f"wrote {len(ds)} tracklets", file=out)


def cmd_dist(args, out) -> None:
    if args.emit_plan and args.method not in ("exact", "sinkhorn"):
        raise UsageError("--emit-plan needs --method exact or sinkhorn")
    a, b = _single_tracklet(args.a), _single_tracklet(args.b)
    res = set_distance(a, b, _model(args), args.method, _params(args))
    if args.emit_plan:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("row", "col", "weight"))
        for (i, j), p in np.ndenumerate(res.plan):
            w.writerow((i, j, _fmt(p)))
        args.emit_plan.write_text(buf.getvalue(), encoding="utf-8")
    if args.json:
        payload = {"method": res.method, "value": res.value}
        if res.objective is not None:
            payload["objective"] = res.objective
        print(json.dumps(payload, sort_keys=True), file=out)
    else:
        print(_fmt(res.value), file=out)


def cmd_rank(args, out) -> None:
    ds = data.load(args.data)
    query = ds.by_id(args.query)
    gallery = [t for t in ds.tracklets if t.tracklet_id != query.tracklet_id]
    r = rank_gallery(query, gallery, _model(args), args.method, _params(args),
                     cross_camera=not args.same_camera)
    if args.json:
        rows = [{"id": g, "distance": float(d)} for g, d in zip(r.gallery_ids, r.distances)]
        print(json.dumps(rows, indent=2), file=out)
    else:
        for g in r.gallery_ids:
            print(g, file=out)


def cmd_train(args, out) -> None:
    ds = data.load(args.data)
    cfg = TrainConfig(margin=args.margin, batch_tracklets=args.batch, frames_per_tracklet=args.frames,
                      learning_rate=args.lr, total_epochs=args.epochs, lam=args.lam,
                      distance=args.distance, out_dim=args.out_dim, activation=args.activation,
                      seed=args.seed)
    result = train(ds.tracklets, cfg)
    checkpoint.save(args.out, result.model, result.classifier)
    history = args.history or args.out.with_suffix(".csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "lr", "triplet", "id", "total", "active_triplets"))
    for e in result.history:
        w.writerow((e.epoch, _fmt(e.lr), _fmt(e.triplet), _fmt(e.identification), _fmt(e.total),
                    e.active_triplets))
    history.write_text(buf.getvalue(), encoding="utf-8")
    if result.history:
        last = result.history[-1]
        print(f"epochs {len(result.history)} triplet {last.triplet:.6f} id {last.identification:.6f}",
              file=out)


def _emit_reports(args, reports, out) -> None:
    text = reports_to_json(reports) if args.json else reports_to_csv(reports)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        out.write(text)


def cmd_eval(args, out) -> None:
    ds = data.load(args.data)
    rep = evaluate(ds.tracklets, _model(args), args.method, _params(args), threads=args.threads)
    _emit_reports(args, [rep], out)


def cmd_sweep_lambda(args, out) -> None:
    ds = data.load(args.data)
    reports = sweep_lambda(ds.tracklets, _model(args), args.lambdas, window=args.window,
                           params=_params(args), threads=args.threads)
    _emit_reports(args, reports, out)


def cmd_sweep_window(args, out) -> None:
    ds = data.load(args.data)
    reports = sweep_window(ds.tracklets, _model(args), args.windows, method=args.method,
                           params=_params(args), threads=args.threads)
    _emit_reports(args, reports, out)


COMMANDS = {
    "gen": cmd_gen,
    "dist": cmd_dist,
    "rank": cmd_rank,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-window": cmd_sweep_window,
}


def _validate(args) -> None:
    for name in ("window", "epochs", "threads", "out_dim", "batch", "frames", "identities",
                 "cameras", "dim", "modes"):
        value = getattr(args, name, None)
        if value is not None and value < 1 and not (name == "epochs" and value == 0):
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if getattr(args, "lam", 0.0) < 0:
        raise UsageError("--lambda must be nonnegative")
    for name in ("lambdas", "windows"):
        if getattr(args, name, None) == []:
            raise UsageError(f"--{name} is empty")


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _validate(args)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        _subparser(build_parser(), args.command).print_usage(sys.stderr)
        print(f"setdist: error: {exc}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"setdist: error: {exc.args[0]}", file=sys.stderr)
        return 1
    except (ValueError, OSError, ArithmeticError, ConvergenceError) as exc:
        print(f"setdist: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
