"""Command-line entry points.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import math
import sys
from pathlib import Path

import numpy as np
from scipy import linalg

from . import __version__
from .conv import forward, forward_trace
from .device import noise_sweep
from .lgd import SolverConfig
from .mapper import OverheadReport, map_dense, map_pruned
from .model_io import (load_network, load_tensor, load_weights, network_to_dict, read_json,
                       save_tensor, with_weights_paths, write_json)
from .policy import (CAP_MODES, Evaluator, PolicyThresholds, decide, decisions_record, layouts_record,
                     prune_network, sensitivity_csv, sensitivity_record, sweep_network)
from .pruner import GRAINS, masks_from_record, prune_layer
from .synthetic import make_synthetic, write_demo

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class CliError(ValueError):
    pass


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, args: argparse.Namespace, inputs: dict, outputs: list,
                   started: str) -> None:
    """Record what ran, on what, with which seed, and the sha256 of every output file."""
    base = path.parent
    write_json(path, {
        "command": command,
        "toolkit_version": __version__,
        "seed": getattr(args, "seed", None),
        "config_paths": {k: str(v) for k, v in inputs.items() if v is not None},
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "started": started,
        "finished": _now(),
        "outputs": {str(Path(p).relative_to(base)) if Path(p).is_relative_to(base) else str(p): _sha256(Path(p))
                    for p in sorted(outputs, key=str)},
    })


def _load_eval(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        if "x" not in data or "y" not in data:
            raise CliError(f"{path}: evaluation archive needs arrays 'x' and 'y'")
        return data["x"].astype(np.float64), data["y"].astype(np.int64)


def _solver(args) -> SolverConfig:
    return SolverConfig(eta=args.eta, iters=args.iters, r0=args.r0, seed=args.seed)


def _levels(text: str):
    if text.lower() in ("inf", "none", "∞"):
        return None
    return int(text)


# -- map ---------------------------------------------------------------------

def cmd_map(args) -> int:
    started = _now()
    net = load_network(args.net, require_weights=True)
    load_weights(net)  # shape check
    masks_dir = Path(args.masks) if args.masks else None
    dense, pruned = {}, {}
    for layer in net.layers:
        dense[layer.name] = map_dense(layer, net.crossbar_rows, net.crossbar_cols)
        pruned[layer.name] = dense[layer.name]
        if masks_dir is not None and (masks_dir / f"{layer.name}.json").exists():
            rec = read_json(masks_dir / f"{layer.name}.json")
            masks, _ = masks_from_record(rec)
            pruned[layer.name] = map_pruned(layer, masks, net.crossbar_rows, net.crossbar_cols, rec["grain"])
    report = OverheadReport([
        {"layer": name, "dense_T": dense[name].total_count, "dense_C": dense[name].compute_count,
         "pruned_T": pruned[name].total_count, "pruned_C": pruned[name].compute_count}
        for name in net.names])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, {"crossbar": {"rows": net.crossbar_rows, "cols": net.crossbar_cols},
                     "layers": layouts_record(pruned)})
    stem = out.with_suffix("")
    report_path = Path(f"{stem}.overhead.{args.format}")
    if args.format == "csv":
        report_path.write_text(report.to_csv())
    else:
        write_json(report_path, report.to_record())
    write_manifest(Path(f"{stem}.manifest.json"), "map", args, {"net": args.net, "masks": args.masks},
                   [out, report_path], started)
    totals = report.totals
    print(f"compute={totals['pruned_C']} total={totals['pruned_T']}")
    for name in net.needs_split:
        print(f"note: {name} is split along the output width", file=sys.stderr)
    return EXIT_OK


# -- prune-layer -------------------------------------------------------------

def cmd_prune_layer(args) -> int:
    started = _now()
    net = load_network(args.net, require_weights=True)
    weights = load_weights(net)
    layer = net.layer(args.layer)
    calib = load_tensor(args.calib).astype(np.float64)
    x_in = forward_trace(net, weights, calib, stop=layer.name)[-1][0]
    res = prune_layer(layer, weights[layer.name], x_in, ratio=args.ratio, grain=args.grain,
                      reorder=args.reorder, config=_solver(args), s_sample=args.s_sample,
                      s_regress=args.s_regress, seed=args.seed)

    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    mask_path = out / "masks" / f"{layer.name}.json"
    weight_path = out / "weights" / f"{layer.name}.npy"
    report_path = out / "report.json"
    write_json(mask_path, res.to_record(layer))
    save_tensor(res.repaired_weights, weight_path)
    layout = map_pruned(layer, res.masks, net.crossbar_rows, net.crossbar_cols, args.grain)
    write_json(report_path, {
        "layer": layer.name, "ratio": args.ratio, "r": res.r[0], "grain": args.grain,
        "reorder": args.reorder, "seed": args.seed,
        "loss_before": res.loss_before, "loss_after": res.loss_after,
        "ridge_fallback": res.ridge_fallback, "lgd_losses": res.lgd_losses,
        "compute_crossbars": layout.compute_count,
    })
    write_manifest(out / "manifest.json", "prune-layer", args, {"net": args.net, "calib": args.calib},
                   [mask_path, weight_path, report_path], started)
    print(f"{layer.name}: r={res.r[0]}/{layer.I} loss_before={res.loss_before:.6g} "
          f"loss_after={res.loss_after:.6g} compute={layout.compute_count}")
    return EXIT_OK


# -- prune-net ---------------------------------------------------------------

def _parse_ratios(items) -> dict:
    ratios = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--ratio expects NAME=VALUE, got {item!r}")
        ratios[name] = float(value)
    return ratios


def cmd_prune_net(args) -> int:
    started = _now()
    net = load_network(args.net, require_weights=True)
    weights = load_weights(net)
    calib = load_tensor(args.calib).astype(np.float64)
    thresholds = PolicyThresholds(T_d_initial=args.Td_init, T_d=args.Td, T_p=args.Tp, T_c=args.Tc,
                                  cap_mode=args.cap_mode)
    config = _solver(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    x_eval = y_eval = None
    if args.eval:
        x_eval, y_eval = _load_eval(args.eval)

    ratios = _parse_ratios(args.ratio)
    if args.decisions:
        for d in read_json(args.decisions)["decisions"]:
            ratios.setdefault(d["layer"], float(d["ratio"]))

    if args.sweep or args.sweep_only:
        if x_eval is None:
            raise CliError("--sweep needs --eval data.npz")
        tables = sweep_network(net, weights, Evaluator(net, x_eval, y_eval), calib, grain=args.grain,
                               reorder=args.reorder, config=config, seed=args.seed,
                               s_sample=args.s_sample, s_regress=args.s_regress)
        decisions = decide(tables, thresholds)
        (out / "sensitivity.csv").write_text(sensitivity_csv(tables))
        write_json(out / "sensitivity.json", sensitivity_record(tables))
        write_json(out / "decisions.json", decisions_record(decisions, thresholds))
        outputs += [out / "sensitivity.csv", out / "sensitivity.json", out / "decisions.json"]
        for d in decisions.values():
            print(f"{d.layer}: start={d.start_ratio:.2f} chosen={d.ratio:.2f} stop={d.stop_reason}")
        for name, d in decisions.items():
            ratios.setdefault(name, d.ratio)
    elif not ratios:
        raise CliError("nothing to do: give --sweep, --sweep-only, --ratio NAME=R or --decisions FILE")

    if not args.sweep_only:
        res = prune_network(net, weights, ratios, calib, grain=args.grain, reorder=args.reorder,
                            config=config, seed=args.seed, s_sample=args.s_sample,
                            s_regress=args.s_regress)
        (out / "masks").mkdir(exist_ok=True)
        (out / "weights").mkdir(exist_ok=True)
        for name, lres in res.results.items():
            path = out / "masks" / f"{name}.json"
            write_json(path, lres.to_record(net.layer(name)))
            outputs.append(path)
        paths = {}
        for name, w in res.weights.items():
            path = out / "weights" / f"{name}.npy"
            save_tensor(w, path)
            paths[name] = f"weights/{name}.npy"
            outputs.append(path)
        write_json(out / "net.json", network_to_dict(with_weights_paths(net, paths)))
        write_json(out / "overhead.json", res.report.to_record())
        (out / "overhead.csv").write_text(res.report.to_csv())
        outputs += [out / "net.json", out / "overhead.json", out / "overhead.csv"]
        if x_eval is not None:
            dense_acc = forward(net, weights, x_eval, labels=y_eval)[1]
            pruned_acc = forward(net, res.weights, x_eval, labels=y_eval)[1]
            write_json(out / "accuracy.json", {"dense": dense_acc, "pruned": pruned_acc,
                                               "drop": dense_acc - pruned_acc})
            outputs.append(out / "accuracy.json")
            print(f"accuracy dense={dense_acc:.4f} pruned={pruned_acc:.4f}")
        t = res.report.totals
        print(f"crossbars dense={t['dense_T']} pruned={t['pruned_T']} (compute {t['dense_C']} -> {t['pruned_C']})")

    write_manifest(out / "manifest.json", "prune-net", args,
                   {"net": args.net, "calib": args.calib, "eval": args.eval, "decisions": args.decisions},
                   outputs, started)
    return EXIT_OK


# -- noise -------------------------------------------------------------------

def cmd_noise(args) -> int:
    started = _now()
    net = load_network(args.net, require_weights=True)
    weights = load_weights(net)
    x_eval, y_eval = _load_eval(args.eval)
    for s in args.sigmas:
        if not math.isfinite(s) or s < 0:
            raise CliError(f"sigma must be finite and >= 0, got {s}")
    grid = noise_sweep(net, weights, x_eval, y_eval, args.sigmas, args.levels, trials=args.trials,
                       seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(grid.to_csv())
    write_manifest(Path(f"{out.with_suffix('')}.manifest.json"), "noise", args,
                   {"net": args.net, "eval": args.eval}, [out], started)
    sys.stdout.write(grid.to_csv())
    return EXIT_OK


# -- make-demo ---------------------------------------------------------------

def cmd_make_demo(args) -> int:
    started = _now()
    paths = write_demo(make_synthetic(args.seed), args.out)
    out = Path(args.out)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    write_manifest(out / "manifest.json", "make-demo", args, {}, files, started)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grain", choices=GRAINS, default="column")
    p.add_argument("--reorder", action="store_true", help="sort input FMs by importance before grouping")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=50, help="LGD iterations")
    p.add_argument("--eta", type=float, default=None, help="LGD step size (default: from the design spectrum)")
    p.add_argument("--r0", type=int, default=1, help="extra RPP candidates")
    p.add_argument("--s-sample", type=int, default=10, help="output positions sampled per image for LGD")
    p.add_argument("--s-regress", type=int, default=2, help="output positions sampled per image for repair")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xbprune", description="Crossbar-aware CNN pruning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="map a network onto crossbars and count them")
    p.add_argument("net")
    p.add_argument("--out", required=True, help="layout JSON path")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="overhead report format")
    p.add_argument("--masks", help="directory of <layer>.json mask files to map pruned layouts")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("prune-layer", help="prune one layer at a fixed ratio")
    p.add_argument("net")
    p.add_argument("--layer", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--calib", required=True, help=".npy network inputs [N, H, W, C]")
    p.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_prune_layer)

    p = sub.add_parser("prune-net", help="sweep sensitivity, choose ratios, prune the network")
    p.add_argument("net")
    p.add_argument("--calib", required=True, help=".npy network inputs [N, H, W, C]")
    p.add_argument("--eval", help=".npz with arrays x (inputs) and y (labels)")
    p.add_argument("--sweep", action="store_true", help="choose ratios with the sensitivity policy")
    p.add_argument("--sweep-only", action="store_true", help="write sensitivity and decisions, do not prune")
    p.add_argument("--ratio", action="append", metavar="NAME=R", help="fixed ratio for a layer (repeatable)")
    p.add_argument("--decisions", help="decisions.json from an earlier sweep")
    p.add_argument("--Td-init", dest="Td_init", type=float, default=0.01)
    p.add_argument("--Td", type=float, default=0.04)
    p.add_argument("--Tp", type=float, default=0.60)
    p.add_argument("--Tc", type=int, default=400)
    p.add_argument("--cap-mode", choices=CAP_MODES, default="stop_after")
    p.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_prune_net)

    p = sub.add_parser("noise", help="accuracy under weight quantization and device variation")
    p.add_argument("net")
    p.add_argument("--eval", required=True, help=".npz with arrays x and y")
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2])
    p.add_argument("--levels", type=_levels, nargs="+", default=[None], help="level counts; 'inf' for none")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="grid CSV path")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("make-demo", help="write a small seeded network and dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArithmeticError, linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
