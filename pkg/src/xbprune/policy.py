"""Network-level pruning policy.

Each prunable layer is swept alone over a grid of pruning ratios.  A start
ratio is picked from its accuracy-drop curve, then the ratio is walked upward
until a stop condition fires: accuracy drop above ``T_d``, ratio above
``T_p``, or fewer than ``T_c`` compute crossbars left.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .conv import forward, forward_trace, layer_post, layer_preact
from .lgd import SolverConfig
from .mapper import OverheadReport, count_overhead, dense_reference, map_pruned
from .model_io import NetworkSpec
from .pruner import check_grain, prune_layer

RATIO_GRID = tuple(round(0.20 + 0.05 * k, 2) for k in range(11))
STOP_REASONS = ("AccuracyDrop", "RatioCap", "CrossbarFloor", "SweepEnd")
CAP_MODES = ("stop_after", "clamp")


@dataclass
class SensitivityRow:
    ratio: float
    accuracy: float
    drop: float
    compute_crossbars: int


@dataclass
class PolicyThresholds:
    T_d_initial: float = 0.01
    T_d: float = 0.04
    T_p: float = 0.60
    T_c: int = 400
    cap_mode: str = "stop_after"

    def __post_init__(self):
        if self.T_d_initial <= 0 or self.T_d <= 0 or self.T_p <= 0 or self.T_c < 0:
            raise ValueError("thresholds must be positive (T_c may be 0 to disable it)")
        if self.T_d < self.T_d_initial:
            raise ValueError(f"T_d={self.T_d} must be >= T_d_initial={self.T_d_initial}")
        if self.cap_mode not in CAP_MODES:
            raise ValueError(f"cap_mode must be one of {CAP_MODES}, got {self.cap_mode!r}")


@dataclass
class PolicyDecision:
    layer: str
    start_ratio: float
    ratio: float
    stop_reason: str


class Evaluator:
    """Classification accuracy of a network on a fixed labelled set."""

    def __init__(self, net: NetworkSpec, inputs: np.ndarray, labels: np.ndarray):
        self.net = net
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels)

    def __call__(self, weights: dict) -> float:
        return forward(self.net, weights, self.inputs, labels=self.labels)[1]


def sweep_layer(net: NetworkSpec, weights: dict, layer_name: str, evaluator, calib_inputs: np.ndarray,
                ratios=RATIO_GRID, grain: str = "column", reorder: bool = False,
                config: SolverConfig | None = None, seed: int = 0, s_sample: int = 10,
                s_regress: int = 2, baseline: float | None = None) -> list:
    """Prune only ``layer_name`` at each ratio (all other layers dense) and record the accuracy drop.

    A ratio-0 baseline row with zero drop comes first.
    """
    layer = net.layer(layer_name)
    check_grain(layer, grain)
    if baseline is None:
        baseline = evaluator(weights)
    x_in = forward_trace(net, weights, calib_inputs, stop=layer_name)[-1][0]
    rows_, cols_ = net.crossbar_rows, net.crossbar_cols
    dense = dense_reference(layer, rows_, cols_, grain)
    table = [SensitivityRow(0.0, baseline, 0.0, dense.compute_count)]
    for ratio in sorted(ratios):
        res = prune_layer(layer, weights[layer_name], x_in, ratio=ratio, grain=grain, reorder=reorder,
                          config=config, s_sample=s_sample, s_regress=s_regress, seed=seed)
        trial = dict(weights)
        trial[layer_name] = res.repaired_weights
        acc = evaluator(trial)
        count = map_pruned(layer, res.masks, rows_, cols_, grain).compute_count
        table.append(SensitivityRow(float(ratio), acc, baseline - acc, count))
    return table


def sweep_network(net: NetworkSpec, weights: dict, evaluator, calib_inputs: np.ndarray, layers=None,
                  **kwargs) -> dict:
    layers = net.prunable() if layers is None else list(layers)
    baseline = evaluator(weights)
    return {name: sweep_layer(net, weights, name, evaluator, calib_inputs, baseline=baseline, **kwargs)
            for name in layers}


def initial_ratio(rows: list, T_d_initial: float) -> float:
    """Ratio whose drop is the smallest one exceeding ``T_d_initial``; the largest ratio if none does."""
    if not rows:
        raise ValueError("empty sensitivity table")
    over = [row for row in rows if row.drop > T_d_initial]
    if not over:
        return max(row.ratio for row in rows)
    return min(over, key=lambda row: (row.drop, row.ratio)).ratio


def finalize_ratio(rows: list, start_ratio: float, thresholds: PolicyThresholds, layer: str = "") -> PolicyDecision:
    """Walk ratios upward from ``start_ratio`` until a stop condition fires.

    At one ratio the conditions are checked in the order AccuracyDrop,
    RatioCap, CrossbarFloor.  AccuracyDrop always falls back to the previous
    ratio.  The two resource conditions keep the ratio at which they fire in
    ``stop_after`` mode and fall back to the previous ratio in ``clamp`` mode.
    """
    ordered = sorted(rows, key=lambda row: row.ratio)
    below = [row for row in ordered if row.ratio < start_ratio]
    walk = [row for row in ordered if row.ratio >= start_ratio]
    if not walk:
        raise ValueError(f"no swept ratio at or above start ratio {start_ratio}")
    prev = below[-1] if below else None

    def back(row):
        return prev.ratio if prev is not None else row.ratio

    for row in walk:
        if row.drop > thresholds.T_d:
            return PolicyDecision(layer, start_ratio, back(row), "AccuracyDrop")
        if row.ratio > thresholds.T_p:
            chosen = row.ratio if thresholds.cap_mode == "stop_after" else back(row)
            return PolicyDecision(layer, start_ratio, chosen, "RatioCap")
        if row.compute_crossbars < thresholds.T_c:
            chosen = row.ratio if thresholds.cap_mode == "stop_after" else back(row)
            return PolicyDecision(layer, start_ratio, chosen, "CrossbarFloor")
        prev = row
    return PolicyDecision(layer, start_ratio, walk[-1].ratio, "SweepEnd")


def decide(tables: dict, thresholds: PolicyThresholds) -> dict:
    out = {}
    for name, rows in tables.items():
        start = initial_ratio(rows, thresholds.T_d_initial)
        out[name] = finalize_ratio(rows, start, thresholds, layer=name)
    return out


@dataclass
class NetworkPruneResult:
    weights: dict
    results: dict = field(default_factory=dict)  # layer -> LayerPruneResult
    layouts: dict = field(default_factory=dict)  # layer -> CrossbarLayout (pruned layers only)
    report: OverheadReport | None = None


def prune_network(net: NetworkSpec, weights: dict, ratios: dict, calib_inputs: np.ndarray,
                  grain: str = "column", reorder: bool = False, config: SolverConfig | None = None,
                  seed: int = 0, s_sample: int = 10, s_regress: int = 2) -> NetworkPruneResult:
    """Prune layers in order, each on activations produced by the already-pruned layers before it.

    Repair targets are the dense network's pre-activations, so every layer is
    refit toward the original function.  Layers with ratio 0 are left alone.
    """
    allowed = set(net.prunable())
    for name in ratios:
        if name not in net.names:
            raise ValueError(f"unknown layer '{name}' in pruning ratios")
        if name not in allowed:
            raise ValueError(f"layer '{name}' is the first Conv or last FC layer and is never pruned")
    for name, ratio in ratios.items():
        if ratio > 0:
            check_grain(net.layer(name), grain)

    dense_trace = forward_trace(net, weights, calib_inputs)
    new_weights = dict(weights)
    out = NetworkPruneResult(weights=new_weights)
    x = np.asarray(calib_inputs, dtype=np.float64)
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        ratio = ratios.get(layer.name, 0.0)
        if ratio > 0:
            res = prune_layer(layer, weights[layer.name], x, ratio=ratio, grain=grain, reorder=reorder,
                              config=config, target=dense_trace[k][1], s_sample=s_sample,
                              s_regress=s_regress, seed=seed)
            new_weights[layer.name] = res.repaired_weights
            out.results[layer.name] = res
            out.layouts[layer.name] = map_pruned(layer, res.masks, net.crossbar_rows, net.crossbar_cols, grain)
        x = layer_post(layer, layer_preact(layer, new_weights[layer.name], x), k == last)
    out.report = count_overhead(net, out.layouts)
    return out


def sensitivity_csv(tables: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "ratio", "accuracy", "drop", "compute_crossbars"])
    for name, rows in tables.items():
        for row in rows:
            writer.writerow([name, f"{row.ratio:.2f}", repr(row.accuracy), repr(row.drop), row.compute_crossbars])
    return buf.getvalue()


def sensitivity_record(tables: dict) -> dict:
    return {name: [asdict(row) for row in rows] for name, rows in tables.items()}


def decisions_record(decisions: dict, thresholds: PolicyThresholds) -> dict:
    return {
        "thresholds": asdict(thresholds),
        "decisions": [asdict(d) for d in decisions.values()],
    }


def layouts_record(layouts: dict) -> dict:
    return {name: layout.to_record() for name, layout in layouts.items()}

