"""Semi-folded crossbar layouts and crossbar counting.

One crossbar holds the input band of one input FM group (``K_in`` FMs x
``kernel_h`` rows x the input columns a width split touches) and computes one
output row of several output FMs per cycle, one crossbar column per output
position.  Layers whose output row does not fit are split along the width.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .conv import as_conv_weights, as_layer_input
from .model_io import LayerSpec, NetworkSpec


class MappingError(ValueError):
    pass


@dataclass
class Crossbar:
    input_group: int
    split: int
    rows_used: int
    columns: list = field(default_factory=list)  # (output FM q, output column w)

    @property
    def cols_used(self) -> int:
        return len(self.columns)


@dataclass
class CrossbarLayout:
    layer: str
    grain: str  # "dense", "crossbar" or "column"
    crossbar_rows: int
    crossbar_cols: int
    splits: list  # [(w0, w1), ...] output column ranges
    crossbars: list
    non_compute_overhead: int = 0

    @property
    def compute_count(self) -> int:
        return len(self.crossbars)

    @property
    def total_count(self) -> int:
        return self.compute_count + self.non_compute_overhead

    def columns(self) -> list:
        return [(xb.input_group, q, w) for xb in self.crossbars for q, w in xb.columns]

    def to_record(self) -> dict:
        return {
            "layer": self.layer,
            "grain": self.grain,
            "crossbar": {"rows": self.crossbar_rows, "cols": self.crossbar_cols},
            "splits": [list(s) for s in self.splits],
            "compute_count": self.compute_count,
            "non_compute_overhead": self.non_compute_overhead,
            "total_count": self.total_count,
            "crossbars": [
                {"input_group": xb.input_group, "split": xb.split, "rows_used": xb.rows_used,
                 "cols_used": xb.cols_used, "columns": [list(c) for c in xb.columns]}
                for xb in self.crossbars
            ],
        }


def _span(layer: LayerSpec, width: int) -> int:
    return (width - 1) * layer.stride + layer.kernel_w


def width_splits(layer: LayerSpec, rows: int, cols: int, k_out: int | None = None) -> list:
    """Fewest even splits of the output width so each piece fits the crossbar rows and columns."""
    k_out = layer.K_out if k_out is None else k_out
    w_out = layer.out_w
    for n in range(1, w_out + 1):
        widest = math.ceil(w_out / n)
        if k_out * widest <= cols and layer.K_in * layer.kernel_h * _span(layer, widest) <= rows:
            sizes = [len(a) for a in np.array_split(np.arange(w_out), n)]
            bounds = np.concatenate([[0], np.cumsum(sizes)])
            return [(int(bounds[k]), int(bounds[k + 1])) for k in range(n)]
    raise MappingError(
        f"{layer.name}: a single output column needs {layer.K_in * layer.kernel_h * layer.kernel_w} rows "
        f"and {k_out} columns; crossbar is {rows}x{cols}")


def _rows_used(layer: LayerSpec, split) -> int:
    return layer.K_in * layer.kernel_h * _span(layer, split[1] - split[0])


def map_dense(layer: LayerSpec, rows: int, cols: int) -> CrossbarLayout:
    """Unpruned layout: one crossbar per (input group, output group, width split)."""
    splits = width_splits(layer, rows, cols)
    xbars = []
    for s, (w0, w1) in enumerate(splits):
        for i in range(layer.I):
            for j in range(layer.J):
                cols_ = [(int(q), w) for q in layer.out_group(j) for w in range(w0, w1)]
                xbars.append(Crossbar(i, s, _rows_used(layer, (w0, w1)), cols_))
    return CrossbarLayout(layer.name, "dense", rows, cols, splits, xbars, layer.non_compute_overhead)


def map_crossbar_grain(layer: LayerSpec, masks: np.ndarray, rows: int, cols: int) -> CrossbarLayout:
    """Dense layout with every crossbar whose (i, j) mask entry is zero removed."""
    masks = np.asarray(masks)
    if masks.shape != (layer.I, layer.J):
        raise MappingError(f"{layer.name}: crossbar-grain masks must be {(layer.I, layer.J)}, got {masks.shape}")
    dense = map_dense(layer, rows, cols)
    keep = [xb for xb in dense.crossbars if masks[xb.input_group, xb.columns[0][0] // layer.K_out]]
    return CrossbarLayout(layer.name, "crossbar", rows, cols, dense.splits, keep, layer.non_compute_overhead)


def recombine(layer: LayerSpec, masks: np.ndarray, rows: int, cols: int) -> CrossbarLayout:
    """Pack surviving columns of each input group into as few crossbars as possible.

    ``masks`` is ``[I, J']``; each output group spans ``Q // J'`` FMs.  Columns
    are filled first-fit in ascending output-group order and never mix input
    groups or width splits, since those do not share input rows.
    """
    masks = np.asarray(masks)
    if masks.ndim != 2 or masks.shape[0] != layer.I or layer.Q % masks.shape[1]:
        raise MappingError(f"{layer.name}: masks of shape {masks.shape} do not fit I={layer.I}, Q={layer.Q}")
    k_out = layer.Q // masks.shape[1]
    splits = width_splits(layer, rows, cols)
    xbars = []
    for s, (w0, w1) in enumerate(splits):
        used = _rows_used(layer, (w0, w1))
        for i in range(layer.I):
            pending = [(j * k_out + k, w) for j in np.flatnonzero(masks[i])
                       for k in range(k_out) for w in range(w0, w1)]
            for start in range(0, len(pending), cols):
                xbars.append(Crossbar(i, s, used, [(int(q), int(w)) for q, w in pending[start:start + cols]]))
    return CrossbarLayout(layer.name, "column", rows, cols, splits, xbars, layer.non_compute_overhead)


def map_pruned(layer: LayerSpec, masks: np.ndarray, rows: int, cols: int, grain: str) -> CrossbarLayout:
    if grain == "crossbar":
        return map_crossbar_grain(layer, masks, rows, cols)
    if grain == "column":
        return recombine(layer, masks, rows, cols)
    raise MappingError(f"unknown grain {grain!r}")


def dense_reference(layer: LayerSpec, rows: int, cols: int, grain: str = "column") -> CrossbarLayout:
    """Unpruned baseline matching a grain: K_out-wide crossbars for crossbar grain, packed columns otherwise."""
    if grain == "crossbar":
        return map_dense(layer, rows, cols)
    layout = recombine(layer, np.ones((layer.I, layer.J), dtype=int), rows, cols)
    layout.grain = "dense"
    return layout


def simulate_layout(layer: LayerSpec, weights: np.ndarray, layout: CrossbarLayout, inputs: np.ndarray,
                    permutation=None) -> np.ndarray:
    """Evaluate a layer crossbar by crossbar as vector-matrix products.

    Each crossbar is programmed from ``weights`` for its own columns only;
    output positions no crossbar computes stay zero.
    """
    x = as_layer_input(layer, inputs)
    w = as_conv_weights(layer, weights)
    perm = np.arange(layer.P) if permutation is None else np.asarray(permutation)
    pad = layer.padding
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    n, ho, wo = x.shape[0], layer.out_h, layer.out_w
    kh, kw, st = layer.kernel_h, layer.kernel_w, layer.stride
    out = np.zeros((n, ho, wo, layer.Q))
    h_idx = (np.arange(ho) * st)[:, None] + np.arange(kh)[None, :]  # [Ho, kh]
    for xb in layout.crossbars:
        w0, w1 = layout.splits[xb.split]
        span = _span(layer, w1 - w0)
        x0 = w0 * st
        chans = perm[xb.input_group * layer.K_in:(xb.input_group + 1) * layer.K_in]
        # crossbar rows ordered (input FM, kernel row, input column)
        band = xp[:, h_idx][:, :, :, x0:x0 + span][..., chans]  # [N, Ho, kh, span, K_in]
        band = band.transpose(0, 1, 4, 2, 3).reshape(n, ho, -1)
        if band.shape[-1] != xb.rows_used:
            raise MappingError(f"{layer.name}: crossbar band has {band.shape[-1]} rows, layout says {xb.rows_used}")
        M = np.zeros((layer.K_in, kh, span, len(xb.columns)))
        for c, (q, wc) in enumerate(xb.columns):
            off = (wc - w0) * st
            M[:, :, off:off + kw, c] = w[:, :, chans, q].transpose(2, 0, 1)
        res = band @ M.reshape(-1, len(xb.columns))  # [N, Ho, cols]
        qs = np.array([q for q, _ in xb.columns], dtype=int)
        ws = np.array([wc for _, wc in xb.columns], dtype=int)
        np.add.at(out, (slice(None), slice(None), ws, qs), res)
    return out


@dataclass
class OverheadReport:
    rows: list  # dicts: layer, dense_T, dense_C, pruned_T, pruned_C

    @property
    def totals(self) -> dict:
        keys = ("dense_T", "dense_C", "pruned_T", "pruned_C")
        return {k: sum(r[k] for r in self.rows) for k in keys}

    def to_record(self) -> dict:
        return {"layers": self.rows, "totals": self.totals}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["layer", "dense_T", "dense_C", "pruned_T", "pruned_C"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        writer.writerow({"layer": "TOTAL", **self.totals})
        return buf.getvalue()


def count_overhead(net: NetworkSpec, layouts: dict | None = None) -> OverheadReport:
    """Per-layer dense vs pruned crossbar counts; layers without a pruned layout count as unpruned."""
    layouts = layouts or {}
    rows = []
    for layer in net.layers:
        pruned = layouts.get(layer.name)
        grain = pruned.grain if pruned is not None and pruned.grain != "dense" else "column"
        dense = dense_reference(layer, net.crossbar_rows, net.crossbar_cols, grain)
        if pruned is None:
            pruned = dense
        rows.append({
            "layer": layer.name,
            "dense_T": dense.total_count, "dense_C": dense.compute_count,
            "pruned_T": pruned.total_count, "pruned_C": pruned.compute_count,
        })
    return OverheadReport(rows)
