"""Single-layer crossbar-aware pruning with least-squares weight repair."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .conv import (as_conv_weights, as_layer_input, build_bundle, connection_mask,
                   from_conv_weights, patches, sample_design, sample_positions, PartialSumBundle)
from .lgd import SolverConfig, lgd
from .model_io import LayerSpec
from .seeding import rng_for

GRAINS = ("crossbar", "column")


class GrainError(ValueError):
    pass


def check_grain(layer: LayerSpec, grain: str) -> None:
    if grain not in GRAINS:
        raise GrainError(f"grain must be one of {GRAINS}, got {grain!r}")
    if grain == "column" and layer.kind == "Conv" and layer.K_out != 1:
        raise GrainError(f"{layer.name}: column grain needs K_out=1 for Conv layers (K_out={layer.K_out})")


def ratio_to_r(ratio: float, I: int) -> int:
    """Surviving input groups per output group: ``max(1, round((1 - ratio) * I))``, halves up."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {ratio}")
    keep = round((1.0 - ratio) * I, 9)
    return max(1, min(I, math.floor(keep + 0.5)))


def compute_importance(bundle: PartialSumBundle) -> np.ndarray:
    """Signed importance of each input FM: its pair results summed over outputs, positions, samples."""
    return bundle.Y_S.sum(axis=(0, 1, 3))


def reorder_inputs(importance: np.ndarray) -> np.ndarray:
    """Permutation listing FMs by descending importance (stable on ties)."""
    importance = np.asarray(importance, dtype=np.float64)
    return np.lexsort((np.arange(importance.size), -importance))


def contribution_rates(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks)
    return masks.sum(axis=1) / masks.shape[1]


@dataclass
class LayerPruneResult:
    layer: str
    masks: np.ndarray  # [I, J] in {0, 1}; rows follow the permuted input order
    permutation: np.ndarray
    repaired_weights: np.ndarray  # layer weight shape, original FM order, zeros where pruned
    grain: str
    r: list
    loss_before: float
    loss_after: float
    ridge_fallback: bool = False
    lgd_losses: list = field(default_factory=list)

    def connection_mask(self, layer: LayerSpec) -> np.ndarray:
        return connection_mask(layer, self.masks, self.permutation)

    def to_record(self, layer: LayerSpec) -> dict:
        return {
            "layer": self.layer,
            "grain": self.grain,
            "K_in": layer.K_in,
            "K_out": layer.K_out,
            "I": int(self.masks.shape[0]),
            "J": int(self.masks.shape[1]),
            "r": [int(v) for v in self.r],
            "permutation": [int(v) for v in self.permutation],
            "masks": self.masks.astype(int).tolist(),
            "loss_before": float(self.loss_before),
            "loss_after": float(self.loss_after),
            "ridge_fallback": bool(self.ridge_fallback),
        }


def masks_from_record(rec: dict) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(rec["masks"], dtype=int), np.asarray(rec["permutation"], dtype=int)


def solve_repair(A: np.ndarray, B: np.ndarray, W0: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Least-squares weights ``(A^T A)^-1 A^T B``.

    If the normal equations are singular or ill-conditioned, fall back to a
    ridge of ``1e-8 * trace(A^T A)`` pulling toward ``W0`` (zero by default),
    so directions the sample cannot see keep their previous values.
    """
    G = A.T @ A
    AtB = A.T @ B
    if A.shape[0] >= A.shape[1]:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            try:
                return linalg.solve(G, AtB, assume_a="pos"), False
            except (linalg.LinAlgError, linalg.LinAlgWarning):
                pass
    ridge = 1e-8 * float(np.trace(G)) or 1e-8
    rhs = AtB if W0 is None else AtB + ridge * W0
    return linalg.solve(G + ridge * np.eye(G.shape[0]), rhs, assume_a="pos"), True


def repair_weights(layer: LayerSpec, weights: np.ndarray, inputs: np.ndarray, masks: np.ndarray,
                   permutation=None, target: np.ndarray | None = None, s_regress: int = 2,
                   rng=None):
    """Refit the surviving weights of every output group against the target outputs.

    ``target`` is the pre-activation output ``[N, Ho, Wo, Q]`` the pruned layer
    should reproduce (defaults to the dense layer's own output on ``inputs``).
    Returns ``(weights, loss_before, loss_after, ridge_used)`` with losses
    measured on the regression sample.
    """
    x = as_layer_input(layer, inputs)
    w = as_conv_weights(layer, weights)
    perm = np.arange(layer.P) if permutation is None else np.asarray(permutation)
    masks = np.asarray(masks)
    k_out = layer.Q // masks.shape[1]
    if target is None:
        target = np.tensordot(patches(x, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding),
                              w, axes=([3, 4, 5], [0, 1, 2]))
    target = np.asarray(target, dtype=np.float64).reshape(x.shape[0], -1, layer.Q)

    win = patches(x[..., perm], layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
    n = win.shape[0]
    win = win.reshape(n, -1, layer.kernel_h, layer.kernel_w, layer.P)
    pos = sample_positions(n, win.shape[1], min(s_regress, win.shape[1]), rng)
    rows = np.arange(n)[:, None]
    lx = win[rows, pos]  # [N, S, kh, kw, P] in permuted FM order
    ly = target[rows, pos]  # [N, S, Q]
    lx = lx.reshape(-1, layer.kernel_h, layer.kernel_w, layer.P)
    ly = ly.reshape(-1, layer.Q)

    w_perm = w[:, :, perm, :]
    out = np.zeros_like(w_perm)
    before = after = 0.0
    ridge_used = False
    for j in range(masks.shape[1]):
        keep = np.flatnonzero(np.repeat(masks[:, j], layer.K_in))
        qs = np.arange(j * k_out, (j + 1) * k_out)
        A = lx[:, :, :, keep].reshape(lx.shape[0], -1)
        B = ly[:, qs]
        W_old = w_perm[:, :, keep][:, :, :, qs].reshape(A.shape[1], len(qs))
        W_new, ridged = solve_repair(A, B, W_old)
        ridge_used |= ridged
        before += float(np.sum((B - A @ W_old) ** 2))
        after += float(np.sum((B - A @ W_new) ** 2))
        block = out[:, :, keep]
        block[:, :, :, qs] = W_new.reshape(layer.kernel_h, layer.kernel_w, len(keep), len(qs))
        out[:, :, keep] = block
    repaired = np.empty_like(out)
    repaired[:, :, perm] = out
    return from_conv_weights(layer, repaired), before, after, ridge_used


def _workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    try:
        return max(1, int(os.environ.get("XBAR_PRUNE_THREADS", "1")))
    except ValueError:
        return 1


def prune_layer(layer: LayerSpec, weights: np.ndarray, inputs: np.ndarray, ratio: float | None = None,
                r: int | None = None, grain: str = "column", reorder: bool = False,
                config: SolverConfig | None = None, target: np.ndarray | None = None,
                s_sample: int = 10, s_regress: int = 2, seed: int = 0,
                bundle: PartialSumBundle | None = None, workers: int | None = None) -> LayerPruneResult:
    """Prune one layer: optional input reorder, one LGD solve per output group, weight repair.

    Give either ``ratio`` (fraction of input groups removed) or ``r`` (groups
    kept per output group).  Random streams are derived from ``seed`` and the
    layer name, so results do not depend on ``workers``.
    """
    check_grain(layer, grain)
    config = config or SolverConfig()
    if (ratio is None) == (r is None):
        raise ValueError("give exactly one of ratio or r")
    if r is None:
        r = ratio_to_r(ratio, layer.I)
    if not 1 <= r <= layer.I:
        raise ValueError(f"{layer.name}: r={r} outside [1, {layer.I}]")

    if bundle is None:
        bundle = build_bundle(layer, weights, inputs)
    perm = np.arange(layer.P)
    if reorder:
        perm = reorder_inputs(compute_importance(bundle))
        bundle = bundle.permuted(perm)
    s_sample = min(s_sample, bundle.S_out)

    def solve(j):
        if r == layer.I:
            return np.ones(layer.I), 0.0
        design = sample_design(bundle, j, s_sample, rng_for(seed, layer.name, j, "sample"))
        res = lgd(design.X, design.Y, r, config, j=j, rng=rng_for(seed, layer.name, j, "lgd"))
        return res.beta_L0, res.loss

    n_workers = _workers(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            solved = list(pool.map(solve, range(layer.J)))
    else:
        solved = [solve(j) for j in range(layer.J)]
    masks = np.stack([m for m, _ in solved], axis=1).astype(int)

    repaired, before, after, ridged = repair_weights(
        layer, weights, inputs, masks, perm, target=target, s_regress=s_regress,
        rng=rng_for(seed, layer.name, 0, "regress"))
    return LayerPruneResult(layer=layer.name, masks=masks, permutation=perm, repaired_weights=repaired,
                            grain=grain, r=[r] * layer.J, loss_before=before, loss_after=after,
                            ridge_fallback=ridged, lgd_losses=[loss for _, loss in solved])


def mask_only_weights(layer: LayerSpec, weights: np.ndarray, masks: np.ndarray, permutation=None) -> np.ndarray:
    """Original weights with pruned connections zeroed (no repair)."""
    w = as_conv_weights(layer, weights)
    return from_conv_weights(layer, w * connection_mask(layer, masks, permutation)[None, None])
