"""Convolutions, grouped partial sums and a small forward engine.

Activations are NHWC ``[N, H, W, C]``; Conv weights are ``[kh, kw, P, Q]``.
FC layers are treated as 1x1 convolutions over a 1x1 feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model_io import LayerSpec, NetworkSpec


class GeometryError(ValueError):
    pass


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def patches(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Sliding windows of an NHWC tensor as ``[N, Ho, Wo, kh, kw, C]`` (a view when unpadded)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = _out_size(x.shape[1], kh, stride, 0)
    wo = _out_size(x.shape[2], kw, stride, 0)
    if ho < 1 or wo < 1:
        raise GeometryError(f"kernel {kh}x{kw} does not fit input {x.shape[1]}x{x.shape[2]}")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # [N, H', W', C, kh, kw]
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Bias-free cross-correlation, ``[N,H,W,P] x [kh,kw,P,Q] -> [N,Ho,Wo,Q]``."""
    kh, kw, p, _ = w.shape
    if x.shape[-1] != p:
        raise GeometryError(f"input has {x.shape[-1]} channels, weights expect {p}")
    win = patches(x, kh, kw, stride, padding)
    return np.tensordot(win, w, axes=([3, 4, 5], [0, 1, 2]))


def conv_pair(x_p: np.ndarray, w_pq: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single input FM against a single kernel: ``[N,H,W] x [kh,kw] -> [N, S_out]``."""
    x_p = np.asarray(x_p, dtype=np.float64)
    if x_p.ndim == 2:
        x_p = x_p[None]
    kh, kw = w_pq.shape
    ho = _out_size(x_p.shape[1], kh, stride, padding)
    wo = _out_size(x_p.shape[2], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"output size {ho}x{wo} is not positive")
    y = conv2d(x_p[..., None], np.asarray(w_pq, dtype=np.float64)[:, :, None, None], stride, padding)
    return y.reshape(x_p.shape[0], ho * wo)


def as_layer_input(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Bring activations into the NHWC form the layer consumes (FC inputs become [N,1,1,P])."""
    x = np.asarray(x, dtype=np.float64)
    if layer.kind == "FC":
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != layer.P:
            raise GeometryError(f"{layer.name}: FC input has {x.shape[1]} features, expected {layer.P}")
        return x.reshape(x.shape[0], 1, 1, layer.P)
    if x.ndim != 4 or x.shape[1:] != (layer.in_h, layer.in_w, layer.P):
        raise GeometryError(
            f"{layer.name}: input shape {x.shape[1:]} does not match "
            f"({layer.in_h}, {layer.in_w}, {layer.P})")
    return x


def as_conv_weights(layer: LayerSpec, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if layer.kind == "FC":
        if w.shape == (layer.P, layer.Q):
            w = w[None, None]
    if w.shape != (layer.kernel_h, layer.kernel_w, layer.P, layer.Q):
        raise GeometryError(f"{layer.name}: weights shape {w.shape} does not match the layer")
    return w


def from_conv_weights(layer: LayerSpec, w: np.ndarray) -> np.ndarray:
    return w.reshape(layer.P, layer.Q) if layer.kind == "FC" else w


@dataclass
class PartialSumBundle:
    """Per-pair results ``Y_S`` and their input-group (``Y_E``) and complete (``Y_O``) sums."""

    Y_S: np.ndarray  # [N, S_out, P, Q]
    Y_E: np.ndarray  # [N, S_out, I, Q]
    Y_O: np.ndarray  # [N, S_out, Q]
    K_in: int
    K_out: int

    @property
    def N(self) -> int:
        return self.Y_S.shape[0]

    @property
    def S_out(self) -> int:
        return self.Y_S.shape[1]

    @property
    def I(self) -> int:
        return self.Y_E.shape[2]

    @property
    def J(self) -> int:
        return self.Y_O.shape[2] // self.K_out

    def Y_C1(self, j: int) -> np.ndarray:
        """Partial sums feeding output group j, ``[N, S_out, I, K_out]``."""
        return self.Y_E[:, :, :, j * self.K_out:(j + 1) * self.K_out]

    def Y_C2(self, j: int) -> np.ndarray:
        return self.Y_O[:, :, j * self.K_out:(j + 1) * self.K_out]

    def permuted(self, perm: np.ndarray) -> "PartialSumBundle":
        """Regroup after reordering input FMs so that position k holds FM ``perm[k]``."""
        return bundle_from_pairs(self.Y_S[:, :, perm, :], self.K_in, self.K_out)


def bundle_from_pairs(Y_S: np.ndarray, K_in: int, K_out: int) -> PartialSumBundle:
    n, s, p, q = Y_S.shape
    Y_E = Y_S.reshape(n, s, p // K_in, K_in, q).sum(axis=3)
    Y_O = Y_E.sum(axis=2)
    return PartialSumBundle(Y_S=Y_S, Y_E=Y_E, Y_O=Y_O, K_in=K_in, K_out=K_out)


def build_bundle(layer: LayerSpec, weights: np.ndarray, inputs: np.ndarray) -> PartialSumBundle:
    x = as_layer_input(layer, inputs)
    w = as_conv_weights(layer, weights)
    win = patches(x, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
    n, ho, wo = win.shape[:3]
    win = win.reshape(n, ho * wo, layer.kernel_h * layer.kernel_w, layer.P)
    Y_S = np.einsum("nskp,kpq->nspq", win, w.reshape(-1, layer.P, layer.Q), optimize=True)
    return bundle_from_pairs(Y_S, layer.K_in, layer.K_out)


class SamplingError(ValueError):
    pass


@dataclass
class SampledDesign:
    X: np.ndarray  # [N * S_sample * K_out, I]
    Y: np.ndarray  # [N * S_sample * K_out]
    S_sample: int
    positions: np.ndarray  # [N, S_sample] spatial indices used for each sample


def sample_positions(N: int, S_out: int, S_sample: int, rng) -> np.ndarray:
    """Uniform spatial positions without replacement, drawn independently for each sample."""
    if not 1 <= S_sample <= S_out:
        raise SamplingError(f"S_sample={S_sample} must be within [1, S_out={S_out}]")
    rng = np.random.default_rng(rng)
    if S_sample == S_out:
        return np.tile(np.arange(S_out), (N, 1))
    return np.stack([rng.choice(S_out, size=S_sample, replace=False) for _ in range(N)])


def sample_design(bundle: PartialSumBundle, j: int, S_sample: int, rng_seed=None,
                  positions: np.ndarray | None = None) -> SampledDesign:
    if positions is None:
        positions = sample_positions(bundle.N, bundle.S_out, S_sample, rng_seed)
    rows = np.arange(bundle.N)[:, None]
    c1 = bundle.Y_C1(j)[rows, positions]  # [N, S, I, K_out]
    c2 = bundle.Y_C2(j)[rows, positions]  # [N, S, K_out]
    X = c1.transpose(0, 1, 3, 2).reshape(-1, bundle.I)
    Y = c2.reshape(-1)
    return SampledDesign(X=X, Y=Y, S_sample=positions.shape[1], positions=positions)


# -- forward -----------------------------------------------------------------

def connection_mask(layer: LayerSpec, masks: np.ndarray, permutation=None) -> np.ndarray:
    """Expand group masks ``[I, J']`` into a per-(input FM, output FM) mask ``[P, Q]``.

    ``J'`` may be finer than the layer's own J (column grain); the output group
    size is inferred as ``Q // J'``.
    """
    masks = np.asarray(masks)
    if masks.ndim != 2 or masks.shape[0] != layer.I or layer.Q % masks.shape[1]:
        raise GeometryError(f"{layer.name}: mask shape {masks.shape} does not fit I={layer.I}, Q={layer.Q}")
    k_out = layer.Q // masks.shape[1]
    perm = np.arange(layer.P) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(layer.P)):
        raise GeometryError(f"{layer.name}: permutation is not a bijection on [0, {layer.P})")
    permuted = np.repeat(np.repeat(masks, layer.K_in, axis=0), k_out, axis=1)
    out = np.empty_like(permuted)
    out[perm] = permuted
    return out


def relu(x):
    return np.maximum(x, 0.0)


def max_pool(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    n, h, w, c = x.shape
    h2, w2 = h // k, w // k
    x = x[:, :h2 * k, :w2 * k].reshape(n, h2, k, w2, k, c)
    return x.max(axis=(2, 4))


def layer_preact(layer: LayerSpec, w: np.ndarray, x: np.ndarray, conn: np.ndarray | None = None) -> np.ndarray:
    w = as_conv_weights(layer, w)
    if conn is not None:
        w = w * conn[None, None]
    return conv2d(as_layer_input(layer, x), w, layer.stride, layer.padding)


def layer_post(layer: LayerSpec, y: np.ndarray, last: bool) -> np.ndarray:
    if last:
        return y.reshape(y.shape[0], -1) if layer.kind == "FC" else y
    y = relu(y)
    if layer.kind == "FC":
        return y.reshape(y.shape[0], -1)
    return max_pool(y, layer.pool)


def forward_trace(net: NetworkSpec, weights: dict, inputs: np.ndarray, conn_masks: dict | None = None,
                  stop: str | None = None):
    """Run the network, returning ``[(layer_input, preactivation), ...]`` per layer.

    Stops after computing the input of layer ``stop`` (its pre-activation is None).
    """
    conn_masks = conn_masks or {}
    x = np.asarray(inputs, dtype=np.float64)
    trace = []
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        if layer.name == stop:
            trace.append((x, None))
            return trace
        y = layer_preact(layer, weights[layer.name], x, conn_masks.get(layer.name))
        trace.append((x, y))
        x = layer_post(layer, y, k == last)
    return trace


def forward(net: NetworkSpec, weights: dict, inputs: np.ndarray, conn_masks: dict | None = None,
            labels: np.ndarray | None = None):
    """Network outputs, plus accuracy when labels are given."""
    trace = forward_trace(net, weights, inputs, conn_masks)
    y = trace[-1][1]
    out = y.reshape(y.shape[0], -1)
    if labels is None:
        return out
    return out, accuracy(out, labels)


def accuracy(outputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(outputs, axis=1) == np.asarray(labels)))
