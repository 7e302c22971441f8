"""Small seeded teacher network with self-consistent labels.

Labels are the dense network's own predictions, so the unpruned model scores
100% and any accuracy loss comes from pruning or device noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conv import forward, forward_trace
from .model_io import NetworkSpec, network_from_dict, network_to_dict, save_tensor, with_weights_paths, write_json

DEMO_NET = {
    "crossbar": {"rows": 64, "cols": 16},
    "input": [8, 8],
    "layers": [
        {"name": "conv1", "kind": "Conv", "P": 4, "Q": 16, "kernel": [3, 3], "padding": 1,
         "K_in": 2, "K_out": 1, "pool": 2, "non_compute_overhead": 1},
        {"name": "conv2", "kind": "Conv", "P": 16, "Q": 16, "kernel": [3, 3], "padding": 1,
         "K_in": 2, "K_out": 1, "non_compute_overhead": 1},
        {"name": "conv3", "kind": "Conv", "P": 16, "Q": 16, "kernel": [3, 3], "padding": 1,
         "K_in": 2, "K_out": 1, "pool": 2, "non_compute_overhead": 1},
        {"name": "fc1", "kind": "FC", "P": 64, "Q": 16, "K_in": 8, "K_out": 8, "non_compute_overhead": 1},
        {"name": "fc2", "kind": "FC", "P": 16, "Q": 4, "K_in": 4, "K_out": 1},
    ],
}


@dataclass
class Demo:
    net: NetworkSpec
    weights: dict
    inputs: np.ndarray  # evaluation images, NHWC
    labels: np.ndarray
    calib: np.ndarray  # separate calibration images


def make_synthetic(seed: int = 0, per_class: int = 64, n_calib: int = 256, pool: int = 4096) -> Demo:
    """Random He-initialised network plus ``per_class`` confidently classified samples per class.

    Samples are drawn from a pool of ``pool`` uniform images and the ones with
    the widest top-two logit gap are kept, which mimics a trained model that is
    confident on its test set.
    """
    rng = np.random.default_rng(seed)
    net = network_from_dict(DEMO_NET)
    weights = {}
    for layer in net.layers:
        fan_in = layer.kernel_h * layer.kernel_w * layer.P
        weights[layer.name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=layer.weight_shape)
    h, w = net.input_hw
    P0 = net.layers[0].P
    x = rng.random((pool, h, w, P0))
    calib = rng.random((n_calib, h, w, P0))

    # Remove the common-mode direction from the classifier so every class gets samples.
    last = net.layers[-1]
    feats = forward_trace(net, weights, x, stop=last.name)[-1][0].reshape(pool, -1)
    m = feats.mean(axis=0)
    W = weights[last.name]
    weights[last.name] = W - np.outer(m, m @ W) / float(m @ m)

    out = forward(net, weights, x)
    top2 = np.sort(out, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    pred = np.argmax(out, axis=1)
    keep = []
    for c in range(last.Q):
        members = np.flatnonzero(pred == c)
        keep.append(members[np.argsort(-margin[members], kind="stable")[:per_class]])
    idx = np.sort(np.concatenate(keep))
    return Demo(net=net, weights=weights, inputs=x[idx], labels=pred[idx], calib=calib)


def write_demo(demo: Demo, out_dir: str | Path) -> dict:
    """Write ``net.json``, ``weights/<layer>.npy``, ``calib.npy`` and ``data.npz``; return the paths."""
    out = Path(out_dir)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, w in demo.weights.items():
        rel = f"weights/{name}.npy"
        save_tensor(w, out / rel)
        paths[name] = rel
    net = with_weights_paths(demo.net, paths, base_dir=str(out))
    write_json(out / "net.json", network_to_dict(net))
    save_tensor(demo.calib, out / "calib.npy")
    np.savez(out / "data.npz", x=demo.inputs, y=demo.labels)
    return {"net": out / "net.json", "calib": out / "calib.npy", "data": out / "data.npz"}

