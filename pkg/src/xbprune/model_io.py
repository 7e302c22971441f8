"""Network descriptions, tensor files and JSON records.

Network JSON layout::

    {
      "crossbar": {"rows": 12, "cols": 4},
      "input": [2, 3],                       # H, W of the first layer input
      "layers": [
        {"name": "conv1", "kind": "Conv", "P": 4, "Q": 4, "kernel": [2, 2],
         "stride": 1, "padding": 0, "K_in": 2, "K_out": 2,
         "weights": "conv1.npy", "non_compute_overhead": 0, "pool": 1}
      ]
    }

Weight paths are resolved relative to the JSON file.  Weights are stored as
``[kernel_h, kernel_w, P, Q]`` for Conv and ``[P, Q]`` for FC.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from numpy.lib import format as npy_format

KINDS = ("Conv", "FC")
SUPPORTED_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


class SpecError(ValueError):
    """Invalid network description. Carries the offending layer and field."""

    def __init__(self, message: str, layer: str | None = None, field: str | None = None):
        self.layer = layer
        self.field = field
        where = ""
        if layer is not None:
            where = f"layer '{layer}'"
            if field is not None:
                where += f", field '{field}'"
            where += ": "
        super().__init__(where + message)


class TensorFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    P: int
    Q: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0
    K_in: int = 1
    K_out: int = 1
    in_h: int = 1
    in_w: int = 1
    pool: int = 1
    non_compute_overhead: int = 0
    weights: str | None = None

    @property
    def I(self) -> int:
        return self.P // self.K_in

    @property
    def J(self) -> int:
        return self.Q // self.K_out

    @property
    def padded_w(self) -> int:
        return self.in_w + 2 * self.padding

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.padding - self.kernel_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.padding - self.kernel_w) // self.stride + 1

    @property
    def S_out(self) -> int:
        return self.out_h * self.out_w

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "FC":
            return (self.P, self.Q)
        return (self.kernel_h, self.kernel_w, self.P, self.Q)

    def in_group(self, i: int) -> np.ndarray:
        return np.arange(i * self.K_in, (i + 1) * self.K_in)

    def out_group(self, j: int) -> np.ndarray:
        return np.arange(j * self.K_out, (j + 1) * self.K_out)

    @property
    def in_groups(self) -> list[np.ndarray]:
        return [self.in_group(i) for i in range(self.I)]

    @property
    def out_groups(self) -> list[np.ndarray]:
        return [self.out_group(j) for j in range(self.J)]

    def band_rows(self) -> int:
        """Crossbar rows taken by one unsplit semi-folded band."""
        return self.K_in * self.kernel_h * self.padded_w


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    crossbar_rows: int
    crossbar_cols: int
    input_hw: tuple[int, int] = (1, 1)
    base_dir: str = "."
    needs_split: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named '{name}'")

    def index(self, name: str) -> int:
        for k, layer in enumerate(self.layers):
            if layer.name == name:
                return k
        raise KeyError(f"no layer named '{name}'")

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def weights_path(self, layer: LayerSpec) -> Path | None:
        if layer.weights is None:
            return None
        return Path(self.base_dir) / layer.weights

    def prunable(self) -> list[str]:
        """Layer names eligible for pruning: everything but the first Conv and the last FC."""
        names = self.names
        excluded = set()
        convs = [layer.name for layer in self.layers if layer.kind == "Conv"]
        fcs = [layer.name for layer in self.layers if layer.kind == "FC"]
        if convs:
            excluded.add(convs[0])
        if fcs:
            excluded.add(fcs[-1])
        return [n for n in names if n not in excluded]


def _as_int(raw: dict, key: str, layer: str, default: Any = None, minimum: int | None = None) -> int:
    if key not in raw:
        if default is None:
            raise SpecError("missing required field", layer, key)
        value = default
    else:
        value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise SpecError(f"expected an integer, got {value!r}", layer, key)
    value = int(value)
    if minimum is not None and value < minimum:
        raise SpecError(f"must be >= {minimum}, got {value}", layer, key)
    return value


def _parse_layer(raw: dict, in_hw: tuple[int, int]) -> LayerSpec:
    if not isinstance(raw, dict):
        raise SpecError(f"layer entries must be objects, got {type(raw).__name__}")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise SpecError("layer is missing a non-empty 'name'")
    kind = raw.get("kind")
    kinds = {k.lower(): k for k in KINDS}
    if not isinstance(kind, str) or kind.lower() not in kinds:
        raise SpecError(f"kind must be one of {KINDS}, got {kind!r}", name, "kind")
    kind = kinds[kind.lower()]

    P = _as_int(raw, "P", name, minimum=1)
    Q = _as_int(raw, "Q", name, minimum=1)
    kernel = raw.get("kernel", [1, 1])
    if (not isinstance(kernel, (list, tuple)) or len(kernel) != 2
            or not all(isinstance(k, int) and not isinstance(k, bool) and k >= 1 for k in kernel)):
        raise SpecError(f"kernel must be [h, w] of positive ints, got {kernel!r}", name, "kernel")
    stride = _as_int(raw, "stride", name, default=1, minimum=1)
    padding = _as_int(raw, "padding", name, default=0, minimum=0)
    pool = _as_int(raw, "pool", name, default=1, minimum=1)
    K_in = _as_int(raw, "K_in", name, minimum=1)
    default_k_out = 1
    if kind == "FC":
        default_k_out = 8 if Q % 8 == 0 else 1
    K_out = _as_int(raw, "K_out", name, default=default_k_out, minimum=1)
    overhead = _as_int(raw, "non_compute_overhead", name, default=0, minimum=0)
    weights = raw.get("weights")
    if weights is not None and not isinstance(weights, str):
        raise SpecError("weights must be a path string", name, "weights")

    if P % K_in:
        raise SpecError(f"P={P} is not divisible by K_in={K_in}", name, "K_in")
    if Q % K_out:
        raise SpecError(f"Q={Q} is not divisible by K_out={K_out}", name, "K_out")

    if kind == "FC":
        if tuple(kernel) != (1, 1):
            raise SpecError("FC layers use a 1x1 kernel", name, "kernel")
        if stride != 1 or padding != 0 or pool != 1:
            raise SpecError("FC layers take no stride, padding or pooling", name, "stride")
        in_h, in_w = 1, 1
    else:
        in_h, in_w = in_hw

    layer = LayerSpec(
        name=name, kind=kind, P=P, Q=Q, kernel_h=kernel[0], kernel_w=kernel[1],
        stride=stride, padding=padding, K_in=K_in, K_out=K_out, in_h=in_h, in_w=in_w,
        pool=pool, non_compute_overhead=overhead, weights=weights,
    )
    if layer.out_h < 1 or layer.out_w < 1:
        raise SpecError(
            f"output size {layer.out_h}x{layer.out_w} is not positive for input {in_h}x{in_w}",
            name, "kernel")
    if layer.out_h // pool < 1 or layer.out_w // pool < 1:
        raise SpecError(f"pool={pool} leaves an empty output", name, "pool")
    return layer


def network_from_dict(doc: dict, base_dir: str | os.PathLike = ".") -> NetworkSpec:
    if not isinstance(doc, dict):
        raise SpecError("network description must be a JSON object")
    xbar = doc.get("crossbar")
    if not isinstance(xbar, dict):
        raise SpecError("missing 'crossbar': {rows, cols}")
    rows, cols = xbar.get("rows"), xbar.get("cols")
    for key, value in (("rows", rows), ("cols", cols)):
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise SpecError(f"crossbar.{key} must be a positive integer, got {value!r}")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SpecError("'layers' must be a non-empty list")
    input_hw = doc.get("input", [1, 1])
    if (not isinstance(input_hw, (list, tuple)) or len(input_hw) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in input_hw)):
        raise SpecError(f"'input' must be [H, W] of positive ints, got {input_hw!r}")

    layers: list[LayerSpec] = []
    hw = (input_hw[0], input_hw[1])
    channels: int | None = None
    seen: set[str] = set()
    for raw in raw_layers:
        layer = _parse_layer(raw, hw)
        if layer.name in seen:
            raise SpecError("duplicate layer name", layer.name, "name")
        seen.add(layer.name)
        if channels is not None:
            prev = layers[-1]
            if layer.kind == "Conv":
                if prev.kind == "FC":
                    raise SpecError("Conv layer cannot follow an FC layer", layer.name, "kind")
                if layer.P != channels:
                    raise SpecError(f"P={layer.P} does not match previous output channels {channels}",
                                    layer.name, "P")
            else:
                flat = channels * hw[0] * hw[1] if prev.kind == "Conv" else channels
                if layer.P != flat:
                    raise SpecError(f"P={layer.P} does not match flattened previous output {flat}",
                                    layer.name, "P")
        layers.append(layer)
        channels = layer.Q
        if layer.kind == "Conv":
            hw = (layer.out_h // layer.pool, layer.out_w // layer.pool)
        else:
            hw = (1, 1)

    needs_split = tuple(layer.name for layer in layers if layer.band_rows() > rows)
    return NetworkSpec(layers=tuple(layers), crossbar_rows=rows, crossbar_cols=cols,
                       input_hw=(input_hw[0], input_hw[1]), base_dir=str(base_dir),
                       needs_split=needs_split)


def network_to_dict(net: NetworkSpec) -> dict:
    layers = []
    for layer in net.layers:
        entry = {
            "name": layer.name, "kind": layer.kind, "P": layer.P, "Q": layer.Q,
            "kernel": [layer.kernel_h, layer.kernel_w], "stride": layer.stride,
            "padding": layer.padding, "K_in": layer.K_in, "K_out": layer.K_out,
            "pool": layer.pool, "non_compute_overhead": layer.non_compute_overhead,
        }
        if layer.weights is not None:
            entry["weights"] = layer.weights
        layers.append(entry)
    return {
        "crossbar": {"rows": net.crossbar_rows, "cols": net.crossbar_cols},
        "input": list(net.input_hw),
        "layers": layers,
    }


def load_network(path: str | os.PathLike, require_weights: bool = False) -> NetworkSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from exc
    net = network_from_dict(doc, base_dir=path.parent)
    if require_weights:
        for layer in net.layers:
            wp = net.weights_path(layer)
            if wp is None:
                raise SpecError("no weights path given", layer.name, "weights")
            if not wp.exists():
                raise SpecError(f"weights file not found: {wp}", layer.name, "weights")
    return net


def with_weights_paths(net: NetworkSpec, paths: dict[str, str], base_dir: str | None = None) -> NetworkSpec:
    layers = tuple(replace(layer, weights=paths.get(layer.name, layer.weights)) for layer in net.layers)
    return replace(net, layers=layers, base_dir=base_dir if base_dir is not None else net.base_dir)


def load_weights(net: NetworkSpec) -> dict[str, np.ndarray]:
    """Load every layer's weights as float64, checking shapes against the layer descriptions."""
    out = {}
    for layer in net.layers:
        wp = net.weights_path(layer)
        if wp is None:
            raise SpecError("no weights path given", layer.name, "weights")
        if not wp.exists():
            raise SpecError(f"weights file not found: {wp}", layer.name, "weights")
        w = load_tensor(wp).astype(np.float64)
        if layer.kind == "FC" and w.shape == (1, 1, layer.P, layer.Q):
            w = w.reshape(layer.P, layer.Q)
        if w.shape != layer.weight_shape:
            raise SpecError(f"weights have shape {w.shape}, expected {layer.weight_shape}",
                            layer.name, "weights")
        out[layer.name] = w
    return out


# -- tensors -----------------------------------------------------------------

def save_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    arr = np.asarray(t)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("tensor contains non-finite values")
    arr = np.asarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False), order="C")
    with open(path, "wb") as fh:
        npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            version = npy_format.read_magic(fh)
        except ValueError as exc:
            raise TensorFormatError(f"{path}: bad magic ({exc})") from exc
        if version != (1, 0):
            raise TensorFormatError(f"{path}: unsupported .npy version {version}, expected 1.0")
        try:
            shape, fortran, dtype = npy_format.read_array_header_1_0(fh)
        except ValueError as exc:
            raise TensorFormatError(f"{path}: bad header ({exc})") from exc
        if dtype not in SUPPORTED_DTYPES:
            raise TensorFormatError(f"{path}: unsupported dtype {dtype.str}; need <f4 or <f8")
        if fortran:
            raise TensorFormatError(f"{path}: Fortran-ordered data is not supported")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.fromfile(fh, dtype=dtype, count=count)
        if data.size != count:
            raise TensorFormatError(f"{path}: truncated data ({data.size} of {count} elements)")
    arr = data.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{path}: tensor contains non-finite values")
    return arr


# -- JSON records --------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2) + "\n"


def write_json(path: str | os.PathLike, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path: str | os.PathLike):
    return json.loads(Path(path).read_text())


def groups_partition(sets: Iterable[np.ndarray], n: int) -> bool:
    """True when the index sets are pairwise disjoint and cover [0, n)."""
    sets = [np.asarray(s) for s in sets]
    flat = np.concatenate(sets) if sets else np.array([], int)
    return flat.size == n and np.array_equal(np.sort(flat), np.arange(n))
