"""Small architecture zoo with parameter/FLOPs accounting and checkpoints.

Three desk-scale classifiers stand in for large pretrained backbones:
"mlp-s" (two hidden layers), "cnn-s" (three stride-2 convs and a linear
head) and "cnn-m" (same at double width). FLOPs are counted as 2*MACs for
conv and linear layers only; pooling and activations are free.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .serialization import ArchiveError, read_archive, write_archive
from .tensor import Tensor, TensorError, avgpool2d, conv2d, flatten, linear, maxpool2d, relu


class SpecError(ValueError):
    """Architecture description fails shape checking."""


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Pool:
    kind: str  # "max" | "avg"
    kernel: int
    stride: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int


Layer = Union[Conv, Pool, Relu, Flatten, Linear]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    in_channels: int
    canvas: int  # square input side the network expects
    layers: tuple
    classes: int

    def __post_init__(self):
        trace_shapes(self)  # raises SpecError when the chain does not fit

    def head_index(self) -> int:
        idx = [i for i, l in enumerate(self.layers) if isinstance(l, Linear)]
        if not idx:
            raise SpecError(f"spec {self.name!r} has no linear head")
        return idx[-1]

    def to_json(self) -> str:
        enc = []
        for l in self.layers:
            if isinstance(l, Conv):
                enc.append(["conv", l.out_channels, l.kernel, l.stride, l.pad])
            elif isinstance(l, Pool):
                enc.append(["pool", l.kind, l.kernel, l.stride])
            elif isinstance(l, Relu):
                enc.append(["relu"])
            elif isinstance(l, Flatten):
                enc.append(["flatten"])
            else:
                enc.append(["linear", l.out_features])
        return json.dumps(
            {"name": self.name, "in_channels": self.in_channels, "canvas": self.canvas,
             "layers": enc, "classes": self.classes},
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        obj = json.loads(text)
        layers = []
        for item in obj["layers"]:
            kind = item[0]
            if kind == "conv":
                layers.append(Conv(*item[1:]))
            elif kind == "pool":
                layers.append(Pool(*item[1:]))
            elif kind == "relu":
                layers.append(Relu())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "linear":
                layers.append(Linear(item[1]))
            else:
                raise SpecError(f"unknown layer kind {kind!r}")
        return ModelSpec(obj["name"], obj["in_channels"], obj["canvas"],
                         tuple(layers), obj["classes"])

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


def trace_shapes(spec: ModelSpec) -> list:
    """Walk the layer chain for a canvas-sized input.

    Returns one record per layer: (layer, in_desc, out_desc) where conv
    descs are (channels, h, w) and linear descs are feature counts.
    """
    if spec.in_channels < 1 or spec.canvas < 1 or spec.classes < 1:
        raise SpecError(f"spec {spec.name!r}: bad channels/canvas/classes")
    c, h, w = spec.in_channels, spec.canvas, spec.canvas
    feats = None  # set after flatten
    trace = []
    last_linear = None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if feats is not None:
                raise SpecError(f"spec {spec.name!r}: conv after flatten at layer {i}")
            ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            if layer.stride < 1 or layer.pad < 0 or ho < 1 or wo < 1:
                raise SpecError(
                    f"spec {spec.name!r}: conv at layer {i} does not fit {c}x{h}x{w}"
                )
            trace.append((layer, (c, h, w), (layer.out_channels, ho, wo)))
            c, h, w = layer.out_channels, ho, wo
        elif isinstance(layer, Pool):
            if feats is not None:
                raise SpecError(f"spec {spec.name!r}: pool after flatten at layer {i}")
            ho = (h - layer.kernel) // layer.stride + 1
            wo = (w - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1 or layer.kind not in ("max", "avg"):
                raise SpecError(f"spec {spec.name!r}: bad pool at layer {i}")
            trace.append((layer, (c, h, w), (c, ho, wo)))
            h, w = ho, wo
        elif isinstance(layer, Relu):
            desc = feats if feats is not None else (c, h, w)
            trace.append((layer, desc, desc))
        elif isinstance(layer, Flatten):
            if feats is not None:
                raise SpecError(f"spec {spec.name!r}: repeated flatten at layer {i}")
            feats = c * h * w
            trace.append((layer, (c, h, w), feats))
        elif isinstance(layer, Linear):
            if feats is None:
                raise SpecError(f"spec {spec.name!r}: linear before flatten at layer {i}")
            trace.append((layer, feats, layer.out_features))
            feats = layer.out_features
            last_linear = layer
        else:
            raise SpecError(f"spec {spec.name!r}: unknown layer {layer!r}")
    if last_linear is None or feats != spec.classes:
        raise SpecError(
            f"spec {spec.name!r}: chain must end in a linear head with {spec.classes} outputs"
        )
    return trace


# --------------------------------------------------------------------------
# Zoo


def zoo_spec(name: str, in_channels: int, canvas: int, classes: int) -> ModelSpec:
    if name == "mlp-s":
        layers = (Flatten(), Linear(64), Relu(), Linear(64), Relu(), Linear(classes))
    elif name in ("cnn-s", "cnn-m"):
        widths = (8, 16, 32) if name == "cnn-s" else (16, 32, 64)
        layers = (
            Conv(widths[0], 3, 2, 1), Relu(),
            Conv(widths[1], 3, 2, 1), Relu(),
            Conv(widths[2], 3, 2, 1), Relu(),
            Flatten(), Linear(classes),
        )
    else:
        raise SpecError(f"unknown model name {name!r}")
    return ModelSpec(name, in_channels, canvas, layers, classes)


# --------------------------------------------------------------------------
# Parameters


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict  # name -> Tensor, insertion order follows the layer chain
    prunable: tuple  # weight-tensor names eligible for masking (head excluded)

    def param_tensors(self) -> list:
        return list(self.params.values())

    def clone(self) -> "ModelState":
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()},
                          self.prunable)


def _param_names(spec: ModelSpec):
    """Yield (layer_index, layer, weight_name, bias_name) for parameterized layers."""
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            yield i, layer, f"conv{i}.weight", f"conv{i}.bias"
        elif isinstance(layer, Linear):
            yield i, layer, f"linear{i}.weight", f"linear{i}.bias"


def build_model(spec: ModelSpec, seed: int) -> ModelState:
    """Initialize parameters deterministically: fan-in-scaled uniform weights
    (variance-preserving under relu, since there is no normalization layer to
    rescue a bad scale), zero biases."""
    gen = np.random.default_rng(seed)
    trace = trace_shapes(spec)
    head = spec.head_index()
    params: dict[str, Tensor] = {}
    prunable = []
    for i, layer, wname, bname in _param_names(spec):
        in_desc = trace[i][1]
        if isinstance(layer, Conv):
            fan_in = in_desc[0] * layer.kernel * layer.kernel
            shape = (layer.out_channels, in_desc[0], layer.kernel, layer.kernel)
            bias_n = layer.out_channels
        else:
            fan_in = in_desc
            shape = (layer.out_features, in_desc)
            bias_n = layer.out_features
        bound = np.sqrt(6.0 / fan_in)
        w = gen.uniform(-bound, bound, size=shape).astype(np.float32)
        params[wname] = Tensor(w)
        params[bname] = Tensor(np.zeros(bias_n, dtype=np.float32))
        if i != head:
            prunable.append(wname)
    return ModelState(spec, params, tuple(prunable))


def reinit_head(state: ModelState, seed: int) -> ModelState:
    """Fresh copy with the head layer re-initialized from seed (other params shared values)."""
    out = state.clone()
    head = state.spec.head_index()
    trace = trace_shapes(state.spec)
    fan_in = trace[head][1]
    gen = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / fan_in)
    out.params[f"linear{head}.weight"] = Tensor(
        gen.uniform(-bound, bound, size=out.params[f"linear{head}.weight"].shape).astype(np.float32)
    )
    out.params[f"linear{head}.bias"] = Tensor(
        np.zeros_like(out.params[f"linear{head}.bias"].values)
    )
    return out


def forward(state: ModelState, x: Tensor, effective: Optional[dict] = None) -> Tensor:
    """Run the layer chain; `effective` substitutes weight tensors by name."""
    effective = effective or {}
    h = x
    for i, layer in enumerate(state.spec.layers):
        if isinstance(layer, Conv):
            w = effective.get(f"conv{i}.weight", state.params[f"conv{i}.weight"])
            b = state.params[f"conv{i}.bias"]
            h = conv2d(h, w, b, stride=layer.stride, pad=layer.pad)
        elif isinstance(layer, Pool):
            fn = maxpool2d if layer.kind == "max" else avgpool2d
            h = fn(h, layer.kernel, layer.stride)
        elif isinstance(layer, Relu):
            h = relu(h)
        elif isinstance(layer, Flatten):
            h = flatten(h)
        else:
            w = effective.get(f"linear{i}.weight", state.params[f"linear{i}.weight"])
            b = state.params[f"linear{i}.bias"]
            h = linear(h, w, b)
    return h


def param_count(state: ModelState, prunable_only: bool = False) -> int:
    if prunable_only:
        return sum(state.params[n].size for n in state.prunable)
    return sum(t.size for t in state.params.values())


# --------------------------------------------------------------------------
# FLOPs


def _live_out(state: ModelState, wname: str, channel_mask) -> int:
    """Surviving output channels/units of a layer under an optional channel mask."""
    full = state.params[wname].shape[0]
    if channel_mask is None:
        return full
    m = channel_mask.masks.get(wname)
    if m is None:
        return full
    if m.shape != (full,):
        raise TensorError(f"channel mask for {wname} has shape {m.shape}, expected ({full},)")
    return int(np.count_nonzero(m))


def flops_count(state: ModelState, channel_mask=None) -> int:
    """FLOPs (2*MACs) of one forward pass at the spec's canvas size.

    With a channel-granular mask, dead output channels contribute nothing and
    the next layer's effective input shrinks accordingly.
    """
    if channel_mask is not None and getattr(channel_mask, "granularity", None) != "channel":
        raise TensorError("flops_count needs a channel-granular mask")
    trace = trace_shapes(state.spec)
    live_c: Optional[int] = None  # surviving channels entering the current layer
    flops = 0
    for i, (layer, in_desc, out_desc) in enumerate(trace):
        if isinstance(layer, Conv):
            cin = in_desc[0] if live_c is None else live_c
            cout = _live_out(state, f"conv{i}.weight", channel_mask)
            _, ho, wo = out_desc
            flops += 2 * layer.kernel * layer.kernel * cin * cout * ho * wo
            live_c = cout
        elif isinstance(layer, Flatten):
            c, h, w = in_desc
            live_c = (c if live_c is None else live_c) * h * w
        elif isinstance(layer, Linear):
            fin = in_desc if live_c is None else live_c
            fout = _live_out(state, f"linear{i}.weight", channel_mask)
            flops += 2 * fin * fout
            live_c = fout
    return flops


def speedup_ratio(state: ModelState, channel_mask) -> float:
    dense = flops_count(state)
    masked = flops_count(state, channel_mask)
    if masked == 0:
        raise TensorError("masked network has zero FLOPs")
    return dense / masked


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(state: ModelState, path, metadata: Optional[dict] = None) -> None:
    meta = dict(metadata or {})
    meta["spec"] = state.spec.to_json()
    tensors = {name: t.values for name, t in state.params.items()}
    write_archive(path, tensors, state.spec.digest(), meta)


def load_checkpoint(path, expected_spec: Optional[ModelSpec] = None) -> ModelState:
    tensors, digest, meta = read_archive(path)
    spec = ModelSpec.from_json(meta["spec"])
    if digest != spec.digest():
        raise ArchiveError("checkpoint digest does not match its embedded spec")
    if expected_spec is not None and digest != expected_spec.digest():
        raise ArchiveError(
            f"checkpoint was written for spec {spec.name!r}, not {expected_spec.name!r}"
        )
    ref = build_model(spec, seed=0)
    if set(tensors) != set(ref.params):
        raise ArchiveError("checkpoint tensor names do not match the spec")
    params = {}
    for name, t in ref.params.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise ArchiveError(f"tensor {name!r} has shape {arr.shape}, spec wants {t.shape}")
        params[name] = Tensor(arr)
    return ModelState(spec, params, ref.prunable)
