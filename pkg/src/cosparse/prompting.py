"""Visual prompts: resize-and-pad canvas composition plus learnable border,
corner, and movable-square perturbations.

A prompt owns a full-canvas perturbation `delta` and a binary mask of its
tunable region. The composed input is `resize_and_pad(x) + delta * mask`,
differentiable with respect to delta; the frozen region of delta is zero at
all times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .serialization import read_archive, write_archive
from .tensor import Tensor, add, mul

PROMPT_KINDS = ("pad", "fix", "random", "none")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    kind: str
    canvas_size: int  # S
    input_size: int  # i, side the image is resized to before placement
    size_param: int = 0  # pad width (pad) or square side (fix/random)
    channels: int = 1

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise PromptError(f"unknown prompt kind {self.kind!r}")
        if not 1 <= self.input_size <= self.canvas_size:
            raise PromptError(
                f"input size {self.input_size} must lie in [1, {self.canvas_size}]"
            )
        if self.size_param < 0 or self.channels < 1:
            raise PromptError("size_param must be >= 0 and channels >= 1")
        if self.kind == "none" and self.size_param != 0:
            raise PromptError("kind 'none' requires size_param 0")
        if self.kind == "pad" and 2 * self.size_param >= self.canvas_size:
            raise PromptError(
                f"pad width {self.size_param} leaves no fixed center on a "
                f"{self.canvas_size} canvas"
            )
        if self.kind in ("fix", "random") and self.size_param > self.canvas_size:
            raise PromptError("square side exceeds the canvas")

    def overlap(self) -> int:
        """How far the tunable border would reach into the placed image."""
        if self.kind != "pad":
            return 0
        return max(0, self.input_size + 2 * self.size_param - self.canvas_size)


@dataclass
class PromptState:
    spec: PromptSpec
    delta: Tensor  # C x S x S, requires_grad
    tunable_mask: np.ndarray  # C x S x S float32 in {0, 1}
    rng: Optional[np.random.Generator] = None  # random kind only
    patch_origin: Optional[tuple] = None  # current top-left of the random square

    def clone(self) -> "PromptState":
        st = PromptState(self.spec, self.delta.copy(), self.tunable_mask.copy(),
                         None, self.patch_origin)
        st.delta.requires_grad = True
        return st


def tunable_count(spec: PromptSpec, per_channel: bool = False) -> int:
    """Learnable entries of the prompt; border kind has 4p(S-p) per channel."""
    s, p = spec.canvas_size, spec.size_param
    if spec.kind == "none" or p == 0:
        per = 0
    elif spec.kind == "pad":
        per = 4 * p * (s - p)
    else:
        per = p * p
    return per if per_channel else per * spec.channels


def _resize_bilinear(img: np.ndarray, out: int) -> np.ndarray:
    """Bilinear resample of trailing (H, W) axes to (out, out), half-pixel centers."""
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == (out, out):
        return img.astype(np.float32, copy=True)

    def axis_coords(n_in: int) -> tuple:
        src = (np.arange(out, dtype=np.float64) + 0.5) * (n_in / out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = (src - i0).astype(np.float32)
        return i0, i1, frac

    r0, r1, fr = axis_coords(h)
    c0, c1, fc = axis_coords(w)
    rows0 = img[..., r0, :]
    rows1 = img[..., r1, :]
    # lerp as a + f*(b - a): exact when a == b or f == 0
    rows = rows0 + fr[:, None] * (rows1 - rows0)
    cols0 = rows[..., :, c0]
    cols1 = rows[..., :, c1]
    return (cols0 + fc * (cols1 - cols0)).astype(np.float32)


def resize_and_pad(x: np.ndarray, input_size: int, canvas_size: int) -> np.ndarray:
    """Resize trailing (H, W) to input_size and center on a zero canvas."""
    if input_size > canvas_size:
        raise PromptError(f"input size {input_size} exceeds canvas {canvas_size}")
    x = np.asarray(x, dtype=np.float32)
    resized = _resize_bilinear(x, input_size)
    off = (canvas_size - input_size) // 2
    canvas = np.zeros(x.shape[:-2] + (canvas_size, canvas_size), dtype=np.float32)
    canvas[..., off : off + input_size, off : off + input_size] = resized
    return canvas


def build_tunable_mask(spec: PromptSpec, origin: Optional[tuple] = None) -> np.ndarray:
    s, p, c = spec.canvas_size, spec.size_param, spec.channels
    mask = np.zeros((c, s, s), dtype=np.float32)
    if spec.kind == "none" or p == 0:
        return mask
    if spec.kind == "pad":
        mask[:] = 1.0
        mask[:, p : s - p, p : s - p] = 0.0
    elif spec.kind == "fix":
        mask[:, :p, :p] = 1.0
    else:
        if origin is None:
            raise PromptError("random prompt needs a square origin")
        r, col = origin
        mask[:, r : r + p, col : col + p] = 1.0
    return mask


def _draw_origin(spec: PromptSpec, gen: np.random.Generator) -> tuple:
    lim = spec.canvas_size - spec.size_param + 1
    return int(gen.integers(lim)), int(gen.integers(lim))


def make_prompt(spec: PromptSpec, seed: int) -> PromptState:
    """Zero-initialized perturbation with the kind's tunable geometry."""
    delta = Tensor(np.zeros((spec.channels, spec.canvas_size, spec.canvas_size),
                            dtype=np.float32), requires_grad=True)
    if spec.kind == "random" and spec.size_param > 0:
        gen = np.random.default_rng(seed)
        origin = _draw_origin(spec, gen)
        return PromptState(spec, delta, build_tunable_mask(spec, origin), gen, origin)
    return PromptState(spec, delta, build_tunable_mask(spec), None, None)


def _reposition_patch(prompt: PromptState) -> None:
    """Move the learnable square (values included) to a fresh random origin."""
    spec = prompt.spec
    p = spec.size_param
    r0, c0 = prompt.patch_origin
    patch = prompt.delta.values[:, r0 : r0 + p, c0 : c0 + p].copy()
    origin = _draw_origin(spec, prompt.rng)
    prompt.delta.values.fill(0.0)
    r1, c1 = origin
    prompt.delta.values[:, r1 : r1 + p, c1 : c1 + p] = patch
    prompt.patch_origin = origin
    prompt.tunable_mask = build_tunable_mask(spec, origin)


def apply_delta(base: Tensor, prompt: PromptState, training: bool = False) -> Tensor:
    """Add the masked perturbation to an already-composed canvas batch."""
    if base.values.shape[-3:] != prompt.delta.values.shape:
        raise PromptError(
            f"canvas {base.values.shape} does not match prompt {prompt.delta.values.shape}"
        )
    if prompt.spec.kind == "random" and training and prompt.rng is not None:
        _reposition_patch(prompt)
    if tunable_count(prompt.spec) == 0:
        return base
    masked = mul(prompt.delta, Tensor(prompt.tunable_mask))
    return add(base, masked)


def apply_prompt(x: np.ndarray, prompt: PromptState, training: bool = False) -> Tensor:
    """Compose raw images (..., C, h, w) with the prompt onto the canvas."""
    spec = prompt.spec
    base = Tensor(resize_and_pad(x, spec.input_size, spec.canvas_size))
    return apply_delta(base, prompt, training=training)


def save_prompt(path, prompt: PromptState, digest: Optional[bytes] = None) -> None:
    meta = {
        "kind": prompt.spec.kind,
        "canvas_size": prompt.spec.canvas_size,
        "input_size": prompt.spec.input_size,
        "size_param": prompt.spec.size_param,
        "channels": prompt.spec.channels,
        "patch_origin": list(prompt.patch_origin) if prompt.patch_origin else None,
    }
    tensors = {"prompt.delta": prompt.delta.values, "prompt.mask": prompt.tunable_mask}
    write_archive(path, tensors, digest or bytes(32), meta)


def load_prompt(path) -> PromptState:
    tensors, _, meta = read_archive(path)
    spec = PromptSpec(meta["kind"], meta["canvas_size"], meta["input_size"],
                      meta["size_param"], meta["channels"])
    delta = Tensor(tensors["prompt.delta"], requires_grad=True)
    origin = tuple(meta["patch_origin"]) if meta.get("patch_origin") else None
    return PromptState(spec, delta, tensors["prompt.mask"], None, origin)
