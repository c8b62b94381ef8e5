"""Learnable importance scores, percentile thresholding to binary masks, and
the straight-through masked forward pass.

Scores live per prunable weight tensor, either one score per element or one
per output channel. Thresholding keeps exactly floor((1-s)*N) entries of
largest magnitude; during score learning the binarization is treated as
identity so scores receive the gradient of the effective weight scaled by
the frozen pretrained weight.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models
from .serialization import read_archive, write_archive
from .tensor import Tensor, record_op

GRANULARITIES = ("element", "channel")
SCOPES = ("global", "per-layer")


class MaskError(ValueError):
    pass


@dataclass
class ScoreSet:
    scores: dict  # name -> Tensor, ordered by the model's prunable list
    granularity: str

    def tensors(self) -> list:
        return list(self.scores.values())


@dataclass
class MaskState:
    masks: dict  # name -> float32 ndarray of {0,1}, same order as scores
    granularity: str
    sparsity_target: float
    scope: str = "global"

    def kept(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.masks.values()))

    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))


def _score_shape(weight_shape: tuple, granularity: str) -> tuple:
    return weight_shape if granularity == "element" else (weight_shape[0],)


def keep_count(s: float, n: int) -> int:
    """floor((1-s)*n) with a guard so decimal sparsities like 0.9 hit the
    intended integer despite binary rounding of (1-s)."""
    return int(np.floor((1.0 - s) * n + 1e-9))


def scaled_init(model: models.ModelState, granularity: str = "element") -> ScoreSet:
    """Scores proportional to the pretrained weights, normalized by the
    largest magnitude over the whole prunable pool so thresholding sees the
    same ordering as raw magnitudes while staying bounded for Adam.

    Channel granularity scores each output channel by the L2 norm of its
    weights, normalized the same way.
    """
    if granularity not in GRANULARITIES:
        raise MaskError(f"unknown granularity {granularity!r}")
    if not model.prunable:
        raise MaskError("model has an empty prunable set")
    raw: dict[str, np.ndarray] = {}
    for name in model.prunable:
        w = model.params[name].values
        if granularity == "element":
            raw[name] = w.copy()
        else:
            raw[name] = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
    top = max(float(np.abs(a).max()) for a in raw.values())
    scale = np.float32(1.0 / top) if top > 0 else np.float32(1.0)
    return ScoreSet(
        {n: Tensor((a * scale).astype(np.float32), requires_grad=True) for n, a in raw.items()},
        granularity,
    )


def identity_mask(model: models.ModelState, granularity: str = "element") -> MaskState:
    masks = {
        n: np.ones(_score_shape(model.params[n].shape, granularity), dtype=np.float32)
        for n in model.prunable
    }
    return MaskState(masks, granularity, sparsity_target=0.0)


def threshold(scores: ScoreSet, s: float, scope: str = "global") -> MaskState:
    """Keep the floor((1-s)*N) largest-|score| entries.

    Ties break deterministically: earlier layer, then lower flat index, wins
    retention. Per-layer scope applies the same rule within each tensor.
    """
    if not 0.0 <= s < 1.0:
        raise MaskError(f"sparsity {s} outside [0, 1)")
    if scope not in SCOPES:
        raise MaskError(f"unknown scope {scope!r}")
    names = list(scores.scores)
    flats = [np.abs(scores.scores[n].values).ravel() for n in names]
    masks = {n: np.zeros(scores.scores[n].shape, dtype=np.float32) for n in names}
    if scope == "per-layer":
        for n, a in zip(names, flats):
            k = keep_count(s, a.size)
            order = np.argsort(-a, kind="stable")
            flat = masks[n].ravel()
            flat[order[:k]] = 1.0
    else:
        pool = np.concatenate(flats) if flats else np.empty(0, dtype=np.float32)
        k = keep_count(s, pool.size)
        order = np.argsort(-pool, kind="stable")
        keep = np.zeros(pool.size, dtype=bool)
        keep[order[:k]] = True
        start = 0
        for n, a in zip(names, flats):
            masks[n].ravel()[keep[start : start + a.size]] = 1.0
            start += a.size
    return MaskState(masks, scores.granularity, sparsity_target=s, scope=scope)


def _expand(mask: np.ndarray, weight_shape: tuple, granularity: str) -> np.ndarray:
    if granularity == "element":
        return mask
    return mask.reshape((-1,) + (1,) * (len(weight_shape) - 1))


def apply_mask(theta: Tensor, mask: np.ndarray, scores: Optional[Tensor] = None,
               granularity: str = "element") -> Tensor:
    """Effective weight theta * mask.

    When a score tensor is supplied, the backward pass routes the effective
    weight's gradient to the scores as grad * theta (binarization treated as
    identity); theta itself receives grad * mask when trainable.
    """
    mexp = _expand(mask, theta.shape, granularity)
    out = Tensor(theta.values * mexp)
    grads = []
    if theta.requires_grad:
        grads.append((theta, lambda g: g * mexp))
    if scores is not None and scores.requires_grad:
        if granularity == "element":
            grads.append((scores, lambda g, tv=theta.values: g * tv))
        else:
            axes = tuple(range(1, theta.values.ndim))
            grads.append((scores, lambda g, tv=theta.values, ax=axes: (g * tv).sum(axis=ax)))
    record_op(out, grads)
    return out


def effective_weights(model: models.ModelState, mask: MaskState,
                      scores: Optional[ScoreSet] = None) -> dict:
    _check_fit(model, mask)
    if scores is not None and scores.granularity != mask.granularity:
        raise MaskError("scores and mask granularity differ")
    eff = {}
    for name in model.prunable:
        sc = scores.scores[name] if scores is not None else None
        eff[name] = apply_mask(model.params[name], mask.masks[name], sc, mask.granularity)
    return eff


def masked_forward(model: models.ModelState, mask: MaskState, batch: Tensor,
                   scores: Optional[ScoreSet] = None) -> Tensor:
    """Forward pass with every prunable weight replaced by theta * mask."""
    return models.forward(model, batch, effective=effective_weights(model, mask, scores))


def _check_fit(model: models.ModelState, mask: MaskState) -> None:
    if set(mask.masks) != set(model.prunable):
        raise MaskError("mask names do not match the model's prunable set")
    for name, m in mask.masks.items():
        want = _score_shape(model.params[name].shape, mask.granularity)
        if m.shape != want:
            raise MaskError(f"mask {name!r} has shape {m.shape}, expected {want}")


def sparsity_of(mask: MaskState) -> float:
    total = mask.total()
    return 1.0 - mask.kept() / total if total else 0.0


def expand_to_elements(mask: MaskState, model: models.ModelState) -> MaskState:
    """Channel mask broadcast to element form over each channel's weights."""
    if mask.granularity == "element":
        return mask
    masks = {}
    for name in model.prunable:
        shape = model.params[name].shape
        masks[name] = np.broadcast_to(
            _expand(mask.masks[name], shape, "channel"), shape
        ).astype(np.float32)
    return MaskState(masks, "element", mask.sparsity_target, mask.scope)


def memory_reduction(mask: MaskState, model: models.ModelState) -> float:
    """Fraction of all parameters made removable by the mask.

    Element masks count their zeroed entries. Channel masks count every
    weight and bias of a dead channel plus the downstream weight slices that
    read from it.
    """
    _check_fit(model, mask)
    total = models.param_count(model)
    if mask.granularity == "element":
        pruned = mask.total() - mask.kept()
        return pruned / total
    trace = models.trace_shapes(model.spec)
    dead = 0
    live_in: Optional[np.ndarray] = None  # boolean liveness of the incoming channels/features
    for i, (layer, in_desc, out_desc) in enumerate(trace):
        if isinstance(layer, models.Conv):
            wname, bname = f"conv{i}.weight", f"conv{i}.bias"
        elif isinstance(layer, models.Linear):
            wname, bname = f"linear{i}.weight", f"linear{i}.bias"
        elif isinstance(layer, models.Flatten):
            if live_in is not None:
                c, h, w = in_desc
                live_in = np.repeat(live_in, h * w)
            continue
        else:
            continue
        w = model.params[wname].values
        out_n = w.shape[0]
        out_live = mask.masks[wname].astype(bool) if wname in mask.masks \
            else np.ones(out_n, dtype=bool)
        in_live = live_in if live_in is not None else np.ones(w.shape[1], dtype=bool)
        per_out = int(np.prod(w.shape[1:])) // w.shape[1]  # weights per input slice
        live_weights = int(out_live.sum()) * int(in_live.sum()) * per_out
        dead += w.size - live_weights
        dead += out_n - int(out_live.sum())  # biases of dead channels
        live_in = out_live
    return dead / total


def mask_digest(mask: MaskState) -> str:
    h = hashlib.sha256()
    for name in sorted(mask.masks):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(mask.masks[name], dtype=np.float32).tobytes())
    return h.hexdigest()


def save_mask(path, mask: MaskState, model: models.ModelState,
              scores: Optional[ScoreSet] = None) -> None:
    tensors = {f"mask.{n}": m for n, m in mask.masks.items()}
    if scores is not None:
        tensors.update({f"score.{n}": t.values for n, t in scores.scores.items()})
    meta = {"granularity": mask.granularity, "sparsity_target": mask.sparsity_target,
            "scope": mask.scope}
    write_archive(path, tensors, model.spec.digest(), meta)


def load_mask(path, model: models.ModelState) -> tuple:
    """Returns (MaskState, ScoreSet or None); validates against the model."""
    tensors, digest, meta = read_archive(path)
    if digest != model.spec.digest():
        raise MaskError("mask file belongs to a different model spec")
    masks = {n[len("mask."):]: a for n, a in tensors.items() if n.startswith("mask.")}
    mask = MaskState(masks, meta["granularity"], meta["sparsity_target"], meta["scope"])
    _check_fit(model, mask)
    score_arrs = {n[len("score."):]: a for n, a in tensors.items() if n.startswith("score.")}
    scores = None
    if score_arrs:
        ordered = {n: Tensor(score_arrs[n], requires_grad=True) for n in model.prunable}
        scores = ScoreSet(ordered, meta["granularity"])
    return mask, scores
