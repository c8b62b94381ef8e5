"""Pruning method suite: magnitude/saliency one-shot baselines, iterative
magnitude pruning with rewinding, learned-score mask finding with and without
a visual prompt, sparse subnetwork tuning, and post-pruning prompt training.

All methods produce masks of exact floor cardinality at the requested
sparsity. Mask finding never mutates the frozen backbone weights; only
scores, the prompt, and (when enabled) the classification head train.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import masking, models, prompting
from .data import Dataset, batch_indices
from .seeding import child_seed
from .tensor import (
    Tape,
    Tensor,
    backward,
    cosine_lr,
    linear,
    make_adam,
    make_sgd,
    optimizer_step,
    softmax_cross_entropy,
    zero_grads,
)


class PruneError(ValueError):
    pass


ONE_SHOT_KINDS = ("random", "omp", "snip", "grasp", "synflow")
ALL_KINDS = ONE_SHOT_KINDS + ("imp", "hydra", "vpns")

# Desk-scale epoch budgets keeping the reference ratios: score-learning with a
# prompt uses half the epochs of score-learning without one, and one-shot
# baselines spend the whole budget on tuning.
DEFAULT_BUDGETS = {
    "vpns": (10, 10),
    "hydra": (20, 20),
    "imp": (0, 40),
    "random": (0, 40),
    "omp": (0, 40),
    "snip": (0, 40),
    "grasp": (0, 40),
    "synflow": (0, 40),
}


@dataclass
class PruneMethod:
    kind: str
    sparsity: float
    granularity: str = "element"
    scope: str = "global"
    mask_epochs: Optional[int] = None
    tune_epochs: Optional[int] = None
    imp_round_epochs: int = 40
    mask_refresh: str = "epoch"  # "epoch" | "step"
    prompt: Optional[prompting.PromptSpec] = None
    prompt_in_finding: bool = True
    prompt_in_tuning: bool = True
    synflow_iterations: int = 100
    mask_lr: float = 1e-4
    tune_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise PruneError(f"unknown pruning method {self.kind!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise PruneError(f"sparsity {self.sparsity} outside [0, 1)")
        if self.kind == "vpns" and (self.prompt is None or self.prompt.kind == "none"):
            raise PruneError("vpns requires a prompt spec with kind != 'none'")
        if self.granularity == "channel" and self.kind in ("snip", "grasp", "synflow", "imp"):
            raise PruneError(f"{self.kind} supports element granularity only")
        if self.mask_epochs is None:
            self.mask_epochs = DEFAULT_BUDGETS[self.kind][0]
        if self.tune_epochs is None:
            self.tune_epochs = DEFAULT_BUDGETS[self.kind][1]


@dataclass
class TrainLogRow:
    epoch: int
    phase: str
    loss: float
    train_acc: float
    lr: float
    steps: int


@dataclass
class PruneResult:
    method: str
    mask: masking.MaskState
    scores: Optional[masking.ScoreSet]
    prompt: Optional[prompting.PromptState]
    model: Optional[models.ModelState]  # tuned subnetwork weights
    log: list
    achieved_sparsity: float

    @property
    def epochs_used(self) -> int:
        return len(self.log)

    @property
    def steps_used(self) -> int:
        return sum(r.steps for r in self.log)


# --------------------------------------------------------------------------
# Evaluation


def _compose_eval_inputs(images: np.ndarray, prompt: Optional[prompting.PromptState],
                         input_size: int, canvas: int) -> np.ndarray:
    base = prompting.resize_and_pad(images, input_size, canvas)
    if prompt is not None and prompting.tunable_count(prompt.spec) > 0:
        base = base + prompt.delta.values * prompt.tunable_mask
    return base


def evaluate(model: models.ModelState, ds: Dataset, mask: Optional[masking.MaskState] = None,
             prompt: Optional[prompting.PromptState] = None,
             input_size: Optional[int] = None, batch_size: int = 256) -> float:
    """Test accuracy; inputs are resized and padded to the model canvas."""
    if prompt is not None:
        input_size = prompt.spec.input_size
        canvas = prompt.spec.canvas_size
    else:
        canvas = model.spec.canvas
        if input_size is None:
            input_size = min(ds.images.shape[-1], canvas)
    effective = None
    if mask is not None:
        effective = {
            n: Tensor(model.params[n].values
                      * masking._expand(mask.masks[n], model.params[n].shape, mask.granularity))
            for n in model.prunable
        }
    hits = 0
    for lo in range(0, len(ds), batch_size):
        xb = _compose_eval_inputs(ds.images[lo:lo + batch_size], prompt, input_size, canvas)
        logits = models.forward(model, Tensor(xb), effective=effective)
        hits += int((logits.values.argmax(axis=1) == ds.labels[lo:lo + batch_size]).sum())
    return hits / len(ds)


# --------------------------------------------------------------------------
# One-shot masks


def _pool_sizes(model: models.ModelState, granularity: str) -> int:
    return sum(
        model.params[n].size if granularity == "element" else model.params[n].shape[0]
        for n in model.prunable
    )


def _mask_from_keep(model: models.ModelState, granularity: str, keep_flat: np.ndarray,
                    s: float, scope: str = "global") -> masking.MaskState:
    masks = {}
    start = 0
    for name in model.prunable:
        shape = masking._score_shape(model.params[name].shape, granularity)
        size = int(np.prod(shape))
        masks[name] = keep_flat[start:start + size].astype(np.float32).reshape(shape)
        start += size
    return masking.MaskState(masks, granularity, sparsity_target=s, scope=scope)


def prune_random(model: models.ModelState, s: float, seed: int,
                 granularity: str = "element") -> masking.MaskState:
    """Keep a uniformly random subset of exactly floor((1-s)N) entries."""
    if not 0.0 <= s < 1.0:
        raise PruneError(f"sparsity {s} outside [0, 1)")
    n = _pool_sizes(model, granularity)
    k = masking.keep_count(s, n)
    gen = np.random.default_rng(seed)
    keep = np.zeros(n, dtype=bool)
    keep[gen.permutation(n)[:k]] = True
    return _mask_from_keep(model, granularity, keep, s)


def magnitude_scores(model: models.ModelState, granularity: str = "element") -> masking.ScoreSet:
    scores = {}
    for name in model.prunable:
        w = model.params[name].values
        if granularity == "element":
            scores[name] = Tensor(np.abs(w))
        else:
            scores[name] = Tensor(np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1)))
    return masking.ScoreSet(scores, granularity)


def prune_omp(model: models.ModelState, s: float, granularity: str = "element",
              scope: str = "global") -> masking.MaskState:
    """One-shot magnitude pruning: drop the globally smallest |weight|."""
    return masking.threshold(magnitude_scores(model, granularity), s, scope)


def _loss_and_grads(model: models.ModelState, canvases: np.ndarray, labels: np.ndarray,
                    names: list) -> tuple:
    tensors = [model.params[n] for n in names]
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        tape = Tape()
        with tape:
            logits = models.forward(model, Tensor(canvases))
            loss = softmax_cross_entropy(logits, labels)
        backward(tape, loss)
        grads = {n: model.params[n].grad.copy() for n in names}
    finally:
        for t, (rg, g) in zip(tensors, saved):
            t.requires_grad = rg
            t.grad = g
    return float(loss.values), grads


def prune_snip(model: models.ModelState, batch: tuple, s: float) -> masking.MaskState:
    """Saliency |grad * weight| on one canvas-composed batch, global threshold."""
    canvases, labels = batch
    if len(labels) == 0:
        raise PruneError("snip needs a non-empty batch")
    _, grads = _loss_and_grads(model, canvases, labels, list(model.prunable))
    scores = {n: Tensor(np.abs(grads[n] * model.params[n].values)) for n in model.prunable}
    return masking.threshold(masking.ScoreSet(scores, "element"), s)


def fd_hvp(grad_fn: Callable, theta: dict, vec: dict, eps: float) -> dict:
    """Central-difference Hessian-vector product of a gradient field."""
    plus = {n: theta[n] + eps * vec[n] for n in theta}
    minus = {n: theta[n] - eps * vec[n] for n in theta}
    gp = grad_fn(plus)
    gm = grad_fn(minus)
    return {n: (gp[n] - gm[n]) / (2.0 * eps) for n in theta}


def prune_grasp(model: models.ModelState, batch: tuple, s: float) -> masking.MaskState:
    """Gradient-flow scores -theta * (H g); keep the largest signed scores.

    The Hessian-vector product uses central finite differences of the batch
    gradient with step 1e-2 / ||g||.
    """
    canvases, labels = batch
    if len(labels) == 0:
        raise PruneError("grasp needs a non-empty batch")
    names = [n for n in model.params]
    theta0 = {n: model.params[n].values.copy() for n in names}

    def grad_fn(theta: dict) -> dict:
        for n in names:
            model.params[n].values[...] = theta[n]
        try:
            _, grads = _loss_and_grads(model, canvases, labels, names)
        finally:
            for n in names:
                model.params[n].values[...] = theta0[n]
        return grads

    g = grad_fn(theta0)
    gnorm = math.sqrt(sum(float((gv.astype(np.float64) ** 2).sum()) for gv in g.values()))
    if gnorm < 1e-12:
        raise PruneError("grasp: batch gradient is zero, scores undefined")
    hg = fd_hvp(grad_fn, theta0, g, eps=1e-2 / gnorm)
    scores = {n: -theta0[n] * hg[n] for n in model.prunable}
    flat = np.concatenate([scores[n].ravel() for n in model.prunable])
    k = masking.keep_count(s, flat.size)
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:k]] = True
    return _mask_from_keep(model, "element", keep, s)


def synflow_scores(model: models.ModelState, mask: masking.MaskState) -> dict:
    """|theta * dR/dtheta| with all parameters replaced by their magnitudes and
    R the summed output of an all-ones canvas input. Consumes no data."""
    saved = {n: t.values.copy() for n, t in model.params.items()}
    for t in model.params.values():
        t.values[...] = np.abs(t.values)
    prune_tensors = [model.params[n] for n in model.prunable]
    flags = [t.requires_grad for t in prune_tensors]
    for t in prune_tensors:
        t.requires_grad = True
        t.grad = None
    try:
        ones = Tensor(np.ones((1, model.spec.in_channels, model.spec.canvas,
                               model.spec.canvas), dtype=np.float32))
        tape = Tape()
        with tape:
            logits = masking.masked_forward(model, mask, ones)
            total = linear(logits, Tensor(np.ones((1, model.spec.classes), dtype=np.float32)))
        backward(tape, total)
        scores = {
            n: np.abs(model.params[n].values * model.params[n].grad) for n in model.prunable
        }
    finally:
        for t, flag in zip(prune_tensors, flags):
            t.requires_grad = flag
            t.grad = None
        for n, vals in saved.items():
            model.params[n].values[...] = vals
    return scores


def prune_synflow(model: models.ModelState, s: float, iterations: int = 100) -> masking.MaskState:
    """Data-free iterative pruning on an exponential sparsity schedule."""
    if not 0.0 <= s < 1.0:
        raise PruneError(f"sparsity {s} outside [0, 1)")
    n = _pool_sizes(model, "element")
    mask = masking.identity_mask(model, "element")
    for step in range(1, iterations + 1):
        target = 1.0 - (1.0 - s) ** (step / iterations)
        k = masking.keep_count(target, n)
        scores = synflow_scores(model, mask)
        pool = np.concatenate([np.abs(scores[m].ravel()) for m in model.prunable])
        kept = np.concatenate([mask.masks[m].ravel() for m in model.prunable]).astype(bool)
        pool = np.where(kept, pool, -1.0)  # already-pruned entries never return
        order = np.argsort(-pool, kind="stable")
        keep = np.zeros(n, dtype=bool)
        keep[order[:k]] = True
        mask = _mask_from_keep(model, "element", keep, target)
    mask.sparsity_target = s
    return mask


# --------------------------------------------------------------------------
# Score learning (with or without a visual prompt)


def _epoch_log(epoch: int, phase: str, losses: list, hits: int, seen: int,
               lr: float, steps: int) -> TrainLogRow:
    return TrainLogRow(epoch=epoch, phase=phase, loss=float(np.mean(losses)),
                       train_acc=hits / max(seen, 1), lr=lr, steps=steps)


def find_mask(model: models.ModelState, ds: Dataset, s: float,
              prompt_spec: Optional[prompting.PromptSpec], epochs: int, *,
              granularity: str = "element", scope: str = "global",
              batch_size: int = 32, seed: int = 0, lr: float = 1e-4,
              refresh: str = "epoch", train_head: bool = True) -> tuple:
    """Learn importance scores (and optionally a prompt) with frozen weights.

    Returns (mask, scores, prompt_state, log_rows). The mask is refreshed
    from the scores once per epoch (or per step when refresh="step").
    """
    if epochs < 0:
        raise PruneError("mask-finding epochs must be >= 0")
    if refresh not in ("epoch", "step"):
        raise PruneError(f"unknown refresh cadence {refresh!r}")
    model = model.clone()  # the head trains here; the caller's weights stay put
    backbone = {n: t.values.copy() for n, t in model.params.items()}
    scores = masking.scaled_init(model, granularity)
    mask = masking.threshold(scores, s, scope)
    prompt = None
    if prompt_spec is not None:
        prompt = prompting.make_prompt(prompt_spec, child_seed(seed, "prompt"))
        input_size, canvas = prompt_spec.input_size, prompt_spec.canvas_size
    else:
        input_size, canvas = min(ds.images.shape[-1], model.spec.canvas), model.spec.canvas
    canvases = prompting.resize_and_pad(ds.images, input_size, canvas)

    trainables = scores.tensors()
    head = model.spec.head_index()
    head_params = [model.params[f"linear{head}.weight"], model.params[f"linear{head}.bias"]]
    head_flags = [t.requires_grad for t in head_params]
    if train_head:
        for t in head_params:
            t.requires_grad = True
        trainables = trainables + head_params
    if prompt is not None and prompting.tunable_count(prompt.spec) > 0:
        trainables = trainables + [prompt.delta]
    opt = make_adam(trainables, lr)
    idx_per_epoch = [batch_indices(len(ds), batch_size, child_seed(seed, "find"), e)
                     for e in range(epochs)]
    total_steps = sum(len(b) for b in idx_per_epoch)
    log: list[TrainLogRow] = []
    step = 0
    try:
        for epoch in range(epochs):
            losses, hits, seen = [], 0, 0
            lr_epoch = cosine_lr(step, max(total_steps, 1), lr)
            for idx in idx_per_epoch[epoch]:
                opt.lr = cosine_lr(step, max(total_steps, 1), lr)
                tape = Tape()
                with tape:
                    x = Tensor(canvases[idx])
                    if prompt is not None:
                        x = prompting.apply_delta(x, prompt, training=True)
                    logits = masking.masked_forward(model, mask, x, scores=scores)
                    loss = softmax_cross_entropy(logits, ds.labels[idx])
                backward(tape, loss)
                optimizer_step(opt)
                zero_grads(trainables)
                tape.clear()
                losses.append(float(loss.values))
                hits += int((logits.values.argmax(axis=1) == ds.labels[idx]).sum())
                seen += len(idx)
                step += 1
                if refresh == "step":
                    mask = masking.threshold(scores, s, scope)
            if refresh == "epoch":
                mask = masking.threshold(scores, s, scope)
            log.append(_epoch_log(epoch, "mask_finding", losses, hits, seen, lr_epoch,
                                  len(idx_per_epoch[epoch])))
    finally:
        for t, flag in zip(head_params, head_flags):
            t.requires_grad = flag
    for name, vals in backbone.items():
        if name not in (f"linear{head}.weight", f"linear{head}.bias"):
            if not np.array_equal(model.params[name].values, vals):
                raise PruneError(f"frozen weight {name!r} changed during mask finding")
    return mask, scores, prompt, log


def prune_hydra(model: models.ModelState, ds: Dataset, s: float, epochs: int,
                **kw) -> PruneResult:
    """Score learning without any prompt; epochs=0 returns the init-threshold mask."""
    mask, scores, _, log = find_mask(model, ds, s, None, epochs, **kw)
    return PruneResult("hydra", mask, scores, None, None, log,
                       masking.sparsity_of(mask))


def prune_vpns(model: models.ModelState, ds: Dataset, s: float,
               prompt_spec: prompting.PromptSpec, epochs: int, **kw) -> PruneResult:
    """Joint prompt and score optimization with frozen weights."""
    if prompt_spec is None or prompt_spec.kind == "none":
        raise PruneError("vpns needs a prompt kind other than 'none'; use prune_hydra")
    mask, scores, prompt, log = find_mask(model, ds, s, prompt_spec, epochs, **kw)
    return PruneResult("vpns", mask, scores, prompt, None, log,
                       masking.sparsity_of(mask))


# --------------------------------------------------------------------------
# Subnetwork tuning


def tune_subnetwork(model: models.ModelState, mask: masking.MaskState, ds: Dataset,
                    prompt: Optional[prompting.PromptState], epochs: int, *,
                    batch_size: int = 32, seed: int = 0, lr: float = 0.01,
                    momentum: float = 0.9, weight_decay: float = 1e-4,
                    prompt_lr: float = 1e-4, phase: str = "tuning") -> tuple:
    """Fine-tune the masked network from the given weights; pruned entries
    stay pruned. Returns (tuned ModelState, prompt, log rows)."""
    tuned = model.clone()
    params = tuned.param_tensors()
    for t in params:
        t.requires_grad = True
    opt = make_sgd(params, lr, momentum=momentum, weight_decay=weight_decay)
    prompt_opt = None
    if prompt is not None:
        prompt = prompt.clone()
        if prompting.tunable_count(prompt.spec) > 0:
            prompt_opt = make_adam([prompt.delta], prompt_lr)
        input_size, canvas = prompt.spec.input_size, prompt.spec.canvas_size
    else:
        input_size, canvas = min(ds.images.shape[-1], tuned.spec.canvas), tuned.spec.canvas
    canvases = prompting.resize_and_pad(ds.images, input_size, canvas)
    idx_per_epoch = [batch_indices(len(ds), batch_size, child_seed(seed, "tune"), e)
                     for e in range(epochs)]
    total_steps = sum(len(b) for b in idx_per_epoch)
    log: list[TrainLogRow] = []
    step = 0
    for epoch in range(epochs):
        losses, hits, seen = [], 0, 0
        lr_epoch = cosine_lr(step, max(total_steps, 1), lr)
        for idx in idx_per_epoch[epoch]:
            opt.lr = cosine_lr(step, max(total_steps, 1), lr)
            if prompt_opt is not None:
                prompt_opt.lr = cosine_lr(step, max(total_steps, 1), prompt_lr)
            tape = Tape()
            with tape:
                x = Tensor(canvases[idx])
                if prompt is not None:
                    x = prompting.apply_delta(x, prompt, training=True)
                logits = masking.masked_forward(tuned, mask, x)
                loss = softmax_cross_entropy(logits, ds.labels[idx])
            backward(tape, loss)
            optimizer_step(opt)
            if prompt_opt is not None:
                optimizer_step(prompt_opt)
            zero_grads(params)
            if prompt is not None:
                prompt.delta.zero_grad()
            tape.clear()
            losses.append(float(loss.values))
            hits += int((logits.values.argmax(axis=1) == ds.labels[idx]).sum())
            seen += len(idx)
            step += 1
        log.append(_epoch_log(epoch, phase, losses, hits, seen, lr_epoch,
                              len(idx_per_epoch[epoch])))
    for t in params:
        t.requires_grad = False
    return tuned, prompt, log


def prune_imp(model: models.ModelState, ds: Dataset, s_final: float,
              round_epochs: int, *, batch_size: int = 32, seed: int = 0,
              lr: float = 0.01, momentum: float = 0.9,
              weight_decay: float = 1e-4) -> PruneResult:
    """Iterative magnitude pruning: tune, drop 20% of the remaining weights by
    tuned magnitude, rewind to the pretrained weights, repeat until the target
    sparsity is met. Masks nest across rounds."""
    if not 0.0 <= s_final < 1.0:
        raise PruneError(f"sparsity {s_final} outside [0, 1)")
    n = _pool_sizes(model, "element")
    mask = masking.identity_mask(model, "element")
    log: list[TrainLogRow] = []
    if s_final == 0.0:
        return PruneResult("imp", mask, None, None, None, log, 0.0)
    rounds = math.ceil(math.log(1.0 - s_final) / math.log(0.8))
    for r in range(1, rounds + 1):
        tuned, _, rows = tune_subnetwork(
            model, mask, ds, None, round_epochs, batch_size=batch_size,
            seed=child_seed(seed, "imp", r), lr=lr, momentum=momentum,
            weight_decay=weight_decay, phase=f"imp_round_{r}")
        log.extend(rows)
        k = int(np.floor(0.8 ** r * n + 1e-9))
        pool = np.concatenate([np.abs(tuned.params[m].values.ravel())
                               for m in model.prunable])
        kept = np.concatenate([mask.masks[m].ravel() for m in model.prunable]).astype(bool)
        pool = np.where(kept, pool, -1.0)
        order = np.argsort(-pool, kind="stable")
        keep = np.zeros(n, dtype=bool)
        keep[order[:k]] = True
        mask = _mask_from_keep(model, "element", keep, 1.0 - 0.8 ** r)
        # weights rewind implicitly: the next round tunes a fresh clone of `model`
    mask.sparsity_target = s_final
    return PruneResult("imp", mask, None, None, None, log, masking.sparsity_of(mask))


# --------------------------------------------------------------------------
# Post-pruning prompt (pilot protocol)


def train_prompt_only(model: models.ModelState, mask: masking.MaskState, ds: Dataset,
                      prompt_spec: prompting.PromptSpec, epochs: int, *,
                      batch_size: int = 32, seed: int = 0, lr: float = 1e-4) -> tuple:
    """Train only the prompt against fully frozen masked weights."""
    prompt = prompting.make_prompt(prompt_spec, child_seed(seed, "prompt"))
    canvases = prompting.resize_and_pad(ds.images, prompt_spec.input_size,
                                        prompt_spec.canvas_size)
    log: list[TrainLogRow] = []
    if prompting.tunable_count(prompt_spec) == 0 or epochs == 0:
        return prompt, log
    effective = masking.effective_weights(model, mask)
    opt = make_adam([prompt.delta], lr)
    idx_per_epoch = [batch_indices(len(ds), batch_size, child_seed(seed, "prompt-train"), e)
                     for e in range(epochs)]
    total_steps = sum(len(b) for b in idx_per_epoch)
    step = 0
    for epoch in range(epochs):
        losses, hits, seen = [], 0, 0
        lr_epoch = cosine_lr(step, total_steps, lr)
        for idx in idx_per_epoch[epoch]:
            opt.lr = cosine_lr(step, total_steps, lr)
            tape = Tape()
            with tape:
                x = prompting.apply_delta(Tensor(canvases[idx]), prompt, training=True)
                logits = models.forward(model, x, effective=effective)
                loss = softmax_cross_entropy(logits, ds.labels[idx])
            backward(tape, loss)
            optimizer_step(opt)
            prompt.delta.zero_grad()
            tape.clear()
            losses.append(float(loss.values))
            hits += int((logits.values.argmax(axis=1) == ds.labels[idx]).sum())
            seen += len(idx)
            step += 1
        log.append(_epoch_log(epoch, "prompt", losses, hits, seen, lr_epoch,
                              len(idx_per_epoch[epoch])))
    return prompt, log


def post_pruning_prompt(model: models.ModelState, mask: masking.MaskState,
                        train_ds: Dataset, test_ds: Dataset,
                        prompt_spec: prompting.PromptSpec, mode: str, epochs: int, *,
                        tune_epochs: int = 40, batch_size: int = 32,
                        seed: int = 0, prompt_lr: float = 0.01) -> tuple:
    """Prompt a finished subnetwork. Returns (prompt, acc_without, acc_with).

    zero_shot trains the prompt against the frozen masked weights;
    after_finetune first tunes the subnetwork promptless, then trains the
    prompt on the tuned weights.
    """
    if mode not in ("zero_shot", "after_finetune"):
        raise PruneError(f"unknown pilot mode {mode!r}")
    if mode == "after_finetune":
        model, _, _ = tune_subnetwork(model, mask, train_ds, None, tune_epochs,
                                      batch_size=batch_size, seed=seed)
    acc_without = evaluate(model, test_ds, mask, input_size=prompt_spec.input_size)
    prompt, _ = train_prompt_only(model, mask, train_ds, prompt_spec, epochs,
                                  batch_size=batch_size, seed=seed, lr=prompt_lr)
    acc_with = evaluate(model, test_ds, mask, prompt=prompt)
    return prompt, acc_without, acc_with


# --------------------------------------------------------------------------
# Full pipeline per method


def _none_spec_like(spec: Optional[prompting.PromptSpec], model: models.ModelState,
                    ds: Dataset) -> prompting.PromptSpec:
    if spec is not None:
        return prompting.PromptSpec("none", spec.canvas_size, spec.input_size, 0,
                                    spec.channels)
    return prompting.PromptSpec("none", model.spec.canvas,
                                min(ds.images.shape[-1], model.spec.canvas), 0,
                                ds.channels)


def _saliency_batch(model: models.ModelState, ds: Dataset, method: PruneMethod,
                    seed: int) -> tuple:
    geom = _none_spec_like(method.prompt, model, ds)
    idx = batch_indices(len(ds), method.batch_size, child_seed(seed, "saliency"), 0)[0]
    canvases = prompting.resize_and_pad(ds.images[idx], geom.input_size, geom.canvas_size)
    return canvases, ds.labels[idx]


def find_stage(model: models.ModelState, method: PruneMethod, train_ds: Dataset,
               seed: int = 0) -> tuple:
    """Mask-finding phase only. Returns (mask, scores, prompt_state, log rows)."""
    s = method.sparsity
    if method.kind == "random":
        return prune_random(model, s, child_seed(seed, "random-mask"),
                            method.granularity), None, None, []
    if method.kind == "omp":
        return prune_omp(model, s, method.granularity, method.scope), None, None, []
    if method.kind == "snip":
        return prune_snip(model, _saliency_batch(model, train_ds, method, seed),
                          s), None, None, []
    if method.kind == "grasp":
        return prune_grasp(model, _saliency_batch(model, train_ds, method, seed),
                           s), None, None, []
    if method.kind == "synflow":
        return prune_synflow(model, s, method.synflow_iterations), None, None, []
    if method.kind == "imp":
        res = prune_imp(model, train_ds, s, method.imp_round_epochs,
                        batch_size=method.batch_size, seed=seed, lr=method.tune_lr,
                        momentum=method.momentum, weight_decay=method.weight_decay)
        return res.mask, None, None, list(res.log)
    finding_prompt = None
    if method.kind == "vpns" and method.prompt_in_finding:
        finding_prompt = method.prompt
    mask, scores, prompt, rows = find_mask(
        model, train_ds, s, finding_prompt, method.mask_epochs,
        granularity=method.granularity, scope=method.scope,
        batch_size=method.batch_size, seed=seed, lr=method.mask_lr,
        refresh=method.mask_refresh)
    return mask, scores, prompt, list(rows)


def tune_stage(model: models.ModelState, method: PruneMethod, mask: masking.MaskState,
               found_prompt: Optional[prompting.PromptState], train_ds: Dataset,
               seed: int = 0) -> tuple:
    """Subnetwork-tuning phase. Returns (tuned model, prompt, log rows)."""
    tune_prompt = None
    if method.prompt is not None and method.prompt.kind != "none" and method.prompt_in_tuning:
        if found_prompt is not None:
            tune_prompt = found_prompt
        else:
            tune_prompt = prompting.make_prompt(method.prompt, child_seed(seed, "prompt"))
    return tune_subnetwork(
        model, mask, train_ds, tune_prompt, method.tune_epochs,
        batch_size=method.batch_size, seed=seed, lr=method.tune_lr,
        momentum=method.momentum, weight_decay=method.weight_decay)


def run_method(model: models.ModelState, method: PruneMethod, train_ds: Dataset,
               test_ds: Optional[Dataset] = None, seed: int = 0) -> PruneResult:
    """Find a mask with the given method, then tune the subnetwork.

    The prompt, when configured, joins mask finding only for vpns and joins
    tuning for any method unless disabled.
    """
    mask, scores, found_prompt, log = find_stage(model, method, train_ds, seed)
    tuned, tuned_prompt, rows = tune_stage(model, method, mask, found_prompt,
                                           train_ds, seed)
    log = log + rows
    final_prompt = tuned_prompt if tuned_prompt is not None else found_prompt
    return PruneResult(method.kind, mask, scores, final_prompt, tuned, log,
                       masking.sparsity_of(mask))


# --------------------------------------------------------------------------
# Run directory serialization


def save_result(dirpath, result: PruneResult, model: models.ModelState) -> None:
    os.makedirs(dirpath, exist_ok=True)
    masking.save_mask(os.path.join(dirpath, "mask.cspk"), result.mask, model, result.scores)
    if result.prompt is not None:
        prompting.save_prompt(os.path.join(dirpath, "prompt.cspk"), result.prompt,
                              model.spec.digest())
    if result.model is not None:
        models.save_checkpoint(result.model, os.path.join(dirpath, "tuned.cspk"),
                               {"method": result.method})
    with open(os.path.join(dirpath, "log.jsonl"), "w", encoding="utf-8") as fh:
        for row in result.log:
            fh.write(json.dumps({"epoch": row.epoch, "phase": row.phase,
                                 "loss": row.loss, "train_acc": row.train_acc,
                                 "lr": row.lr, "steps": row.steps}) + "\n")
