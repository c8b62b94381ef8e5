"""Experiment orchestration: configuration files, pretraining, sparsity
sweeps, cross-dataset transfer, the post-pruning-prompt pilot protocol,
prompt-design ablations, and deterministic report emission.

Reports are reproducible bit-for-bit from (config, seeds) except for the
wall_time column. Sweep cells are independent; COSPARSE_THREADS > 1 runs
them on a thread pool with order-stable output.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import masking, models, prompting, pruners
from .data import Dataset, SyntheticSpec, batch_indices, synth_generate
from .seeding import child_seed
from .tensor import Tape, Tensor, backward, cosine_lr, make_sgd, optimizer_step, \
    softmax_cross_entropy, zero_grads


class ConfigError(ValueError):
    pass


DEFAULT_SPARSITIES = (0.20, 0.59, 0.8926, 0.956)
# reference pad/input grids, defined at canvas 224 and rescaled to smaller ones
REFERENCE_CANVAS = 224
REFERENCE_PAD_GRID = (16, 32, 64)
REFERENCE_INPUT_GRID = (128, 160, 192, 224)

EXPERIMENT_COLUMNS = (
    "method", "sparsity", "seed", "dense_acc", "subnet_acc", "achieved_sparsity",
    "flops_speedup", "memory_reduction", "prompt_param_count", "epochs_used",
    "steps_used", "wall_time", "transfer",
)
PILOT_COLUMNS = (
    "method", "sparsity", "seed", "mode", "acc_without", "acc_with", "delta",
    "wall_time",
)
_FLOAT_COLUMNS = {
    "sparsity", "dense_acc", "subnet_acc", "achieved_sparsity", "flops_speedup",
    "memory_reduction", "wall_time", "acc_without", "acc_with", "delta",
}


def scaled_grid(reference: tuple, canvas: int) -> tuple:
    """Rescale a canvas-224 pixel grid to another canvas size."""
    return tuple(max(1, round(canvas * v / REFERENCE_CANVAS)) for v in reference)


@dataclass
class ExperimentConfig:
    name: str = "run"
    seeds: tuple = (0, 1, 2)
    model: str = "cnn-s"
    canvas: int = 32
    sparsities: tuple = DEFAULT_SPARSITIES
    methods: tuple = ("omp", "hydra", "vpns")
    granularity: str = "element"
    scope: str = "global"
    out_dir: str = "runs/out"
    upstream: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        "shapes", 4, 400, 24, 0.1, 7))
    downstream: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        "textures", 4, 400, 24, 0.1, 11))
    prompt_kind: str = "pad"
    input_size: int = 24
    pad_size: int = 6
    batch_size: int = 16
    pretrain_epochs: int = 10
    pretrain_gate: float = 0.95
    pretrain_lr: float = 0.05
    mask_lr: float = 1e-4
    tune_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    vpns_mask_epochs: int = 10
    vpns_tune_epochs: int = 10
    hydra_mask_epochs: int = 20
    hydra_tune_epochs: int = 20
    oneshot_tune_epochs: int = 40
    imp_round_epochs: int = 4
    mask_refresh: str = "epoch"
    # pilot protocol
    pilot_methods: tuple = ("omp", "random")
    pilot_sparsities: tuple = (0.5, 0.956)
    pilot_prompt_epochs: int = 30
    pilot_prompt_lr: float = 0.03
    pilot_modes: tuple = ("zero_shot", "after_finetune")
    # ablation grids
    ablation_sparsity: float = 0.9
    ablation_input_sizes: tuple = ()
    ablation_pad_sizes: tuple = ()
    ablation_kind_params: tuple = ()  # ("pad:8", "fix:32", ...) matched-count grid
    ablation_phases: tuple = ("both", "finding", "tuning")
    ablation_canvas: Optional[int] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for s in tuple(self.sparsities) + tuple(self.pilot_sparsities) + (self.ablation_sparsity,):
            if not 0.0 <= s < 1.0:
                raise ConfigError(f"sparsity {s} outside [0, 1)")
        for name in self.methods:
            if _base_kind(name) not in pruners.ALL_KINDS:
                raise ConfigError(f"unknown method {name!r}")
        if self.prompt_kind not in prompting.PROMPT_KINDS:
            raise ConfigError(f"unknown prompt kind {self.prompt_kind!r}")
        if self.granularity not in masking.GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if max(self.upstream.size, self.downstream.size) > self.canvas:
            raise ConfigError("image size exceeds the model canvas")
        if self.upstream.num_classes != self.downstream.num_classes and self.pilot_methods:
            # the pilot keeps the pretrained head, so class counts must line up
            pass

    def prompt_spec(self, kind: Optional[str] = None, input_size: Optional[int] = None,
                    size_param: Optional[int] = None,
                    canvas: Optional[int] = None) -> prompting.PromptSpec:
        return prompting.PromptSpec(
            kind if kind is not None else self.prompt_kind,
            canvas if canvas is not None else self.canvas,
            input_size if input_size is not None else self.input_size,
            size_param if size_param is not None else self.pad_size,
            1,
        )


def _base_kind(method_name: str) -> str:
    return method_name.split("+")[0]


def _parse_tuple(text: str, cast) -> tuple:
    return tuple(cast(v.strip()) for v in text.split(",") if v.strip())


def load_config(path) -> ExperimentConfig:
    """Parse a key = value config file with [section] headers."""
    parser = configparser.ConfigParser()
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not read:
        raise ConfigError(f"config file {path} not found")
    defaults = ExperimentConfig()
    kwargs: dict = {}
    try:
        if parser.has_section("experiment"):
            sec = parser["experiment"]
            if "name" in sec:
                kwargs["name"] = sec["name"]
            if "seeds" in sec:
                kwargs["seeds"] = _parse_tuple(sec["seeds"], int)
            if "model" in sec:
                kwargs["model"] = sec["model"]
            if "canvas" in sec:
                kwargs["canvas"] = sec.getint("canvas")
            if "sparsities" in sec:
                kwargs["sparsities"] = _parse_tuple(sec["sparsities"], float)
            if "methods" in sec:
                kwargs["methods"] = _parse_tuple(sec["methods"], str)
            if "granularity" in sec:
                kwargs["granularity"] = sec["granularity"]
            if "scope" in sec:
                kwargs["scope"] = sec["scope"]
            if "out" in sec:
                kwargs["out_dir"] = sec["out"]
        for role in ("upstream", "downstream"):
            if parser.has_section(role):
                sec = parser[role]
                base: SyntheticSpec = getattr(defaults, role)
                kwargs[role] = SyntheticSpec(
                    sec.get("kind", base.kind),
                    sec.getint("classes", base.num_classes),
                    sec.getint("per_class", base.per_class),
                    sec.getint("size", base.size),
                    sec.getfloat("noise", base.noise),
                    sec.getint("seed", base.seed),
                )
        if parser.has_section("prompt"):
            sec = parser["prompt"]
            kwargs["prompt_kind"] = sec.get("kind", defaults.prompt_kind)
            kwargs["input_size"] = sec.getint("input_size", defaults.input_size)
            kwargs["pad_size"] = sec.getint("size_param", defaults.pad_size)
        if parser.has_section("train"):
            sec = parser["train"]
            kwargs["batch_size"] = sec.getint("batch_size", defaults.batch_size)
            kwargs["pretrain_epochs"] = sec.getint("pretrain_epochs", defaults.pretrain_epochs)
            kwargs["pretrain_gate"] = sec.getfloat("pretrain_gate", defaults.pretrain_gate)
            kwargs["pretrain_lr"] = sec.getfloat("pretrain_lr", defaults.pretrain_lr)
            kwargs["mask_lr"] = sec.getfloat("mask_lr", defaults.mask_lr)
            kwargs["tune_lr"] = sec.getfloat("tune_lr", defaults.tune_lr)
            kwargs["momentum"] = sec.getfloat("momentum", defaults.momentum)
            kwargs["weight_decay"] = sec.getfloat("weight_decay", defaults.weight_decay)
            kwargs["mask_refresh"] = sec.get("mask_refresh", defaults.mask_refresh)
        if parser.has_section("budgets"):
            sec = parser["budgets"]
            kwargs["vpns_mask_epochs"] = sec.getint("vpns_mask", defaults.vpns_mask_epochs)
            kwargs["vpns_tune_epochs"] = sec.getint("vpns_tune", defaults.vpns_tune_epochs)
            kwargs["hydra_mask_epochs"] = sec.getint("hydra_mask", defaults.hydra_mask_epochs)
            kwargs["hydra_tune_epochs"] = sec.getint("hydra_tune", defaults.hydra_tune_epochs)
            kwargs["oneshot_tune_epochs"] = sec.getint("oneshot_tune",
                                                       defaults.oneshot_tune_epochs)
            kwargs["imp_round_epochs"] = sec.getint("imp_round", defaults.imp_round_epochs)
        if parser.has_section("pilot"):
            sec = parser["pilot"]
            if "methods" in sec:
                kwargs["pilot_methods"] = _parse_tuple(sec["methods"], str)
            if "sparsities" in sec:
                kwargs["pilot_sparsities"] = _parse_tuple(sec["sparsities"], float)
            kwargs["pilot_prompt_epochs"] = sec.getint("prompt_epochs",
                                                       defaults.pilot_prompt_epochs)
            kwargs["pilot_prompt_lr"] = sec.getfloat("prompt_lr", defaults.pilot_prompt_lr)
            if "modes" in sec:
                kwargs["pilot_modes"] = _parse_tuple(sec["modes"], str)
        if parser.has_section("ablation"):
            sec = parser["ablation"]
            kwargs["ablation_sparsity"] = sec.getfloat("sparsity", defaults.ablation_sparsity)
            if "input_sizes" in sec:
                kwargs["ablation_input_sizes"] = _parse_tuple(sec["input_sizes"], int)
            if "pad_sizes" in sec:
                kwargs["ablation_pad_sizes"] = _parse_tuple(sec["pad_sizes"], int)
            if "kind_params" in sec:
                kwargs["ablation_kind_params"] = _parse_tuple(sec["kind_params"], str)
            if "phases" in sec:
                kwargs["ablation_phases"] = _parse_tuple(sec["phases"], str)
            if "canvas" in sec:
                kwargs["ablation_canvas"] = sec.getint("canvas")
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


# --------------------------------------------------------------------------
# Rows and reports


@dataclass
class ReportRow:
    method: str
    sparsity: float
    seed: int
    dense_acc: float
    subnet_acc: float
    achieved_sparsity: float
    flops_speedup: float
    memory_reduction: float
    prompt_param_count: int
    epochs_used: int
    steps_used: int
    wall_time: float
    transfer: bool = False


@dataclass
class PilotRow:
    method: str
    sparsity: float
    seed: int
    mode: str
    acc_without: float
    acc_with: float
    delta: float
    wall_time: float


@dataclass
class RunReport:
    kind: str  # "experiment" | "pilot"
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def columns(self) -> tuple:
        return EXPERIMENT_COLUMNS if self.kind == "experiment" else PILOT_COLUMNS

    def sort(self) -> None:
        if self.kind == "experiment":
            self.rows.sort(key=lambda r: (r.method, r.sparsity, r.seed))
        else:
            self.rows.sort(key=lambda r: (r.method, r.sparsity, r.seed, r.mode))


def _format_value(col: str, value) -> str:
    if col in _FLOAT_COLUMNS:
        return f"{float(value):.6f}"
    if col == "transfer":
        return "true" if value else "false"
    return str(value)


def emit_report(report: RunReport, path, format: str = "csv") -> None:
    """Write the report with fixed column order; empty reports are an error."""
    if not report.rows:
        raise ConfigError("refusing to emit an empty report")
    if format not in ("csv", "jsonl"):
        raise ConfigError(f"unknown report format {format!r}")
    cols = report.columns()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if format == "csv":
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in report.rows:
                writer.writerow([_format_value(c, getattr(row, c)) for c in cols])
        else:
            for row in report.rows:
                fh.write(json.dumps({c: getattr(row, c) for c in cols}) + "\n")


def read_report_csv(path) -> list:
    """Read an emitted CSV back into typed dicts."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            typed = {}
            for col, val in rec.items():
                if col in _FLOAT_COLUMNS:
                    typed[col] = float(val)
                elif col in ("seed", "prompt_param_count", "epochs_used", "steps_used"):
                    typed[col] = int(val)
                elif col == "transfer":
                    typed[col] = val == "true"
                else:
                    typed[col] = val
            out.append(typed)
    return out


def emit_curves(report: RunReport, path) -> None:
    """Per-method accuracy-vs-sparsity aggregates over seeds (mean, population std)."""
    if not report.rows:
        raise ConfigError("refusing to emit curves for an empty report")
    if report.kind != "experiment":
        raise ConfigError("curves are defined for experiment reports")
    groups: dict[tuple, list] = {}
    for row in report.rows:
        groups.setdefault((row.method, row.sparsity), []).append(row.subnet_acc)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "sparsity", "mean_acc", "std_acc", "n_seeds"])
        for (method, sparsity), accs in sorted(groups.items()):
            arr = np.asarray(accs, dtype=np.float64)
            writer.writerow([method, f"{sparsity:.6f}", f"{arr.mean():.6f}",
                             f"{arr.std():.6f}", len(arr)])


# --------------------------------------------------------------------------
# Pretraining


def pretrain(cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset):
    """Train the dense model on the upstream task until the accuracy gate or
    the epoch budget, then freeze that snapshot as the pretrained weights."""
    spec = models.zoo_spec(cfg.model, train.channels, cfg.canvas, train.num_classes)
    state = models.build_model(spec, child_seed(seed, "init"))
    params = state.param_tensors()
    for t in params:
        t.requires_grad = True
    opt = make_sgd(params, cfg.pretrain_lr, momentum=cfg.momentum,
                   weight_decay=cfg.weight_decay)
    input_size = min(train.images.shape[-1], cfg.canvas)
    canvases = prompting.resize_and_pad(train.images, input_size, cfg.canvas)
    idx_per_epoch = [batch_indices(len(train), cfg.batch_size, child_seed(seed, "pretrain"), e)
                     for e in range(cfg.pretrain_epochs)]
    total_steps = sum(len(b) for b in idx_per_epoch)
    log = []
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        losses, hits, seen = [], 0, 0
        lr_epoch = cosine_lr(step, max(total_steps, 1), cfg.pretrain_lr)
        for idx in idx_per_epoch[epoch]:
            opt.lr = cosine_lr(step, max(total_steps, 1), cfg.pretrain_lr)
            tape = Tape()
            with tape:
                logits = models.forward(state, Tensor(canvases[idx]))
                loss = softmax_cross_entropy(logits, train.labels[idx])
            backward(tape, loss)
            optimizer_step(opt)
            zero_grads(params)
            tape.clear()
            losses.append(float(loss.values))
            hits += int((logits.values.argmax(axis=1) == train.labels[idx]).sum())
            seen += len(idx)
            step += 1
        log.append(pruners.TrainLogRow(epoch, "pretrain", float(np.mean(losses)),
                                       hits / seen, lr_epoch, len(idx_per_epoch[epoch])))
        test_acc = pruners.evaluate(state, test, input_size=input_size)
        if test_acc >= cfg.pretrain_gate:
            break
    for t in params:
        t.requires_grad = False
    return state, log


def get_pretrained(cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset):
    """Load the cached pretrained checkpoint for this seed, or create it."""
    path = os.path.join(cfg.out_dir, f"seed{seed}", "pretrained.cspk")
    spec = models.zoo_spec(cfg.model, train.channels, cfg.canvas, train.num_classes)
    if os.path.exists(path):
        return models.load_checkpoint(path, spec)
    state, _ = pretrain(cfg, seed, train, test)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    models.save_checkpoint(state, path, {"seed": seed, "dataset": train.name,
                                         "provenance": "pretrain"})
    return state


# --------------------------------------------------------------------------
# Method construction


def build_method(cfg: ExperimentConfig, method_name: str, sparsity: float,
                 prompt_override: Optional[prompting.PromptSpec] = None,
                 prompt_in_finding: bool = True,
                 prompt_in_tuning: bool = True) -> pruners.PruneMethod:
    """Translate a config method name ("omp", "vpns", "omp+vp", ...) into a
    concrete method: "+vp" attaches the prompt to any baseline's tuning phase."""
    kind = _base_kind(method_name)
    with_vp = method_name.endswith("+vp") or kind == "vpns"
    prompt = None
    if with_vp:
        prompt = prompt_override if prompt_override is not None else cfg.prompt_spec()
        if prompt.kind == "none":
            raise ConfigError(f"method {method_name!r} needs a non-trivial prompt")
    if kind == "vpns":
        mask_epochs, tune_epochs = cfg.vpns_mask_epochs, cfg.vpns_tune_epochs
    elif kind == "hydra":
        mask_epochs, tune_epochs = cfg.hydra_mask_epochs, cfg.hydra_tune_epochs
    else:
        mask_epochs, tune_epochs = 0, cfg.oneshot_tune_epochs
    return pruners.PruneMethod(
        kind=kind, sparsity=sparsity, granularity=cfg.granularity, scope=cfg.scope,
        mask_epochs=mask_epochs, tune_epochs=tune_epochs,
        imp_round_epochs=cfg.imp_round_epochs, mask_refresh=cfg.mask_refresh,
        prompt=prompt, prompt_in_finding=prompt_in_finding,
        prompt_in_tuning=prompt_in_tuning, mask_lr=cfg.mask_lr, tune_lr=cfg.tune_lr,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size)


def _dense_method(cfg: ExperimentConfig) -> pruners.PruneMethod:
    return pruners.PruneMethod(
        kind="omp", sparsity=0.0, granularity=cfg.granularity,
        mask_epochs=0, tune_epochs=cfg.oneshot_tune_epochs, mask_lr=cfg.mask_lr,
        tune_lr=cfg.tune_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size)


def _eval_result(model, result: pruners.PruneResult, test_ds: Dataset,
                 fallback_input: int) -> float:
    if result.prompt is not None:
        return pruners.evaluate(result.model, test_ds, result.mask, prompt=result.prompt)
    return pruners.evaluate(result.model, test_ds, result.mask, input_size=fallback_input)


def _row_metrics(model, result: pruners.PruneResult) -> tuple:
    """(achieved sparsity, flops speedup, memory reduction, prompt params),
    all recomputed from the produced artifacts."""
    achieved = masking.sparsity_of(result.mask)
    if result.mask.granularity == "channel":
        speedup = models.speedup_ratio(model, result.mask)
    else:
        speedup = 1.0
    memred = masking.memory_reduction(result.mask, model)
    pcount = 0
    if result.prompt is not None:
        pcount = int(round(float(result.prompt.tunable_mask.sum())))
    return achieved, speedup, memred, pcount


# --------------------------------------------------------------------------
# Sweeps


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("COSPARSE_THREADS", "1")))
    except ValueError:
        return 1


def _run_cells(cells: list, report: RunReport, flush_path: Optional[str]) -> None:
    """Execute sweep cells, recording error rows instead of aborting."""
    lock = threading.Lock()

    def run_one(cell) -> None:
        label, fn = cell
        try:
            row = fn()
        except Exception as exc:  # error rows keep long sweeps alive
            with lock:
                report.errors.append({**label, "error": f"{type(exc).__name__}: {exc}"})
            return
        with lock:
            report.rows.append(row)
            if flush_path:
                with open(flush_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(
                        {c: getattr(row, c) for c in report.columns()}) + "\n")

    workers = _thread_count()
    if workers == 1:
        for cell in cells:
            run_one(cell)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, cells))
    report.sort()


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Prune and tune on the downstream task for every (method, sparsity, seed)."""
    up_train, up_test = synth_generate(cfg.upstream)
    down_train, down_test = synth_generate(cfg.downstream)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = RunReport("experiment")
    flush = os.path.join(cfg.out_dir, "rows.jsonl")
    if os.path.exists(flush):
        os.remove(flush)
    fallback_input = min(cfg.downstream.size, cfg.canvas)
    cells = []
    for seed in cfg.seeds:
        pre = get_pretrained(cfg, seed, up_train, up_test)
        base = models.reinit_head(pre, child_seed(seed, "head", down_train.name))
        dense = pruners.run_method(base, _dense_method(cfg), down_train, seed=seed)
        dense_acc = pruners.evaluate(dense.model, down_test, dense.mask,
                                     input_size=fallback_input)
        for method_name in cfg.methods:
            for s in cfg.sparsities:
                def cell(method_name=method_name, s=s, seed=seed, base=base,
                         dense_acc=dense_acc) -> ReportRow:
                    t0 = time.perf_counter()
                    method = build_method(cfg, method_name, s)
                    result = pruners.run_method(base, method, down_train, seed=seed)
                    acc = _eval_result(base, result, down_test, fallback_input)
                    achieved, speedup, memred, pcount = _row_metrics(base, result)
                    run_dir = os.path.join(cfg.out_dir, f"seed{seed}",
                                           f"{method_name}_s{s:g}")
                    pruners.save_result(run_dir, result, base)
                    return ReportRow(method_name, s, seed, dense_acc, acc, achieved,
                                     speedup, memred, pcount, result.epochs_used,
                                     result.steps_used, time.perf_counter() - t0)
                cells.append(({"method": method_name, "sparsity": s, "seed": seed}, cell))
    _run_cells(cells, report, flush)
    _write_errors(cfg, report)
    return report


def run_transfer(cfg: ExperimentConfig) -> RunReport:
    """Find masks on the upstream (source) task, tune them on the downstream
    (target) task with a fresh head."""
    up_train, up_test = synth_generate(cfg.upstream)
    down_train, down_test = synth_generate(cfg.downstream)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = RunReport("experiment")
    fallback_input = min(cfg.downstream.size, cfg.canvas)
    cells = []
    for seed in cfg.seeds:
        pre = get_pretrained(cfg, seed, up_train, up_test)
        target_base = models.reinit_head(pre, child_seed(seed, "head", down_train.name))
        dense = pruners.run_method(target_base, _dense_method(cfg), down_train, seed=seed)
        dense_acc = pruners.evaluate(dense.model, down_test, dense.mask,
                                     input_size=fallback_input)
        for method_name in cfg.methods:
            for s in cfg.sparsities:
                def cell(method_name=method_name, s=s, seed=seed, pre=pre,
                         target_base=target_base, dense_acc=dense_acc) -> ReportRow:
                    t0 = time.perf_counter()
                    method = build_method(cfg, method_name, s)
                    mask, scores, prompt, log = pruners.find_stage(pre, method,
                                                                   up_train, seed)
                    src_dir = os.path.join(cfg.out_dir, f"seed{seed}",
                                           f"transfer_{method_name}_s{s:g}")
                    os.makedirs(src_dir, exist_ok=True)
                    mask_path = os.path.join(src_dir, "mask.cspk")
                    masking.save_mask(mask_path, mask, pre, scores)
                    reused_mask, _ = masking.load_mask(mask_path, target_base)
                    tuned, tuned_prompt, rows = pruners.tune_stage(
                        target_base, method, reused_mask, prompt, down_train, seed)
                    result = pruners.PruneResult(method.kind, reused_mask, scores,
                                                 tuned_prompt or prompt, tuned,
                                                 log + rows,
                                                 masking.sparsity_of(reused_mask))
                    acc = _eval_result(target_base, result, down_test, fallback_input)
                    achieved, speedup, memred, pcount = _row_metrics(target_base, result)
                    return ReportRow(method_name, s, seed, dense_acc, acc, achieved,
                                     speedup, memred, pcount, result.epochs_used,
                                     result.steps_used, time.perf_counter() - t0,
                                     transfer=True)
                cells.append(({"method": method_name, "sparsity": s, "seed": seed,
                               "transfer": True}, cell))
    _run_cells(cells, report, None)
    _write_errors(cfg, report)
    return report


def run_pilot(cfg: ExperimentConfig) -> RunReport:
    """Post-pruning prompt study: paired accuracies with and without a prompt,
    in zero-shot and after-fine-tuning modes. Keeps the pretrained head, so
    upstream and downstream class counts must match."""
    if cfg.upstream.num_classes != cfg.downstream.num_classes:
        raise ConfigError("pilot protocol needs matching class counts")
    up_train, up_test = synth_generate(cfg.upstream)
    down_train, down_test = synth_generate(cfg.downstream)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = RunReport("pilot")
    cells = []
    for seed in cfg.seeds:
        pre = get_pretrained(cfg, seed, up_train, up_test)
        for method_name in cfg.pilot_methods:
            for s in cfg.pilot_sparsities:
                for mode in cfg.pilot_modes:
                    def cell(method_name=method_name, s=s, seed=seed, mode=mode,
                             pre=pre) -> PilotRow:
                        t0 = time.perf_counter()
                        method = build_method(cfg, method_name, s)
                        mask, _, _, _ = pruners.find_stage(pre, method, down_train, seed)
                        _, acc_wo, acc_w = pruners.post_pruning_prompt(
                            pre, mask, down_train, down_test, cfg.prompt_spec(),
                            mode, cfg.pilot_prompt_epochs,
                            tune_epochs=cfg.oneshot_tune_epochs,
                            batch_size=cfg.batch_size, seed=seed,
                            prompt_lr=cfg.pilot_prompt_lr)
                        return PilotRow(method_name, s, seed, mode, acc_wo, acc_w,
                                        acc_w - acc_wo, time.perf_counter() - t0)
                    cells.append(({"method": method_name, "sparsity": s, "seed": seed,
                                   "mode": mode}, cell))
    _run_cells(cells, report, None)
    _write_errors(cfg, report)
    return report


def ablation_variants(cfg: ExperimentConfig) -> list:
    """Expand the ablation grids into labeled (name, prompt_spec, finding, tuning)."""
    canvas = cfg.ablation_canvas or cfg.canvas
    input_sizes = cfg.ablation_input_sizes or scaled_grid(REFERENCE_INPUT_GRID, canvas)
    pad_sizes = cfg.ablation_pad_sizes or scaled_grid(REFERENCE_PAD_GRID, canvas)
    variants = []
    for i in input_sizes:
        spec = cfg.prompt_spec(kind="pad", input_size=i, canvas=canvas)
        variants.append((f"vpns[input={i}]", spec, True, True))
    for p in pad_sizes:
        spec = cfg.prompt_spec(kind="pad", size_param=p,
                               input_size=min(cfg.input_size, canvas), canvas=canvas)
        variants.append((f"vpns[pad={p}]", spec, True, True))
    if cfg.ablation_kind_params:
        kind_specs = []
        for item in cfg.ablation_kind_params:
            kind, _, val = item.partition(":")
            spec = cfg.prompt_spec(kind=kind.strip(), size_param=int(val),
                                   input_size=min(cfg.input_size, canvas), canvas=canvas)
            kind_specs.append(spec)
        counts = {prompting.tunable_count(s) for s in kind_specs}
        if len(counts) != 1:
            raise ConfigError(
                f"prompt-kind grid is not parameter-matched: counts {sorted(counts)}")
        for spec in kind_specs:
            variants.append((f"vpns[kind={spec.kind}]", spec, True, True))
    for phase in cfg.ablation_phases:
        if phase not in ("both", "finding", "tuning"):
            raise ConfigError(f"unknown ablation phase {phase!r}")
        spec = cfg.prompt_spec(canvas=canvas,
                               input_size=min(cfg.input_size, canvas))
        variants.append((f"vpns[vp={phase}]", spec,
                         phase in ("both", "finding"), phase in ("both", "tuning")))
    return variants


def run_ablation(cfg: ExperimentConfig) -> RunReport:
    """Prompt-design grid: input sizes, pad sizes, parameter-matched prompt
    kinds, and which phases the prompt participates in."""
    canvas = cfg.ablation_canvas or cfg.canvas
    up_train, up_test = synth_generate(cfg.upstream)
    down_train, down_test = synth_generate(cfg.downstream)
    acfg = replace(cfg, canvas=canvas,
                   out_dir=os.path.join(cfg.out_dir, "ablation"))
    os.makedirs(acfg.out_dir, exist_ok=True)
    report = RunReport("experiment")
    fallback_input = min(cfg.downstream.size, canvas)
    s = cfg.ablation_sparsity
    variants = ablation_variants(cfg)
    cells = []
    for seed in cfg.seeds:
        pre = get_pretrained(acfg, seed, up_train, up_test)
        base = models.reinit_head(pre, child_seed(seed, "head", down_train.name))
        dense = pruners.run_method(base, _dense_method(acfg), down_train, seed=seed)
        dense_acc = pruners.evaluate(dense.model, down_test, dense.mask,
                                     input_size=fallback_input)
        for label, spec, in_finding, in_tuning in variants:
            def cell(label=label, spec=spec, in_finding=in_finding,
                     in_tuning=in_tuning, seed=seed, base=base,
                     dense_acc=dense_acc) -> ReportRow:
                t0 = time.perf_counter()
                method = build_method(acfg, "vpns", s, prompt_override=spec,
                                      prompt_in_finding=in_finding,
                                      prompt_in_tuning=in_tuning)
                result = pruners.run_method(base, method, down_train, seed=seed)
                acc = _eval_result(base, result, down_test, fallback_input)
                achieved, speedup, memred, pcount = _row_metrics(base, result)
                return ReportRow(label, s, seed, dense_acc, acc, achieved, speedup,
                                 memred, pcount, result.epochs_used,
                                 result.steps_used, time.perf_counter() - t0)
            cells.append(({"method": label, "sparsity": s, "seed": seed}, cell))
    _run_cells(cells, report, None)
    _write_errors(cfg, report)
    return report


def _write_errors(cfg: ExperimentConfig, report: RunReport) -> None:
    if report.errors:
        path = os.path.join(cfg.out_dir, "errors.jsonl")
        with open(path, "a", encoding="utf-8") as fh:
            for err in report.errors:
                fh.write(json.dumps(err) + "\n")
