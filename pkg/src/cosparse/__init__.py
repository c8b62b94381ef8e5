"""cosparse: joint visual-prompt and weight-mask optimization for sparsifying
small vision models, benchmarked against classical pruning baselines."""

from .tensor import (
    Tensor, Tape, TensorError, backward, cosine_lr, op_forward,
    make_sgd, make_adam, optimizer_step, zero_grads,
)
from .models import ModelSpec, ModelState, build_model, param_count, flops_count, \
    save_checkpoint, load_checkpoint, zoo_spec
from .prompting import PromptSpec, PromptState, make_prompt, apply_prompt, \
    resize_and_pad, tunable_count
from .masking import ScoreSet, MaskState, scaled_init, threshold, masked_forward, \
    sparsity_of, memory_reduction
from .data import Dataset, SyntheticSpec, synth_generate, load_idx, load_csv, batches
from .pruners import PruneMethod, PruneResult, prune_random, prune_omp, prune_imp, \
    prune_snip, prune_grasp, prune_synflow, prune_hydra, prune_vpns, \
    tune_subnetwork, post_pruning_prompt, run_method, evaluate
from .harness import ExperimentConfig, RunReport, load_config, run_experiment, \
    run_transfer, run_pilot, run_ablation, emit_report, emit_curves

__version__ = "0.1.0"
