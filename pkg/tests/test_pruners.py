"""Pruning method tests: mask contracts, saliency oracles, score learning,
subnetwork tuning, and the post-pruning prompt protocol."""

import math

import numpy as np
import pytest

import oracles
from cosparse import masking, models, prompting, pruners
from cosparse import tensor as T
from cosparse.data import SyntheticSpec, batch_indices, synth_generate
from cosparse.models import Flatten, Linear, ModelSpec, Relu
from cosparse.prompting import PromptSpec
from cosparse.pruners import PruneError
from cosparse.seeding import child_seed


@pytest.fixture(scope="module")
def tiny_task():
    train, test = synth_generate(SyntheticSpec("textures", 3, 50, 16, 0.1, 21))
    return train, test


@pytest.fixture(scope="module")
def tiny_model():
    return models.build_model(models.zoo_spec("cnn-s", 1, 16, 3), seed=100)


def small_linear_net(weights_by_layer, classes=2):
    """Stack of prunable linear+relu blocks (plus head) with pinned weights."""
    in_feats = np.asarray(weights_by_layer[0]).shape[1]
    layers = [Flatten()]
    names = []
    for w in weights_by_layer:
        names.append(f"linear{len(layers)}.weight")
        layers.append(Linear(np.asarray(w).shape[0]))
        layers.append(Relu())
    layers.append(Linear(classes))
    spec = ModelSpec("pinned", in_feats, 1, tuple(layers), classes)
    state = models.build_model(spec, seed=0)
    for name, w in zip(names, weights_by_layer):
        state.params[name].values[...] = np.asarray(w, np.float32)
    return state


# --------------------------------------------------------------------------
# Random and magnitude masks


def test_random_zero_sparsity_is_identity(tiny_model):
    mask = pruners.prune_random(tiny_model, 0.0, seed=1)
    assert masking.sparsity_of(mask) == 0.0
    assert mask.kept() == mask.total()


def test_random_exact_cardinality_and_determinism(tiny_model):
    a = pruners.prune_random(tiny_model, 0.5, seed=9)
    b = pruners.prune_random(tiny_model, 0.5, seed=9)
    c = pruners.prune_random(tiny_model, 0.5, seed=10)
    n = a.total()
    assert a.kept() == n // 2
    assert masking.mask_digest(a) == masking.mask_digest(b)
    assert masking.mask_digest(a) != masking.mask_digest(c)


def test_random_small_pool_cardinality():
    state = small_linear_net([np.ones((2, 5), dtype=np.float32)])  # 10 prunable
    mask = pruners.prune_random(state, 0.5, seed=0)
    assert mask.kept() == 5


def test_omp_keeps_largest_magnitudes():
    state = small_linear_net([[[0.1, -5.0], [3.0, 0.01]]])
    mask = pruners.prune_omp(state, 0.5)
    assert np.array_equal(mask.masks["linear1.weight"], [[0, 1], [1, 0]])


def test_omp_cardinality_reference():
    gen = np.random.default_rng(3)
    state = small_linear_net([gen.normal(size=(20, 50)).astype(np.float32)])
    mask = pruners.prune_omp(state, 0.9)
    assert mask.kept() == 100


def test_omp_equals_threshold_of_scaled_init(tiny_model):
    # per-pool normalization preserves the magnitude argsort
    direct = pruners.prune_omp(tiny_model, 0.7)
    via_init = masking.threshold(masking.scaled_init(tiny_model), 0.7)
    assert masking.mask_digest(direct) == masking.mask_digest(via_init)


def test_omp_channel_granularity(tiny_model):
    mask = pruners.prune_omp(tiny_model, 0.5, granularity="channel")
    channels = sum(tiny_model.params[n].shape[0] for n in tiny_model.prunable)
    assert mask.total() == channels
    assert mask.kept() == channels // 2


# --------------------------------------------------------------------------
# IMP


def test_imp_schedule_and_nesting(tiny_task, tiny_model):
    train, _ = tiny_task
    res = pruners.prune_imp(tiny_model, train, 0.59, round_epochs=1, batch_size=16,
                            seed=0)
    # ceil(ln(0.41)/ln(0.8)) = 4 rounds
    assert res.achieved_sparsity >= 0.59
    assert abs(res.achieved_sparsity - (1 - 0.8 ** 4)) < 1e-3
    assert len(res.log) == 4


def test_imp_single_round_is_twenty_percent(tiny_task, tiny_model):
    train, _ = tiny_task
    res = pruners.prune_imp(tiny_model, train, 0.2, round_epochs=1, batch_size=16,
                            seed=0)
    n = res.mask.total()
    assert res.mask.kept() == int(np.floor(0.8 * n + 1e-9))


def test_imp_masks_nest_across_rounds(tiny_task, tiny_model):
    train, _ = tiny_task
    shallow = pruners.prune_imp(tiny_model, train, 0.2, round_epochs=1,
                                batch_size=16, seed=0)
    deep = pruners.prune_imp(tiny_model, train, 0.59, round_epochs=1,
                             batch_size=16, seed=0)
    for name in shallow.mask.masks:
        a = shallow.mask.masks[name].astype(bool)
        b = deep.mask.masks[name].astype(bool)
        assert not (b & ~a).any()  # deeper mask is a subset


# --------------------------------------------------------------------------
# SNIP


def snip_probe_net():
    gen = np.random.default_rng(17)
    w = gen.uniform(0.3, 1.0, size=(4, 5)) * gen.choice([-1, 1], size=(4, 5))
    return small_linear_net([w.astype(np.float32)], classes=3), w.astype(np.float32)


def test_snip_scores_match_fd_on_mask():
    state, w = snip_probe_net()
    gen = np.random.default_rng(5)
    x = gen.uniform(0, 1, size=(8, 5, 1, 1)).astype(np.float32)
    y = gen.integers(0, 3, size=8)
    flat = x.reshape(8, -1)
    mask = pruners.prune_snip(state, (x, y), 0.5)  # smoke: runs and is exact
    assert mask.kept() == 10

    _, grads = pruners._loss_and_grads(state, x, y, list(state.prunable))
    scores = np.abs(grads["linear1.weight"] * w)

    head = state.params["linear3.weight"].values
    head_b = state.params["linear3.bias"].values
    b1 = state.params["linear1.bias"].values

    def ref(arr):
        h = oracles.ref_linear(flat, w * arr["m"], b1)
        h = oracles.ref_relu(h)
        return oracles.ref_softmax_ce(oracles.ref_linear(h, head, head_b), y)

    fd = oracles.central_fd(ref, {"m": np.ones_like(w)}, h=1e-3)
    rel = np.abs(scores - np.abs(fd["m"])) / np.abs(fd["m"]).max()
    assert rel.max() <= 1e-2


def test_snip_zero_gradient_weight_pruned_first():
    # positive weights keep every relu unit active, so only the weights fed by
    # the zeroed input feature score zero, and they are pruned first
    gen = np.random.default_rng(6)
    state = small_linear_net([gen.uniform(0.3, 1.0, size=(4, 5)).astype(np.float32)],
                             classes=3)
    x = gen.uniform(0.2, 1.0, size=(8, 5, 1, 1)).astype(np.float32)
    x[:, 2] = 0.0
    y = gen.integers(0, 3, size=8)
    mask = pruners.prune_snip(state, (x, y), 0.2)
    assert (mask.masks["linear1.weight"][:, 2] == 0).all()
    assert (mask.masks["linear1.weight"][:, [0, 1, 3, 4]] == 1).all()


def test_snip_batch_duplication_invariant():
    state, _ = snip_probe_net()
    gen = np.random.default_rng(7)
    x = gen.uniform(0, 1, size=(6, 5, 1, 1)).astype(np.float32)
    y = gen.integers(0, 3, size=6)
    once = pruners.prune_snip(state, (x, y), 0.5)
    twice = pruners.prune_snip(state, (np.concatenate([x, x]), np.concatenate([y, y])), 0.5)
    assert masking.mask_digest(once) == masking.mask_digest(twice)


def test_snip_empty_batch_rejected():
    state, _ = snip_probe_net()
    with pytest.raises(PruneError):
        pruners.prune_snip(state, (np.zeros((0, 5, 1, 1), np.float32), np.zeros(0, np.int64)), 0.5)


# --------------------------------------------------------------------------
# GraSP


def test_fd_hvp_matches_quadratic_oracle():
    gen = np.random.default_rng(11)
    m = gen.normal(size=(6, 6))
    a = m @ m.T + np.eye(6)  # SPD Hessian
    theta = {"t": gen.normal(size=6)}
    g = {"t": a @ theta["t"]}

    def grad_fn(th):
        return {"t": a @ th["t"]}

    gnorm = float(np.linalg.norm(g["t"]))
    hg = pruners.fd_hvp(grad_fn, theta, g, eps=1e-2 / gnorm)
    want = a @ g["t"]
    assert oracles.rel_err(hg["t"], want) <= 1e-2


def test_grasp_zero_gradient_rejected():
    # all-zero weights kill every weight gradient; perfectly balanced labels
    # cancel the remaining head-bias gradient, so ||g|| = 0 exactly
    zero_state = small_linear_net([np.zeros((4, 5), dtype=np.float32)], classes=2)
    for n, t in zero_state.params.items():
        t.values[...] = 0.0
    x = np.ones((2, 5, 1, 1), dtype=np.float32)
    y = np.array([0, 1])
    with pytest.raises(PruneError, match="zero"):
        pruners.prune_grasp(zero_state, (x, y), 0.5)


def test_grasp_score_formula_linear_in_theta():
    gen = np.random.default_rng(12)
    theta = gen.normal(size=(3, 4))
    hg = gen.normal(size=(3, 4))
    assert np.allclose(-(2 * theta) * hg, 2 * (-(theta) * hg))


def test_grasp_runs_with_exact_cardinality(tiny_task, tiny_model):
    train, _ = tiny_task
    idx = batch_indices(len(train), 32, 0, 0)[0]
    canv = prompting.resize_and_pad(train.images[idx], 16, 16)
    mask = pruners.prune_grasp(tiny_model, (canv, train.labels[idx]), 0.8)
    n = mask.total()
    assert mask.kept() == masking.keep_count(0.8, n)
    again = pruners.prune_grasp(tiny_model, (canv, train.labels[idx]), 0.8)
    assert masking.mask_digest(mask) == masking.mask_digest(again)


# --------------------------------------------------------------------------
# SynFlow


def test_synflow_chain_scores_symmetric():
    spec = ModelSpec("chain", 1, 1, (Flatten(), Linear(1), Linear(1), Linear(2)), 2)
    state = models.build_model(spec, seed=0)
    state.params["linear1.weight"].values[...] = [[0.3]]
    state.params["linear2.weight"].values[...] = [[-0.5]]
    scores = pruners.synflow_scores(state, masking.identity_mask(state))
    assert scores["linear1.weight"].shape == (1, 1)
    assert scores["linear1.weight"][0, 0] == pytest.approx(scores["linear2.weight"][0, 0],
                                                           rel=1e-6)


def test_synflow_is_data_free_and_deterministic(tiny_model):
    a = pruners.prune_synflow(tiny_model, 0.9, iterations=20)
    b = pruners.prune_synflow(tiny_model, 0.9, iterations=20)
    assert masking.mask_digest(a) == masking.mask_digest(b)
    n = a.total()
    assert a.kept() == masking.keep_count(0.9, n)


def test_synflow_no_layer_collapse_at_high_sparsity():
    state = models.build_model(models.zoo_spec("cnn-s", 1, 32, 4), seed=2)
    mask = pruners.prune_synflow(state, 0.9, iterations=100)
    for name in state.prunable:
        assert mask.masks[name].sum() >= 1, f"layer {name} collapsed"


def test_synflow_restores_weights(tiny_model):
    before = {n: t.values.copy() for n, t in tiny_model.params.items()}
    pruners.prune_synflow(tiny_model, 0.5, iterations=5)
    for n, t in tiny_model.params.items():
        assert np.array_equal(t.values, before[n])


# --------------------------------------------------------------------------
# Score learning (hydra / vpns)


def test_hydra_zero_epochs_equals_omp(tiny_task, tiny_model):
    train, _ = tiny_task
    res = pruners.prune_hydra(tiny_model, train, 0.8, epochs=0, batch_size=16, seed=0)
    omp = pruners.prune_omp(tiny_model, 0.8)
    assert masking.mask_digest(res.mask) == masking.mask_digest(omp)


def test_hydra_exact_sparsity_and_frozen_backbone(tiny_task, tiny_model):
    train, _ = tiny_task
    before = {n: tiny_model.params[n].values.copy() for n in tiny_model.prunable}
    res = pruners.prune_hydra(tiny_model, train, 0.9, epochs=3, batch_size=16, seed=1)
    n = res.mask.total()
    assert res.mask.kept() == masking.keep_count(0.9, n)
    for name in tiny_model.prunable:
        assert np.array_equal(tiny_model.params[name].values, before[name])
    assert len(res.log) == 3
    assert all(r.phase == "mask_finding" for r in res.log)


def test_hydra_loss_mostly_nonincreasing():
    # statistical smoke oracle at the reference-task scale
    train, _ = synth_generate(SyntheticSpec("textures", 4, 400, 24, 0.1, 11))
    state = models.build_model(models.zoo_spec("cnn-s", 1, 32, 4), seed=0)
    drops = total = 0
    for seed in (0, 1, 2):
        res = pruners.prune_hydra(state, train, 0.9, epochs=8, batch_size=16,
                                  seed=seed)
        losses = [r.loss for r in res.log]
        drops += sum(b <= a for a, b in zip(losses, losses[1:]))
        total += len(losses) - 1
    assert drops / total >= 0.8


def test_vpns_requires_real_prompt(tiny_task, tiny_model):
    train, _ = tiny_task
    with pytest.raises(PruneError):
        pruners.prune_vpns(tiny_model, train, 0.5, None, epochs=1)
    with pytest.raises(PruneError):
        pruners.prune_vpns(tiny_model, train, 0.5, PromptSpec("none", 16, 16, 0), epochs=1)


def test_vpns_zero_pad_bit_identical_to_hydra(tiny_task, tiny_model):
    train, _ = tiny_task
    p0 = PromptSpec("pad", 16, 16, 0, 1)
    a = pruners.prune_vpns(tiny_model, train, 0.8, p0, epochs=4, batch_size=16, seed=3)
    b = pruners.prune_hydra(tiny_model, train, 0.8, epochs=4, batch_size=16, seed=3)
    assert [r.loss for r in a.log] == [r.loss for r in b.log]
    assert [r.train_acc for r in a.log] == [r.train_acc for r in b.log]
    assert masking.mask_digest(a.mask) == masking.mask_digest(b.mask)


def test_vpns_cardinality_and_frozen_delta_center(tiny_task, tiny_model):
    train, _ = tiny_task
    spec = PromptSpec("pad", 16, 12, 3, 1)
    res = pruners.prune_vpns(tiny_model, train, 0.9, spec, epochs=3, batch_size=16,
                             seed=4)
    n = res.mask.total()
    assert res.mask.kept() == masking.keep_count(0.9, n)
    frozen = res.prompt.tunable_mask == 0
    assert (res.prompt.delta.values[frozen] == 0).all()
    assert np.abs(res.prompt.delta.values).max() > 0


def test_vpns_channel_granularity(tiny_task, tiny_model):
    train, _ = tiny_task
    spec = PromptSpec("pad", 16, 12, 3, 1)
    res = pruners.prune_vpns(tiny_model, train, 0.5, spec, epochs=2, batch_size=16,
                             seed=5, granularity="channel")
    channels = sum(tiny_model.params[n].shape[0] for n in tiny_model.prunable)
    assert res.mask.total() == channels
    assert res.mask.kept() == channels // 2


# --------------------------------------------------------------------------
# Subnetwork tuning


def test_tuning_keeps_pruned_weights_inactive(tiny_task, tiny_model):
    train, _ = tiny_task
    mask = pruners.prune_omp(tiny_model, 0.7)
    tuned, _, log = pruners.tune_subnetwork(tiny_model, mask, train, None, epochs=3,
                                            batch_size=16, seed=0)
    for name in tiny_model.prunable:
        eff = tuned.params[name].values * mask.masks[name]
        assert (eff[mask.masks[name] == 0] == 0).all()
        # surviving weights actually moved
        live = mask.masks[name] == 1
        assert not np.array_equal(tuned.params[name].values[live],
                                  tiny_model.params[name].values[live])
    assert len(log) == 3


def test_tuning_does_not_mutate_input_model(tiny_task, tiny_model):
    train, _ = tiny_task
    before = {n: t.values.copy() for n, t in tiny_model.params.items()}
    mask = masking.identity_mask(tiny_model)
    pruners.tune_subnetwork(tiny_model, mask, train, None, epochs=1, batch_size=16,
                            seed=0)
    for n, t in tiny_model.params.items():
        assert np.array_equal(t.values, before[n])


def test_dense_tuning_matches_reference_loop(tiny_task, tiny_model):
    train, test = tiny_task
    mask = masking.identity_mask(tiny_model)
    tuned, _, _ = pruners.tune_subnetwork(tiny_model, mask, train, None, epochs=8,
                                          batch_size=16, seed=0)
    acc = pruners.evaluate(tuned, test, input_size=16)

    # independently coded plain training loop on the same schedule
    ref = tiny_model.clone()
    params = ref.param_tensors()
    for t in params:
        t.requires_grad = True
    opt = T.make_sgd(params, 0.01, momentum=0.9, weight_decay=1e-4)
    plan = [batch_indices(len(train), 16, child_seed(0, "tune"), e) for e in range(8)]
    total = sum(len(p) for p in plan)
    step = 0
    for epoch in range(8):
        for idx in plan[epoch]:
            opt.lr = T.cosine_lr(step, total, 0.01)
            tape = T.Tape()
            with tape:
                logits = models.forward(ref, T.Tensor(train.images[idx]))
                loss = T.softmax_cross_entropy(logits, train.labels[idx])
            T.backward(tape, loss)
            T.optimizer_step(opt)
            T.zero_grads(params)
            tape.clear()
            step += 1
    for t in params:
        t.requires_grad = False
    ref_acc = pruners.evaluate(ref, test, input_size=16)
    assert abs(acc - ref_acc) <= 0.05


def test_tuning_with_prompt_trains_delta(tiny_task, tiny_model):
    train, _ = tiny_task
    mask = pruners.prune_omp(tiny_model, 0.5)
    prompt = prompting.make_prompt(PromptSpec("pad", 16, 12, 3, 1), seed=0)
    tuned, tuned_prompt, _ = pruners.tune_subnetwork(tiny_model, mask, train, prompt,
                                                     epochs=2, batch_size=16, seed=0)
    assert np.abs(tuned_prompt.delta.values).max() > 0
    frozen = tuned_prompt.tunable_mask == 0
    assert (tuned_prompt.delta.values[frozen] == 0).all()


# --------------------------------------------------------------------------
# Post-pruning prompt


def test_post_prompt_zero_epochs_is_noop(tiny_task, tiny_model):
    train, test = tiny_task
    mask = pruners.prune_omp(tiny_model, 0.5)
    _, wo, w = pruners.post_pruning_prompt(tiny_model, mask, train, test,
                                           PromptSpec("pad", 16, 12, 3, 1),
                                           "zero_shot", epochs=0, batch_size=16, seed=0)
    assert w == wo


def test_post_prompt_unknown_mode_rejected(tiny_task, tiny_model):
    train, test = tiny_task
    mask = pruners.prune_omp(tiny_model, 0.5)
    with pytest.raises(PruneError):
        pruners.post_pruning_prompt(tiny_model, mask, train, test,
                                    PromptSpec("pad", 16, 12, 3, 1), "few_shot", 1)


# --------------------------------------------------------------------------
# run_method pipeline


def test_run_method_attaches_prompt_to_baseline(tiny_task, tiny_model):
    train, _ = tiny_task
    method = pruners.PruneMethod(kind="omp", sparsity=0.5,
                                 prompt=PromptSpec("pad", 16, 12, 3, 1),
                                 tune_epochs=2, batch_size=16)
    res = pruners.run_method(tiny_model, method, train, seed=0)
    assert res.prompt is not None
    assert np.abs(res.prompt.delta.values).max() > 0  # trained during tuning
    assert res.epochs_used == 2
    assert res.steps_used == 2 * len(batch_indices(len(train), 16, 0, 0))


def test_run_method_epoch_accounting(tiny_task, tiny_model):
    train, _ = tiny_task
    method = pruners.PruneMethod(kind="hydra", sparsity=0.5, mask_epochs=4,
                                 tune_epochs=2, batch_size=16)
    res = pruners.run_method(tiny_model, method, train, seed=0)
    phases = [r.phase for r in res.log]
    assert phases.count("mask_finding") == 4
    assert phases.count("tuning") == 2
    per_epoch = len(batch_indices(len(train), 16, 0, 0))
    assert res.steps_used == 6 * per_epoch


def test_save_result_writes_run_directory(tmp_path, tiny_task, tiny_model):
    train, _ = tiny_task
    method = pruners.PruneMethod(kind="vpns", sparsity=0.5,
                                 prompt=PromptSpec("pad", 16, 12, 3, 1),
                                 mask_epochs=1, tune_epochs=1, batch_size=16)
    res = pruners.run_method(tiny_model, method, train, seed=0)
    pruners.save_result(tmp_path / "run", res, tiny_model)
    assert (tmp_path / "run" / "mask.cspk").exists()
    assert (tmp_path / "run" / "prompt.cspk").exists()
    assert (tmp_path / "run" / "tuned.cspk").exists()
    lines = (tmp_path / "run" / "log.jsonl").read_text().strip().splitlines()
    assert len(lines) == len(res.log)
