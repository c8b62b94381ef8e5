"""Engine-side interpreter for the micro-net programs checked against the
float64 reference in oracles.py, plus random program generators."""

from __future__ import annotations

import numpy as np

from cosparse import masking
from cosparse import tensor as T


def engine_program_loss(program, arrays: dict, x: np.ndarray, labels, grad_names):
    """Run a program through the autodiff engine.

    Leaves named in grad_names receive gradients; mask names among them are
    realized as straight-through score tensors. Returns (loss_value, grads).
    """
    leaves: dict[str, T.Tensor] = {}
    scores: dict[str, T.Tensor] = {}

    def leaf(name):
        if name is None:
            return None
        if name not in leaves:
            leaves[name] = T.Tensor(arrays[name], requires_grad=name in grad_names)
        return leaves[name]

    def masked(wname, bname, mname, granularity):
        w = leaf(wname)
        if mname is None:
            return w, leaf(bname)
        sc = None
        if mname in grad_names:
            if mname not in scores:
                scores[mname] = T.Tensor(np.zeros_like(arrays[mname]), requires_grad=True)
            sc = scores[mname]
        eff = masking.apply_mask(w, np.asarray(arrays[mname], np.float32), sc, granularity)
        return eff, leaf(bname)

    tape = T.Tape()
    with tape:
        h = T.Tensor(x)
        for step in program:
            op = step[0]
            if op == "prompt_add":
                _, dname, mask = step
                h = T.add(h, T.mul(leaf(dname), T.Tensor(mask)))
            elif op == "conv":
                _, wname, bname, stride, pad, mname, gran = step
                w, b = masked(wname, bname, mname, gran)
                h = T.conv2d(h, w, b, stride=stride, pad=pad)
            elif op == "linear":
                _, wname, bname, mname, gran = step
                w, b = masked(wname, bname, mname, gran)
                h = T.linear(h, w, b)
            elif op == "relu":
                h = T.relu(h)
            elif op == "maxpool":
                h = T.maxpool2d(h, step[1], step[2])
            elif op == "avgpool":
                h = T.avgpool2d(h, step[1], step[2])
            elif op == "flatten":
                h = T.flatten(h)
            else:
                raise ValueError(f"unknown program op {op!r}")
        loss = T.softmax_cross_entropy(h, labels)
    T.backward(tape, loss)
    grads = {}
    for name in grad_names:
        if name in scores:
            grads[name] = scores[name].grad
        else:
            grads[name] = leaves[name].grad
    return float(loss.values), grads


def margin_filter(x: np.ndarray, k: int, stride: int, min_margin: float,
                  gen: np.random.Generator) -> np.ndarray:
    """Re-draw pooling inputs until every window's top-two gap exceeds the
    finite-difference step, keeping max-pool differentiable at the test point."""
    x = x.copy()
    n, c, h, w = x.shape
    for _ in range(50):
        ok = True
        for i in range(0, h - k + 1, stride):
            for j in range(0, w - k + 1, stride):
                win = x[:, :, i : i + k, j : j + k].reshape(n, c, -1)
                top2 = np.sort(win, axis=2)[:, :, -2:]
                if (top2[:, :, 1] - top2[:, :, 0] < min_margin).any():
                    ok = False
        if ok:
            return x
        x = gen.uniform(0.0, 1.0, size=x.shape).astype(np.float32)
        x += gen.permutation(x.size).reshape(x.shape).astype(np.float32) * 1e-3
    return x


def net_fd_safe(program, arrays: dict, x: np.ndarray, margin: float = 0.015) -> bool:
    """True when no relu input or max-pool window sits within `margin` of a
    kink, so central differences with h << margin stay valid."""
    import oracles
    h = np.asarray(x, dtype=np.float64)
    for step in program:
        op = step[0]
        if op == "prompt_add":
            h = h + np.asarray(arrays[step[1]], np.float64) * step[2]
        elif op == "conv":
            _, wname, bname, stride, pad, mname, gran = step
            w = np.asarray(arrays[wname], np.float64)
            if mname is not None:
                w = oracles._apply_cont_mask(w, np.asarray(arrays[mname], np.float64), gran)
            h = oracles.ref_conv2d(h, w, arrays.get(bname), stride, pad)
        elif op == "linear":
            _, wname, bname, mname, gran = step
            w = np.asarray(arrays[wname], np.float64)
            if mname is not None:
                w = oracles._apply_cont_mask(w, np.asarray(arrays[mname], np.float64), gran)
            h = oracles.ref_linear(h, w, arrays.get(bname))
        elif op == "relu":
            if np.abs(h).min() < margin:
                return False
            h = oracles.ref_relu(h)
        elif op == "maxpool":
            if not _pool_margin_ok(h, step[1], step[2], gap=margin):
                return False
            h = oracles.ref_pool(h, step[1], step[2], "max")
        elif op == "avgpool":
            h = oracles.ref_pool(h, step[1], step[2], "avg")
        elif op == "flatten":
            h = h.reshape(h.shape[0], -1)
    return True


def _pool_margin_ok(composed: np.ndarray, k: int, stride: int, gap: float) -> bool:
    n, c, h, w = composed.shape
    for i in range(0, h - k + 1, stride):
        for j in range(0, w - k + 1, stride):
            win = composed[:, :, i : i + k, j : j + k].reshape(n, c, -1)
            top2 = np.sort(win, axis=2)[:, :, -2:]
            if (top2[:, :, 1] - top2[:, :, 0] < gap).any():
                return False
    return True


def random_micronet(gen: np.random.Generator, with_prompt: bool = True,
                    granularity: str = "element", pool: str | None = None):
    """A small prompted, masked conv-linear classifier with random geometry.

    An optional pooling stage sits between the prompt composition and the
    conv; for max pooling the input is redrawn until every window has a
    comfortable top-two margin, keeping finite differences valid.

    Returns (program, arrays, x, labels, grad_names).
    """
    s = int(gen.integers(3, 5)) * 2  # even so a k=2, stride-2 pool divides it
    cin = int(gen.integers(1, 3))
    n = int(gen.integers(1, 3))
    classes = int(gen.integers(2, 5))
    cout = int(gen.integers(2, 5))
    k = 3
    stride = int(gen.integers(1, 3))
    labels = gen.integers(0, classes, size=n)
    arrays: dict[str, np.ndarray] = {}
    program = []
    grad_names = []
    pm = np.zeros((cin, s, s), dtype=np.float32)
    if with_prompt:
        p = int(gen.integers(1, s // 2))
        pm[:, :] = 1.0
        pm[:, p : s - p, p : s - p] = 0.0
        arrays["delta"] = gen.normal(0, 0.1, size=(cin, s, s)).astype(np.float32)
        program.append(("prompt_add", "delta", pm))
        grad_names.append("delta")
    delta_part = arrays["delta"] * pm if with_prompt else 0.0
    x = gen.uniform(0.0, 1.0, size=(n, cin, s, s)).astype(np.float32)
    if pool == "maxpool":
        for _ in range(100):
            if _pool_margin_ok(x + delta_part, 2, 2, gap=0.02):
                break
            x = gen.uniform(0.0, 1.0, size=(n, cin, s, s)).astype(np.float32)
    s_eff = s
    if pool is not None:
        program.append((pool, 2, 2))
        s_eff = (s - 2) // 2 + 1
    arrays["w1"] = (gen.uniform(-1, 1, size=(cout, cin, k, k)) / np.sqrt(cin * k * k)
                    ).astype(np.float32)
    arrays["b1"] = gen.uniform(-0.1, 0.1, size=cout).astype(np.float32)
    if granularity == "element":
        m1 = (gen.random(size=arrays["w1"].shape) > 0.3).astype(np.float32)
    else:
        m1 = (gen.random(size=cout) > 0.3).astype(np.float32)
        if m1.sum() == 0:
            m1[0] = 1.0
    arrays["m1"] = m1
    program.append(("conv", "w1", "b1", stride, 1, "m1", granularity))
    program.append(("relu",))
    grad_names += ["w1", "b1", "m1"]
    ho = (s_eff + 2 - k) // stride + 1
    feats = cout * ho * ho
    program.append(("flatten",))
    arrays["w2"] = (gen.uniform(-1, 1, size=(classes, feats)) / np.sqrt(feats)
                    ).astype(np.float32)
    arrays["b2"] = gen.uniform(-0.1, 0.1, size=classes).astype(np.float32)
    if granularity == "element":
        m2 = (gen.random(size=arrays["w2"].shape) > 0.3).astype(np.float32)
    else:
        m2 = (gen.random(size=classes) > 0.3).astype(np.float32)
        if m2.sum() == 0:
            m2[0] = 1.0
    arrays["m2"] = m2
    program.append(("linear", "w2", "b2", "m2", granularity))
    grad_names += ["w2", "b2", "m2"]
    return program, arrays, x, labels, grad_names
