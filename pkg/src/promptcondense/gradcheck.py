"""Finite-difference checks for every differentiable op and the prompt-tuning loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .prompts import DEEP, SHALLOW, init_prompts
from .tensor import Tensor
from .vit import ViTConfig, attention, forward, init_params


def _project(y: Tensor, seed: int) -> Tensor:
    """Random linear read-out so every output element carries gradient."""
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return T.tensor_sum(T.mul(y, Tensor(w)))


def _op_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    def rnd(*shape):
        return Tensor(rng.standard_normal(shape))

    a, b = rnd(6, 20), rnd(6, 20)
    wide = rnd(2, 120)
    bias = rnd(120)
    x3 = rnd(3, 8, 12)
    m2 = rnd(12, 10)
    bm = rnd(3, 12, 5)
    labels = rng.integers(0, 12, size=10)
    logits = rnd(10, 12)
    gain, beta = Tensor(1.0 + 0.1 * rng.standard_normal(12)), rnd(12)
    gain_w, beta_w = Tensor(1.0 + 0.1 * rng.standard_normal(120)), rnd(120)
    q, k, v = rnd(2, 2, 7, 8), rnd(2, 2, 7, 8), rnd(2, 2, 7, 8)

    def drop(x):
        return T.dropout(x, 0.3, np.random.default_rng(7))

    return [
        ("add", lambda x: _project(T.add(x, b), 1), a),
        ("add_bias[x]", lambda x: _project(T.add_bias(x, bias), 2), wide),
        ("add_bias[b]", lambda x: _project(T.add_bias(wide, x), 3), bias),
        ("mul", lambda x: _project(T.mul(x, b), 4), a),
        ("scale", lambda x: _project(T.scale(x, -2.5), 5), a),
        ("sum", lambda x: T.tensor_sum(T.mul(x, x)), a),
        ("mean", lambda x: T.mean(T.mul(x, x)), a),
        ("reshape", lambda x: _project(T.reshape(x, (12, 10)), 6), a),
        ("transpose", lambda x: _project(T.transpose(x, (2, 0, 1)), 7), x3),
        ("concat", lambda x: _project(T.concat([x, b], axis=0), 8), a),
        ("slice", lambda x: _project(T.slice_axis(x, 2, 15, axis=1), 9), a),
        ("expand_batch", lambda x: _project(T.expand_batch(x, 3), 10), a),
        ("matmul[left]", lambda x: _project(T.matmul(x, m2), 11), x3),
        ("matmul[right]", lambda x: _project(T.matmul(x3, x), 12), m2),
        ("matmul[batched]", lambda x: _project(T.matmul(x3, x), 13), bm),
        ("softmax", lambda x: _project(T.softmax_rows(x), 14), x3),
        ("gelu", lambda x: _project(T.gelu(x), 15), x3),
        ("layer_norm[x]", lambda x: _project(T.layer_norm(x, gain, beta), 16), x3),
        ("layer_norm[gain]", lambda x: _project(T.layer_norm(wide, x, beta_w), 17), gain_w),
        ("layer_norm[bias]", lambda x: _project(T.layer_norm(wide, gain_w, x), 23), beta_w),
        ("dropout", lambda x: _project(drop(x), 18), x3),
        ("cross_entropy[mean]", lambda x: T.cross_entropy(x, labels), logits),
        ("cross_entropy[sum]", lambda x: T.cross_entropy(x, labels, reduction="sum"), logits),
        ("cross_entropy[none]", lambda x: _project(T.cross_entropy(x, labels, reduction="none"), 19), logits),
        ("attention[q]", lambda x: _project(attention(x, k, v)[0], 20), q),
        ("attention[k]", lambda x: _project(attention(q, x, v)[0], 21), k),
        ("attention[v]", lambda x: _project(attention(q, k, x)[0], 22), v),
    ]


def _model_checks(seed: int) -> list[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    cfg = ViTConfig(image_size=16, patch_size=8, depth=2, dim=24, heads=2, num_classes=5)
    params = init_params(cfg, seed)
    params.freeze_backbone()
    rng = np.random.default_rng(seed + 1)
    images = rng.uniform(0, 1, size=(4, 3, 16, 16))
    labels = rng.integers(0, 5, size=4)
    params["head.weight"].data = 0.5 * rng.standard_normal(params["head.weight"].shape)
    deep = init_prompts(cfg, DEEP, [4, 3], seed)
    shallow = init_prompts(cfg, SHALLOW, 7, seed)
    stacked = Tensor(np.concatenate([p.data for p in deep.layers]))

    def deep_loss(x):
        layers = [T.slice_axis(x, 0, 4, axis=0), T.slice_axis(x, 4, 7, axis=0)]
        return T.cross_entropy(forward(images, params, layers, mode=DEEP)[0], labels)

    def shallow_loss(x):
        return T.cross_entropy(forward(images, params, [x], mode=SHALLOW)[0], labels)

    def head_loss(x):
        tensors = dict(params.tensors)
        tensors["head.weight"] = x
        view = type(params)(params.config, tensors, dict(params.frozen))
        return T.cross_entropy(forward(images, view, deep.layers, mode=DEEP)[0], labels)

    return [
        ("vit_loss[deep prompts]", deep_loss, stacked),
        ("vit_loss[shallow prompts]", shallow_loss, shallow.layers[0]),
        ("vit_loss[head]", head_loss, Tensor(params["head.weight"].data)),
    ]


def run_grad_checks(probes: int = 100, seed: int = 0, step: float = 1e-5) -> dict:
    """Run every check; each compares ``min(probes, size)`` random elements.

    Returns a JSON-able record with one entry per check.
    """
    checks = _op_checks(np.random.default_rng(seed)) + _model_checks(seed)
    out = []
    for i, (name, f, x) in enumerate(checks):
        n = min(probes, x.size)
        err = T.grad_check(f, x, step=step, probes=n, seed=seed + i)
        out.append({"name": name, "probes": n, "max_rel_error": float(err)})
    return {"probes": probes, "step": step, "checks": out}
