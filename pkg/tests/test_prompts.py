import json
from pathlib import Path

import numpy as np
import pytest

import oracles
from promptcondense import tensor as T
from promptcondense.data import SyntheticSpec, gen_synthetic
from promptcondense.errors import ContractError, DimensionError, PromptLookupError
from promptcondense.prompts import (DEEP, SHALLOW, PromptSet, count_scalars, forward_deep, forward_shallow,
                                    init_prompts, prompt_forward, trainable_params)
from promptcondense.tensor import Tensor
from promptcondense.training import TrainConfig, attach_head, train
from promptcondense.vit import ViTConfig, forward, init_params

GOLDEN = json.loads((Path(__file__).parent / "golden_logits.json").read_text())


def weights(params):
    return {n: t.data for n, t in params.tensors.items()}


class TestInit:
    def test_bound(self, toy_config):
        ps = init_prompts(toy_config, DEEP, 50, seed=0)
        bound = np.sqrt(6 / 128)
        assert abs(bound - 0.2165) < 1e-4
        assert all(np.abs(p.data).max() <= bound for p in ps.layers)

    def test_seeded(self, toy_config):
        a = init_prompts(toy_config, DEEP, 4, seed=7)
        b = init_prompts(toy_config, DEEP, 4, seed=7)
        for x, y in zip(a.layers, b.layers):
            assert x.data.tobytes() == y.data.tobytes()

    def test_identities(self, toy_config):
        ps = init_prompts(toy_config, DEEP, [2, 0, 1, 3], seed=0)
        assert ps.counts() == [2, 0, 1, 3] and ps.total == 6
        assert ps.identities() == [(0, 0), (0, 1), (2, 0), (3, 0), (3, 1), (3, 2)]
        assert ps.locate((3, 2)) == (3, 2)

    def test_unknown_identity(self, toy_config):
        ps = init_prompts(toy_config, DEEP, 2, seed=0)
        with pytest.raises(PromptLookupError):
            ps.locate((1, 5))

    def test_shallow_single_matrix(self, toy_config):
        assert len(init_prompts(toy_config, SHALLOW, 3).layers) == 1
        with pytest.raises(ContractError):
            PromptSet(SHALLOW, [Tensor(np.zeros((1, 64)))] * 2, [[(0, 0)], [(1, 0)]])

    def test_negative_count(self, toy_config):
        with pytest.raises(ContractError):
            init_prompts(toy_config, DEEP, -1)

    def test_record_round_trip(self, toy_config):
        ps = init_prompts(toy_config, DEEP, [2, 0, 1, 3], seed=0)
        back = PromptSet.from_record(*ps.to_record())
        assert back.ids == ps.ids and back.mode == ps.mode
        for a, b in zip(ps.layers, back.layers):
            assert a.data.tobytes() == b.data.tobytes()


class TestPromptlessEquivalence:
    @pytest.mark.parametrize("mode", [DEEP, SHALLOW])
    def test_m_zero_is_bit_exact(self, toy_params, images, mode):
        ps = init_prompts(toy_params.config, mode, 0)
        base, _ = forward(images, toy_params)
        got, _ = prompt_forward(images, toy_params, ps)
        assert got.data.tobytes() == base.data.tobytes()


class TestDeep:
    def test_reference(self, toy_params, images):
        ps = init_prompts(toy_params.config, DEEP, [3, 0, 2, 1], seed=5)
        logits, _ = forward_deep(images, toy_params, ps)
        for b, img in enumerate(images):
            ref = oracles.vit_logits(img, weights(toy_params), toy_params.config, [p.data for p in ps.layers])
            np.testing.assert_allclose(logits.data[b], ref, atol=1e-10)

    def test_golden(self, toy_params):
        img = np.random.default_rng(GOLDEN["image_seed"]).uniform(0.0, 1.0, size=(3, 32, 32))
        ps = init_prompts(toy_params.config, DEEP, GOLDEN["deep_counts"], GOLDEN["deep_seed"])
        np.testing.assert_allclose(forward_deep(img, toy_params, ps)[0].data, GOLDEN["deep_logits"], atol=1e-10)

    def test_token_counts(self, toy_params, images):
        ps = init_prompts(toy_params.config, DEEP, [3, 0, 5, 1], seed=0)
        _, tr = forward_deep(images, toy_params, ps, trace=True)
        # every layer sees its own prompts plus the constant n tokens
        assert tr.tokens == [20, 17, 22, 18]
        assert tr.cls_index == [3, 0, 5, 1]

    def test_gradient_reaches_every_layer(self, toy_params, images):
        ps = init_prompts(toy_params.config, DEEP, 2, seed=0)
        logits, _ = forward_deep(images, toy_params, ps)
        T.backward(T.cross_entropy(logits, [0, 1, 2]))
        assert all(np.linalg.norm(p.grad) > 0 for p in ps.layers)

    def test_prompt_gradient_matches_differences(self, toy_params, images):
        ps = init_prompts(toy_params.config, DEEP, 2, seed=0)
        others = [p for p in ps.layers]

        def f(x):
            layers = [x] + others[1:]
            return T.cross_entropy(forward(images, toy_params, layers)[0], [0, 1, 2])

        assert T.grad_check(f, Tensor(ps.layers[0].data), probes=40) < 1e-4

    def test_width_mismatch(self, toy_params, images):
        ps = init_prompts(ViTConfig(dim=32, heads=4), DEEP, 2)
        with pytest.raises(DimensionError):
            forward_deep(images, toy_params, ps)

    def test_mode_mismatch(self, toy_params, images):
        with pytest.raises(ContractError):
            forward_shallow(images, toy_params, init_prompts(toy_params.config, DEEP, 1))


class TestShallow:
    def test_reference(self, toy_params, images):
        ps = init_prompts(toy_params.config, SHALLOW, 4, seed=2)
        logits, _ = forward_shallow(images, toy_params, ps)
        for b, img in enumerate(images):
            ref = oracles.vit_logits(img, weights(toy_params), toy_params.config, [ps.layers[0].data], SHALLOW)
            np.testing.assert_allclose(logits.data[b], ref, atol=1e-10)

    def test_golden(self, toy_params):
        img = np.random.default_rng(GOLDEN["image_seed"]).uniform(0.0, 1.0, size=(3, 32, 32))
        ps = init_prompts(toy_params.config, SHALLOW, GOLDEN["shallow_count"], GOLDEN["shallow_seed"])
        np.testing.assert_allclose(forward_shallow(img, toy_params, ps)[0].data, GOLDEN["shallow_logits"],
                                   atol=1e-10)

    def test_token_counts(self, toy_params, images):
        ps = init_prompts(toy_params.config, SHALLOW, 4, seed=2)
        _, tr = forward_shallow(images, toy_params, ps, trace=True)
        assert tr.tokens == [21] * 4
        assert tr.cls_index == [4] * 4


class TestFreeze:
    def test_scalar_count(self):
        cfg = ViTConfig(num_classes=10)
        params = init_params(cfg)
        view = trainable_params(params, init_prompts(cfg, DEEP, 4))
        assert count_scalars(view) == 4 * 4 * 64 + 650 == 1674

    def test_shallow_empty_is_head_only(self):
        cfg = ViTConfig(num_classes=10)
        params = init_params(cfg)
        view = trainable_params(params, init_prompts(cfg, SHALLOW, 0))
        assert count_scalars({k: v for k, v in view.items() if v.size}) == 650
        assert all(params.frozen[n] for n in params.backbone_names())

    def test_epoch_leaves_backbone_untouched(self, toy_params):
        ds = gen_synthetic(SyntheticSpec(num_classes=5, train_per_class=6, val_per_class=0, test_per_class=0))
        params = attach_head(toy_params, 5)
        before = params.snapshot(params.backbone_names())
        ps = init_prompts(params.config, DEEP, 2, seed=0)
        start = ps.layers[0].data.copy()
        train(params, ps, ds, TrainConfig(epochs=1, batch_size=8))
        for name, arr in before.items():
            assert params[name].data.tobytes() == arr.tobytes(), name
        assert not np.array_equal(ps.layers[0].data, start)
