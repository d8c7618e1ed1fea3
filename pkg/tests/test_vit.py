import json
from pathlib import Path

import numpy as np
import pytest

import oracles
from promptcondense import tensor as T
from promptcondense.errors import ContractError, DimensionError, ParseError
from promptcondense.tensor import Tensor
from promptcondense.vit import (ViTConfig, ViTParams, attention, forward, init_params, load_checkpoint, mhsa,
                                patchify, save_checkpoint)

GOLDEN = Path(__file__).parent / "golden_logits.json"


def weights(params):
    return {n: t.data for n, t in params.tensors.items()}


class TestConfig:
    def test_token_count(self):
        cfg = ViTConfig()
        assert cfg.num_tokens == 17 and cfg.head_dim == 16

    @pytest.mark.parametrize("changes", [{"image_size": 30}, {"heads": 5}, {"dropout_rate": 1.0}, {"depth": 0}])
    def test_invalid(self, changes):
        with pytest.raises(ContractError):
            ViTConfig(**changes)

    def test_params_must_match_config(self, toy_config):
        params = init_params(toy_config)
        tensors = dict(params.tensors)
        tensors["cls"] = Tensor(np.zeros((2, toy_config.dim)))
        with pytest.raises(ContractError):
            ViTParams(toy_config, tensors)


class TestPatchify:
    def test_shapes(self):
        assert patchify(np.zeros((1, 32, 32)), 16).shape == (4, 256)
        assert patchify(np.zeros((3, 16, 16)), 16).shape == (1, 768)

    def test_constant_image(self):
        rows = patchify(np.full((3, 32, 32), 0.25), 8)
        assert np.all(rows == rows[0])

    def test_matches_loop_oracle(self, rng):
        img = rng.standard_normal((3, 32, 32))
        np.testing.assert_array_equal(patchify(img, 8), oracles.patches(img, 8))

    def test_not_divisible(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((3, 30, 30)), 8)


class TestAttention:
    def test_single_token(self, rng):
        q, k, v = (Tensor(rng.standard_normal((1, 4))) for _ in range(3))
        out, a = attention(q, k, v)
        np.testing.assert_array_equal(a.data, [[1.0]])
        np.testing.assert_allclose(out.data, v.data)

    def test_zero_query_is_uniform(self, rng):
        k, v = Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((5, 3)))
        out, a = attention(Tensor(np.zeros((5, 3))), k, v)
        np.testing.assert_allclose(a.data, np.full((5, 5), 0.2), atol=1e-15)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-14)

    def test_matches_straight_line(self, rng):
        q, k, v = (rng.standard_normal((3, 2)) for _ in range(3))
        out, a = attention(Tensor(q), Tensor(k), Tensor(v))
        ref = oracles.softmax(q @ k.T / np.sqrt(2.0))
        np.testing.assert_allclose(a.data, ref, atol=1e-14)
        np.testing.assert_allclose(out.data, ref @ v, atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            attention(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))), Tensor(np.ones((3, 2))))


class TestMHSA:
    def test_zero_output_projection_is_residual(self, toy_params, rng):
        toy_params["layers.0.wo"].data = np.zeros_like(toy_params["layers.0.wo"].data)
        x = rng.standard_normal((17, 64))
        np.testing.assert_array_equal(mhsa(Tensor(x), toy_params, 0).data, x)

    def test_single_head(self, rng):
        cfg = ViTConfig(dim=16, heads=1)
        params = init_params(cfg, 1)
        x = rng.standard_normal((6, 16))
        w = weights(params)
        q, k, v = x @ w["layers.0.wq"], x @ w["layers.0.wk"], x @ w["layers.0.wv"]
        ref = oracles.softmax(q @ k.T / 4.0) @ v @ w["layers.0.wo"] + x
        np.testing.assert_allclose(mhsa(Tensor(x), params, 0).data, ref, atol=1e-12)

    def test_multi_head_oracle(self, toy_params, rng):
        x = rng.standard_normal((9, 64))
        w = weights(toy_params)
        q, k, v = x @ w["layers.1.wq"], x @ w["layers.1.wk"], x @ w["layers.1.wv"]
        heads = [oracles.softmax(q[:, s] @ k[:, s].T / 4.0) @ v[:, s]
                 for s in (slice(i * 16, (i + 1) * 16) for i in range(4))]
        ref = np.concatenate(heads, axis=1) @ w["layers.1.wo"] + x
        np.testing.assert_allclose(mhsa(Tensor(x), toy_params, 1).data, ref, atol=1e-12)


class TestForward:
    """Full forward pass against the loop-based reference."""

    def test_matches_reference(self, toy_params, images):
        logits, _ = forward(images, toy_params)
        for b, img in enumerate(images):
            ref = oracles.vit_logits(img, weights(toy_params), toy_params.config)
            np.testing.assert_allclose(logits.data[b], ref, atol=1e-10)

    def test_single_image(self, toy_params, images):
        batched, _ = forward(images, toy_params)
        single, _ = forward(images[1], toy_params)
        assert single.shape == (5,)
        np.testing.assert_allclose(single.data, batched.data[1], atol=1e-12)

    def test_zero_model_gives_equal_logits(self, toy_config, images):
        logits, _ = forward(images, init_params(toy_config, zero=True))
        assert np.all(logits.data == logits.data[:, :1])

    def test_deterministic(self, toy_params, images):
        a, _ = forward(images, toy_params)
        b, _ = forward(images, toy_params)
        assert a.data.tobytes() == b.data.tobytes()

    def test_golden_logits(self, toy_params, images):
        golden = json.loads(GOLDEN.read_text())
        img = np.random.default_rng(golden["image_seed"]).uniform(0.0, 1.0, size=(3, 32, 32))
        logits, _ = forward(img, toy_params)
        np.testing.assert_allclose(logits.data, golden["logits"], rtol=0, atol=1e-10)

    def test_trace_is_row_stochastic(self, toy_params, images):
        _, tr = forward(images, toy_params, trace=True)
        assert len(tr.entries) == 4
        for a in tr.entries:
            assert a.shape == (3, 4, 17, 17)
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_trace_matches_reference(self, toy_params, images):
        _, tr = forward(images[:1], toy_params, trace=True)
        ref = []
        oracles.vit_logits(images[0], weights(toy_params), toy_params.config, attn=ref)
        for l in range(4):
            for h in range(4):
                np.testing.assert_allclose(tr.matrix(l, h), ref[l][h], atol=1e-12)

    def test_patch_permutation_without_positions(self, toy_params, images):
        toy_params["pos"].data = np.zeros_like(toy_params["pos"].data)
        img = images[0]
        # swap two 8x8 patches
        swapped = img.copy()
        swapped[:, 0:8, 0:8], swapped[:, 16:24, 8:16] = img[:, 16:24, 8:16], img[:, 0:8, 0:8]
        a, _ = forward(img, toy_params)
        b, _ = forward(swapped, toy_params)
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_head_gradient_matches_differences(self, toy_params, images):
        labels = np.array([0, 3, 1])

        def f(w):
            view = ViTParams(toy_params.config, {**toy_params.tensors, "head.weight": w}, dict(toy_params.frozen))
            return T.cross_entropy(forward(images, view)[0], labels)

        assert T.grad_check(f, Tensor(toy_params["head.weight"].data), probes=40) < 1e-4

    def test_dropout_only_with_rng(self, toy_params, images):
        a, _ = forward(images, toy_params)
        b, _ = forward(images, toy_params, rng=np.random.default_rng(0))
        assert not np.allclose(a.data, b.data)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, toy_params, tmp_path):
        extra = {"prompts.0": np.arange(6.0).reshape(2, 3)}
        save_checkpoint(tmp_path / "m.vpt", toy_params, extra, {"note": "x"})
        params, tensors, meta = load_checkpoint(tmp_path / "m.vpt")
        assert params.config == toy_params.config
        for name, t in toy_params.tensors.items():
            assert params[name].data.tobytes() == t.data.tobytes()
            assert params.frozen[name] == toy_params.frozen[name]
        np.testing.assert_array_equal(tensors["prompts.0"], extra["prompts.0"])
        assert meta == {"note": "x"}

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.vpt").write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "bad.vpt")

    def test_truncated(self, toy_params, tmp_path):
        save_checkpoint(tmp_path / "m.vpt", toy_params)
        raw = (tmp_path / "m.vpt").read_bytes()
        (tmp_path / "t.vpt").write_bytes(raw[:-100])
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "t.vpt")
