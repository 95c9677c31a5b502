import math
import time

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rris.config import ModelConfig, load_model_config
from rris.errors import ExpressionError, ModelError
from rris.masks import BinaryMask, area
from rris.metrics import ReferenceEval, reference_r_iou, robust_recall
from rris.toy import autograd as ag
from rris.toy.autograd import Var
from rris.toy.gradcheck import check_model_gradients
from rris.toy.layers import (
    Linear,
    MhcaParams,
    attention_row_error,
    init_mhca,
    init_vltf,
    mhca,
    named_leaves,
    param_count,
    standardize,
    vltf_forward,
)
from rris.toy.model import (
    ForwardTrace,
    binary_head,
    cross_entropy,
    downsample_majority,
    encoder_forward,
    exist_loss,
    forward,
    fpn_decode,
    init_params,
    predict_mask,
    seg_loss,
    total_loss,
    trace_to_json,
)
from rris.toy.prompt import text_prompt_concat, token_ids, word_id
from rris.toy.train import synthetic_batch, train


@pytest.fixture(scope="module")
def config():
    return ModelConfig()


@pytest.fixture(scope="module")
def params(config):
    return init_params(config)


@pytest.fixture(scope="module")
def batch(config):
    return synthetic_batch(config, pairs=1, seed=0)


@pytest.fixture(scope="module")
def trace(params, config, batch):
    return forward(params, config, batch.images, batch.token_ids)


def _identity_mhca(dim, heads=1):
    eye = Linear(weight=np.eye(dim), bias=np.zeros(dim))
    return MhcaParams(query=eye, key=eye, value=eye, output=eye, heads=heads)


def _naive_mhca(p, query, key, value):
    """Per-sample, per-head scalar loops."""
    n, lq, _ = query.shape
    lk = key.shape[1]
    dim, heads = p.query.weight.shape[1], p.heads
    dh = dim // heads
    out = np.zeros((n, lq, p.output.weight.shape[1]))
    for b in range(n):
        q = query[b] @ p.query.weight + p.query.bias
        k = key[b] @ p.key.weight + p.key.bias
        v = value[b] @ p.value.weight + p.value.bias
        context = np.zeros((lq, dim))
        for h in range(heads):
            cols = range(h * dh, (h + 1) * dh)
            for i in range(lq):
                scores = [sum(q[i, c] * k[j, c] for c in cols) / math.sqrt(dh) for j in range(lk)]
                top = max(scores)
                weights = [math.exp(s - top) for s in scores]
                total = sum(weights)
                for c in cols:
                    context[i, c] = sum(weights[j] / total * v[j, c] for j in range(lk))
        out[b] = context @ p.output.weight + p.output.bias
    return out


class TestMhca:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        query, kv = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 1, 4))
        out, attention = mhca(_identity_mhca(4, heads=2), Var(query), Var(kv), Var(kv))
        assert_allclose(out.value, np.broadcast_to(kv, (2, 5, 4)), atol=1e-15)
        assert (attention.value == 1.0).all()

    def test_zero_query_uniform_attention(self):
        kv = np.random.default_rng(1).normal(size=(1, 6, 4))
        _, attention = mhca(_identity_mhca(4), Var(np.zeros((1, 3, 4))), Var(kv), Var(kv))
        assert_allclose(attention.value, np.full((1, 1, 3, 6), 1 / 6), atol=1e-15)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        p = init_mhca(rng, d_query=3, d_kv=5, dim=4, d_out=6, heads=2, scale=1.0)
        query, key, value = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 4, 5))
        out, attention = mhca(p, Var(query), Var(key), Var(value))
        assert out.shape == (2, 3, 6)
        assert attention.shape == (2, 2, 3, 4)
        assert_allclose(out.value, _naive_mhca(p, query, key, value), rtol=0, atol=1e-12)

    def test_key_value_length_mismatch(self):
        p = _identity_mhca(4)
        with pytest.raises(ModelError) as err:
            mhca(p, Var(np.zeros((1, 2, 4))), Var(np.zeros((1, 3, 4))), Var(np.zeros((1, 2, 4))))
        assert err.value.code == "shape-mismatch"

    def test_channel_mismatch(self):
        with pytest.raises(ModelError):
            mhca(_identity_mhca(4), Var(np.zeros((1, 2, 3))), Var(np.zeros((1, 2, 4))), Var(np.zeros((1, 2, 4))))


class TestVltf:
    @pytest.fixture
    def vltf(self):
        return init_vltf(np.random.default_rng(3), 6, 5, 8, 2, memory_tokens=20, blank_tokens=10, scale=0.5)

    def test_shapes(self, vltf):
        rng = np.random.default_rng(4)
        vision = rng.normal(size=(2, 9, 6))
        out = vltf_forward(vltf, Var(vision), Var(rng.normal(size=(2, 7, 5))))
        assert out.fused.shape == vision.shape
        assert out.cond_tokens.shape == (2, 20, 8)
        assert out.blank_tokens.shape == (2, 10, 8)
        assert out.attention["mhca1"].shape == (2, 2, 7, 9)
        assert out.attention["mhca2"].shape == (2, 2, 20, 7)
        assert out.attention["mhca3"].shape == (2, 2, 9, 30)

    def test_blank_tokens_ignore_language(self, vltf):
        rng = np.random.default_rng(5)
        vision = Var(rng.normal(size=(1, 9, 6)))
        a = vltf_forward(vltf, vision, Var(rng.normal(size=(1, 7, 5))))
        b = vltf_forward(vltf, vision, Var(rng.normal(size=(1, 3, 5))))
        assert np.array_equal(a.blank_tokens.value, b.blank_tokens.value)
        assert not np.array_equal(a.cond_tokens.value, b.cond_tokens.value)

    def test_no_blank_tokens(self):
        p = init_vltf(np.random.default_rng(6), 6, 5, 8, 2, memory_tokens=20, blank_tokens=0, scale=0.5)
        out = vltf_forward(p, Var(np.ones((1, 4, 6))), Var(np.ones((1, 2, 5))))
        assert out.attention["mhca3"].shape[-1] == 20
        assert out.fused.shape == (1, 4, 6)

    def test_batch_mismatch(self, vltf):
        with pytest.raises(ModelError):
            vltf_forward(vltf, Var(np.ones((2, 4, 6))), Var(np.ones((1, 2, 5))))


class TestEncoder:
    def test_stage_sizes(self, trace):
        assert [s.shape[1] for s in trace.stages] == [64, 16, 4, 1]
        assert [f.shape for f in trace.fused] == [s.shape for s in trace.stages[1:]]

    def test_standardize(self):
        x = Var(np.random.default_rng(7).normal(2.0, 10.0, size=(2, 16, 3)))
        out = standardize(x, 1e-6).value
        assert np.abs(out.mean(axis=1)).max() < 1e-9
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6

    def test_trace_finite(self, trace):
        values = trace.stages + trace.fused + trace.features + trace.masks + [trace.e_hat]
        assert all(np.isfinite(v.value).all() for v in values)

    def test_attention_rows_sum_to_one(self, trace):
        assert attention_row_error([a.value for a in trace.attention.values()]) < 1e-9
        assert len(trace.attention) == 10

    def test_token_overflow(self, params, config, batch):
        ids = np.zeros((2, 21), dtype=int)
        with pytest.raises(ModelError) as err:
            encoder_forward(params, config, batch.images, ids)
        assert err.value.code == "token-overflow"

    def test_image_not_divisible(self, params, config):
        with pytest.raises(ModelError) as err:
            encoder_forward(params, config, np.zeros((1, 40, 40, 3)), np.zeros((1, 3), dtype=int))
        assert err.value.code == "shape-mismatch"

    def test_deterministic(self, config, batch):
        a = forward(init_params(config), config, batch.images, batch.token_ids)
        b = forward(init_params(config), config, batch.images, batch.token_ids)
        assert np.array_equal(a.e_hat.value, b.e_hat.value)
        assert all(np.array_equal(x.value, y.value) for x, y in zip(a.masks, b.masks))


class TestDecoder:
    def test_mask_resolutions(self, trace):
        assert [m.shape for m in trace.masks] == [(2, 8, 8, 2), (2, 4, 4, 2), (2, 2, 2, 2), (2, 1, 1, 2)]
        assert trace.features[0].shape[1:3] == (8, 8)

    def test_rejects_non_pyramid(self, params, trace):
        with pytest.raises(ModelError):
            fpn_decode(params, trace.stages[0], trace.fused[1], trace.fused[1], trace.fused[2])


def _naive_ce(scores, target):
    total = 0.0
    for index in np.ndindex(target.shape):
        s0, s1 = scores[index]
        top = max(s0, s1)
        log_norm = top + math.log(math.exp(s0 - top) + math.exp(s1 - top))
        total += log_norm - (s1 if target[index] else s0)
    return total / target.size


def _naive_pool(gt, factor):
    n, h, w = gt.shape
    out = np.zeros((n, h // factor, w // factor), dtype=bool)
    for b, i, j in np.ndindex(out.shape):
        cell = gt[b, i * factor:(i + 1) * factor, j * factor:(j + 1) * factor]
        out[b, i, j] = cell.sum() * 2 >= factor * factor
    return out


class TestLosses:
    def test_seg_loss_matches_oracle(self):
        rng = np.random.default_rng(8)
        masks = [Var(rng.normal(size=(2, s, s, 2))) for s in (8, 4, 2, 1)]
        gt = rng.random((2, 32, 32)) < 0.4
        expected = sum(
            (1.0 if i == 0 else 0.4) * _naive_ce(m.value, _naive_pool(gt, 32 // m.shape[1])) for i, m in enumerate(masks)
        )
        assert seg_loss(masks, gt, 32, 0.4).value == pytest.approx(expected, abs=1e-12)

    def test_lambda_zero_is_finest_ce(self, trace, batch):
        ce = cross_entropy(trace.masks[0], downsample_majority(batch.gt, 4)).value
        assert abs(seg_loss(trace.masks, batch.gt, 32, 0.0).value - ce) <= 1e-12

    def test_perfect_logits(self):
        gt = np.zeros((1, 32, 32), dtype=bool)
        gt[0, :16] = True
        masks = []
        for s in (8, 4, 2, 1):
            target = downsample_majority(gt, 32 // s)
            masks.append(Var(np.where(target[..., None], [-50.0, 50.0], [50.0, -50.0])))
        assert seg_loss(masks, gt, 32, 0.4).value < 1e-12

    def test_majority_ties_go_to_foreground(self):
        gt = np.array([[[True, False], [False, True]]])
        assert downsample_majority(gt, 2).tolist() == [[[True]]]
        assert (downsample_majority(np.zeros((1, 4, 4), dtype=bool), 2) == False).all()  # noqa: E712

    def test_exist_loss_half(self):
        assert abs(exist_loss(0.5, 1).value - math.log(2.0)) < 1e-12
        assert abs(exist_loss(0.5, 0).value - math.log(2.0)) < 1e-12

    def test_exist_loss_confident(self):
        assert exist_loss(1 - 1e-9, 1).value < 1e-8

    def test_exist_loss_batch(self):
        loss = exist_loss(Var(np.array([0.3, 0.6])), np.array([1.0, 0.0]))
        assert loss.value == pytest.approx(-(math.log(0.3) + math.log(0.4)) / 2, abs=1e-12)

    def test_exist_loss_gradient(self):
        e_hat = Var(np.array([0.3, 0.6]))
        exist_loss(e_hat, np.array([1.0, 0.0])).backward()
        assert_allclose(e_hat.grad, [-1.0 / 0.6, 1.0 / 0.8])

    def test_gamma_zero(self, trace, batch):
        ls = seg_loss(trace.masks, batch.gt, 32, 0.4)
        le = exist_loss(trace.e_hat, batch.exists)
        assert abs(total_loss(ls, le, 0.0).value - ls.value) <= 1e-12
        assert total_loss(ls, le, 1.0).value == pytest.approx(ls.value + le.value)


class TestBinaryHead:
    def test_zero_output_unit(self, params, trace):
        zeroed = Linear(weight=np.zeros_like(params.head_out.weight), bias=np.zeros(1))
        p = type(params)(**{**params.__dict__, "head_out": zeroed})
        e_hat, _ = binary_head(p, trace.features[0], trace.tokens_last, "V")
        assert (e_hat.value == 0.5).all()

    def test_probability_inside_unit_interval(self, trace):
        assert ((trace.e_hat.value > 0) & (trace.e_hat.value < 1)).all()

    def test_query_modes_differ(self, batch):
        v_config, t_config = ModelConfig(query_mode="V"), ModelConfig(query_mode="T")
        v = forward(init_params(v_config), v_config, batch.images, batch.token_ids)
        t = forward(init_params(t_config), t_config, batch.images, batch.token_ids)
        assert v.attention["head"].shape[2:] == (64, 30)
        assert t.attention["head"].shape[2:] == (30, 64)
        assert not np.array_equal(v.e_hat.value, t.e_hat.value)


class TestPredictMask:
    def _trace(self, e_hat, m1):
        return ForwardTrace(image_size=32, masks=[Var(m1[None])], e_hat=Var(np.array([e_hat])))

    def test_absent_gives_empty(self):
        m1 = np.zeros((8, 8, 2))
        m1[..., 1] = 9.0
        mask = predict_mask(self._trace(0.2, m1))
        assert mask.shape == (32, 32)
        assert area(mask) == 0

    def test_foreground_everywhere(self):
        m1 = np.zeros((8, 8, 2))
        m1[..., 1] = 1.0
        assert area(predict_mask(self._trace(0.9, m1))) == 32 * 32

    def test_ties_are_background(self):
        m1 = np.zeros((8, 8, 2))
        m1[0, 0, 1] = 1.0
        mask = predict_mask(self._trace(0.9, m1))
        assert area(mask) == 16
        assert mask.bits[:4, :4].all()

    def test_real_trace_resolution(self, trace):
        assert predict_mask(trace, index=1).shape == (32, 32)

    @pytest.mark.parametrize("e_hat, recall", [(0.2, 1.0), (0.9, 0.0)])
    def test_head_decides_robust_recall(self, e_hat, recall):
        m1 = np.zeros((8, 8, 2))
        m1[:4, :4, 1] = 9.0
        answer = predict_mask(self._trace(e_hat, m1))
        gt = np.zeros((32, 32), dtype=bool)
        gt[:16, :16] = True
        ref = ReferenceEval(ref_id=1, positives=[(BinaryMask(gt), BinaryMask(gt))], negatives=[answer])
        assert robust_recall(ref) == recall
        assert reference_r_iou(ref) == (1.0 if recall else 0.5)


class TestGradients:
    def test_full_model(self):
        start = time.perf_counter()
        report = check_model_gradients(sample_size=100, seed=0)
        assert report.samples == 100
        assert report.groups == 18
        assert report.max_rel_error < 1e-4
        assert report.passed
        assert time.perf_counter() - start < 30.0

    def test_corrupted(self):
        report = check_model_gradients(sample_size=20, seed=1, corrupt=True)
        assert not report.passed

    def test_wrong_sqrt_backward_fails(self, monkeypatch):
        def skewed_sqrt(a):
            out = np.sqrt(a.value)
            return Var(out, (a,), lambda g: (g * 5.0 / out,))

        monkeypatch.setattr(ag, "sqrt", skewed_sqrt)
        report = check_model_gradients(sample_size=100, seed=0)
        assert not report.passed
        assert report.max_rel_error > 1e-2

    def test_every_parameter_named_once(self, params):
        names = [name for name, _ in named_leaves(params)]
        assert len(names) == len(set(names))
        assert sum(np.size(leaf) for _, leaf in named_leaves(params)) == param_count(params)
        assert "vltfs.0.blank_tokens" in names


class TestPrompt:
    def test_two_sentences(self):
        prompt = text_prompt_concat(["woman on the right", "woman in black"])
        assert prompt.text == "woman on the right woman in black"
        assert not prompt.truncated

    def test_single_sentence(self):
        assert text_prompt_concat(["Man in the LEFT."]).text == "man in the left"

    def test_truncation(self):
        prompt = text_prompt_concat(["one two three four five six seven"] * 3)
        assert len(prompt.tokens) == 20
        assert prompt.truncated

    def test_empty(self):
        with pytest.raises(ExpressionError):
            text_prompt_concat([" ", "?"])

    def test_token_ids_stable(self):
        ids = token_ids("man in the left", 64)
        assert ids.tolist() == [word_id(w, 64) for w in ("man", "in", "the", "left")]
        assert ((ids >= 0) & (ids < 64)).all()

    def test_token_overflow(self):
        with pytest.raises(ModelError) as err:
            token_ids(" ".join(["word"] * 21), 64)
        assert err.value.code == "token-overflow"


class TestConfigAndDemo:
    def test_defaults(self, config):
        assert (config.seg_weight, config.exist_weight) == (0.4, 1.0)
        assert (config.memory_tokens, config.blank_tokens) == (20, 10)
        assert config.max_text_len == 20

    def test_shipped_config_matches_defaults(self, annotations_path):
        assert load_model_config(annotations_path.parent / "model_config.json") == ModelConfig()

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            ModelConfig(seg_weight=1.5)
        with pytest.raises(ValueError):
            ModelConfig(fusion_dim=9, fusion_heads=2)

    def test_trace_dump(self, trace):
        dump = trace_to_json(trace)
        for sums in dump["attention_row_sums"].values():
            assert np.abs(np.array(sums) - 1.0).max() < 1e-9
        assert dump["mask_shapes"][0] == [2, 8, 8, 2]

    def test_training_reduces_loss(self):
        losses = train(ModelConfig(), steps=8, lr=0.5, seed=0)
        assert len(losses) == 8
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]
