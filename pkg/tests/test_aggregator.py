import numpy as np
import pytest

from premix import autograd as ag
from premix.aggregator import (
    ArchConfig,
    ForwardCache,
    MixConfig,
    MixSpec,
    attention_pool,
    backward,
    classify,
    encoder_forward,
    init_params,
    logits_forward,
    masked_softmax,
    positional_encoding,
    project,
    projection_forward,
)
from premix.bagio import PaddedBatch, pad_batch

from conftest import TINY, central_difference, perturbed_params, random_bags

GROUPS = {
    "embedding": ("embed.",),
    "attention": (".attn.",),
    "feed_forward": (".ff1.", ".ff2."),
    "normalization": (".ln1.", ".ln2.", "lnf.", ".bn."),
    "pooling": ("pool.",),
    "projector": ("proj",),
    "classifier": ("cls.",),
}


def group_of(name):
    for g, keys in GROUPS.items():
        if any(k in name for k in keys):
            if g == "projector" and ".bn." in name:
                return "normalization"
            return g
    raise KeyError(name)


class TestInit:
    def test_seeded(self):
        a, b = init_params(3, TINY), init_params(3, TINY)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])

    def test_biases_zero_scales_one(self):
        p = init_params(0, TINY)
        for k, v in p.tensors.items():
            if k.endswith(".b"):
                assert not v.any()
            if k.endswith(".g"):
                assert np.all(v == 1)

    def test_param_count_closed_form(self):
        d, h, L, a = 192, 192, 2, 128
        p1, p2, p3 = 512, 512, 256
        per_layer = 2 * h + 4 * (h * h + h) + 2 * h + (h * 4 * h + 4 * h) + (4 * h * h + h)
        expected = (
            d * h + h
            + L * per_layer
            + 2 * h
            + h * a + a + a
            + (h * p1 + p1) + 2 * p1 + (p1 * p2 + p2) + 2 * p2 + (p2 * p3 + p3)
            + h * 2 + 2
        )
        cfg = ArchConfig(d=d, hidden=h, layers=L, heads=3)
        assert init_params(0, cfg).count() == expected

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            init_params(0, ArchConfig(hidden=10, heads=3))


class TestMaskedSoftmax:
    def test_basic(self):
        np.testing.assert_allclose(masked_softmax([1.0, 1.0, 1.0], [True, True, False]), [0.5, 0.5, 0])

    def test_single_valid(self):
        np.testing.assert_array_equal(masked_softmax([3.0, -2.0], [False, True]), [0, 1])

    def test_shift_invariant(self, rng):
        s = rng.normal(size=6)
        v = np.array([1, 0, 1, 1, 0, 1], bool)
        np.testing.assert_allclose(masked_softmax(s, v), masked_softmax(s + 7.3, v), atol=1e-15)

    def test_distribution(self, rng):
        s = rng.normal(size=(4, 9)) * 10
        v = rng.random((4, 9)) < 0.5
        v[:, 0] = True
        w = masked_softmax(s, v)
        assert np.all(w[~v] == 0) and np.all(w[v] > 0)
        np.testing.assert_allclose(w.sum(1), 1.0)

    def test_all_invalid(self):
        with pytest.raises(ValueError):
            masked_softmax([1.0, 2.0], [False, False])


class TestEncoder:
    @pytest.mark.parametrize("mix", [None, MixSpec("loc1", 0.3), MixSpec("loc2", 0.6), MixSpec("loc3", 0.2)])
    def test_padding_invariance(self, tiny_params, rng, mix):
        bags = random_bags(rng, [5, 3, 4, 2])
        short, long = pad_batch(bags), pad_batch(bags, r_max=9)
        h1, v1, _ = encoder_forward(tiny_params, short, mix)
        h2, v2, _ = encoder_forward(tiny_params, long, mix)
        np.testing.assert_array_equal(v2[:, :5], v1)
        assert np.abs(h2.data[:, :5] - h1.data).max() <= 1e-6
        assert np.all(h2.data[:, 5:] == 0)

    def test_padded_rows_zero(self, tiny_params, tiny_batch):
        h, v, _ = encoder_forward(tiny_params, tiny_batch)
        assert np.all(h.data[~v] == 0)

    def test_zero_value_output_projection(self, rng):
        cfg = TINY
        p = perturbed_params(cfg, seed=4)
        for k in ("enc0.attn.v.w", "enc0.attn.v.b", "enc0.attn.o.w", "enc0.attn.o.b"):
            p.tensors[k][...] = 0
        batch = pad_batch(random_bags(rng, [4, 2]))
        h, _, _ = encoder_forward(p, batch)

        # hand computation: embed + positions, then only the feed-forward residual
        t = p.tensors
        m = batch.valid[..., None]

        def ln(x, g, b):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(var + cfg.ln_eps) * g + b

        def gelu(x):
            return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

        x = (batch.data @ t["embed.w"] + t["embed.b"] + positional_encoding(4, cfg.hidden)) * m
        f = gelu(ln(x, t["enc0.ln2.g"], t["enc0.ln2.b"]) @ t["enc0.ff1.w"] + t["enc0.ff1.b"])
        x = x + (f @ t["enc0.ff2.w"] + t["enc0.ff2.b"]) * m
        expected = ln(x, t["enc.lnf.g"], t["enc.lnf.b"]) * m
        np.testing.assert_allclose(h.data, expected, atol=1e-12)

    def test_identical_samples_identical_rows(self, tiny_params, rng):
        bags = random_bags(rng, [4])
        batch = pad_batch([bags[0], bags[0]])
        h, _, _ = encoder_forward(tiny_params, batch)
        np.testing.assert_array_equal(h.data[0], h.data[1])

    def test_wrong_dim(self, tiny_params, rng):
        with pytest.raises(ValueError):
            encoder_forward(tiny_params, pad_batch(random_bags(rng, [3], d=5)))

    def test_deterministic_with_drawn_mix(self, tiny_params, tiny_batch):
        outs = []
        for _ in range(2):
            mix = MixConfig().draw(np.random.default_rng(8))
            outs.append(encoder_forward(tiny_params, tiny_batch, mix)[0].data)
        np.testing.assert_array_equal(*outs)

    def test_mix_union_mask(self, tiny_params, tiny_batch):
        _, v, _ = encoder_forward(tiny_params, tiny_batch, MixSpec("loc2", 0.5))
        np.testing.assert_array_equal(v, tiny_batch.valid | tiny_batch.valid[::-1])


class TestPooling:
    def test_identical_rows(self, tiny_params, rng):
        row = rng.normal(size=8)
        hidden = np.tile(row, (1, 5, 1))
        emb = attention_pool(tiny_params, hidden, np.ones((1, 5), bool))
        np.testing.assert_allclose(emb.data[0], row, atol=1e-14)

    def test_single_valid(self, tiny_params, rng):
        hidden = rng.normal(size=(2, 3, 8))
        valid = np.array([[True, False, False], [False, True, False]])
        emb = attention_pool(tiny_params, hidden, valid)
        np.testing.assert_allclose(emb.data, [hidden[0, 0], hidden[1, 1]], atol=1e-14)

    def test_permutation_invariance_without_positions(self, rng):
        cfg = ArchConfig(**{**TINY.to_dict(), "positional": False, "projector": TINY.projector})
        p = perturbed_params(cfg, seed=2)
        bag = random_bags(rng, [6])[0]
        perm = rng.permutation(6)
        b1 = pad_batch([bag], r_max=8)
        b2 = PaddedBatch(b1.data.copy(), b1.valid.copy())
        b2.data[0, :6] = bag.features[perm]
        for b in (b1, b2):
            h, v, _ = encoder_forward(p, b)
            b.pooled = attention_pool(p, h, v).data
        np.testing.assert_allclose(b1.pooled, b2.pooled, atol=1e-12)


class TestHeads:
    def test_identity_projector(self, rng):
        cfg = ArchConfig(**{**TINY.to_dict(), "identity_projector": True, "projector": ()})
        p = init_params(0, cfg, np.float64)
        e = rng.normal(size=(3, 8))
        np.testing.assert_array_equal(project(p, e).data, e)

    def test_projector_shape(self, tiny_params, rng):
        assert project(tiny_params, rng.normal(size=(4, 8))).shape == (4, 5)

    def test_eval_mode_deterministic(self, tiny_params, rng):
        e = rng.normal(size=(1, 8))
        a = project(tiny_params, e, training=False).data
        b = project(tiny_params, e, training=False).data
        np.testing.assert_array_equal(a, b)

    def test_train_batch_of_one_rejected(self, tiny_params, rng):
        with pytest.raises(ValueError):
            project(tiny_params, rng.normal(size=(1, 8)), training=True)

    def test_zero_classifier_uniform(self, tiny_params, rng):
        tiny_params.tensors["cls.w"][...] = 0
        tiny_params.tensors["cls.b"][...] = 0
        logits = classify(tiny_params, rng.normal(size=(3, 8))).data
        assert logits.shape == (3, 2) and not logits.any()
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        np.testing.assert_allclose(p, 0.5)

    def test_bias_constant_cancels(self, tiny_params, rng):
        e = rng.normal(size=(3, 8))
        a = classify(tiny_params, e).data
        tiny_params.tensors["cls.b"] += 4.0
        b = classify(tiny_params, e).data
        np.testing.assert_allclose(a[:, 1] - a[:, 0], b[:, 1] - b[:, 0], atol=1e-12)


def _fd_check(params, loss_fn, tol=1e-4):
    lv = params.leaves()
    cache = ForwardCache(lv, [], loss_fn(lv))
    grads, _ = backward(cache)
    fd = dict(zip(params.tensors, central_difference(lambda: loss_fn(None).item(), list(params.tensors.values()))))
    by_group = {}
    for k in params.tensors:
        num, den = by_group.get(group_of(k), (0.0, 0.0))
        by_group[group_of(k)] = (num + np.sum((grads[k] - fd[k]) ** 2), den + np.sum(fd[k] ** 2))
    return {g: np.sqrt(n) / max(np.sqrt(d), 1e-300) for g, (n, d) in by_group.items()}, grads, fd


class TestBackward:
    def test_classifier_path_matches_fd(self, rng):
        cfg = ArchConfig(d=6, hidden=8, layers=1, heads=2, attn_dim=5, projector=(7, 6))
        p = perturbed_params(cfg, seed=5)
        batch = pad_batch(random_bags(rng, [4, 2, 3]))
        y = np.array([0, 1, 1])

        def loss(lv):
            logits, _ = logits_forward(p, batch, MixSpec("loc2", 0.35), lv)
            ls = ag.log_softmax(logits)
            return -(ls * np.eye(2)[y]).sum()

        rel, _, _ = _fd_check(p, loss)
        for g in ("embedding", "attention", "feed_forward", "normalization", "pooling", "classifier"):
            assert rel[g] <= 1e-4, (g, rel[g])

    def test_padded_input_grad_zero(self, tiny_params, rng):
        batch = pad_batch(random_bags(rng, [4, 2, 3]), r_max=6)
        z, cache = projection_forward(tiny_params, batch)
        _, gin = backward(cache, rng.normal(size=z.shape))
        assert np.all(gin[~batch.valid] == 0)
        assert np.abs(gin[batch.valid]).sum() > 0

    def test_linearity_in_output_grad(self, tiny_params, tiny_batch, rng):
        logits, cache = logits_forward(tiny_params, tiny_batch)
        g = rng.normal(size=logits.shape)
        g1, i1 = backward(cache, g)
        g2, i2 = backward(cache, 2 * g)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(i2, 2 * i1, rtol=1e-12)

    def test_input_grad_matches_fd(self, tiny_params, rng):
        batch = pad_batch(random_bags(rng, [3, 2]))
        w = rng.normal(size=(2, 2))

        def f():
            return float((logits_forward(tiny_params, batch)[0].data * w).sum())

        _, cache = logits_forward(tiny_params, batch)
        _, gin = backward(cache, w)
        (fd,) = central_difference(f, [batch.data])
        np.testing.assert_allclose(gin, fd, rtol=1e-5, atol=1e-8)

    def test_shape_mismatch(self, tiny_params, tiny_batch):
        _, cache = logits_forward(tiny_params, tiny_batch)
        with pytest.raises(ValueError):
            backward(cache, np.ones((3, 3)))


class TestMixPolicy:
    def test_one_location_per_batch(self):
        rng = np.random.default_rng(0)
        draws = [MixConfig().draw(rng) for _ in range(300)]
        assert {d.location for d in draws} == {"loc1", "loc2", "loc3"}

    def test_all_locations(self, tiny_params, tiny_batch):
        spec = MixConfig(locations=("loc1", "loc3"), policy="all").draw(np.random.default_rng(0))
        assert spec.sites == ("loc1", "loc3")
        h, _, _ = encoder_forward(tiny_params, tiny_batch, spec)
        one, _, _ = encoder_forward(tiny_params, tiny_batch, MixSpec("loc1", spec.lam))
        assert not np.allclose(h.data, one.data)

    def test_disabled(self):
        assert MixConfig(locations=()).draw(np.random.default_rng(0)) is None

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            MixConfig(policy="some")
        with pytest.raises(ValueError):
            MixSpec(("loc1", "loc9"), 0.5)
