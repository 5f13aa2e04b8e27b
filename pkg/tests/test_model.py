from dataclasses import replace

import numpy as np
import pytest

from spatial_mtl import autodiff as ad
from spatial_mtl.autodiff import LossWeights, Tape
from spatial_mtl.model import (
    PAD, ArrayDataset, Checkpoint, DivergenceError, ModelConfig, SpatialViLT, Targets, Tokenizer,
    accuracy, compute_total_loss, coordinate_stats, patchify, predict, prepare_arrays, tokenize, train,
)
from spatial_mtl.scenegen import SceneConfig, build_dataset, caption_vocabulary


@pytest.fixture(scope="module")
def data32():
    return build_dataset(40, 11, config=SceneConfig(width=32, height=32))


@pytest.fixture(scope="module")
def config32():
    return ModelConfig(vocab=tuple(caption_vocabulary()), image_size=32, patch_size=8, embed_dim=16, num_layers=1,
                       num_heads=2, mlp_ratio=2, max_text_len=12, target_map_size=8, decoder_channels=4, seed=0)


@pytest.fixture(scope="module")
def arrays32(data32, config32):
    return {k: prepare_arrays(v, config32) for k, v in data32.items()}


def batch(config, rng, b=3):
    images = rng.random((b, config.image_size, config.image_size, 3)).astype(np.float32)
    tok = SpatialViLT.tokenizer_for(config)
    tokens = tok.batch(["the cube is left of the ball", "the ball is near the slab", "the block is inside the cube"][:b])
    t = config.target_map_size
    targets = Targets(rng.random((b, t, t)), rng.normal(size=(b, 3, t, t)),
                      (rng.random((b, t, t)) > 0.5).astype(float), (rng.random((b, t, t)) > 0.5).astype(float))
    return images, tokens, targets, np.array([0, 1, 1][:b])


class TestTokenizer:
    def test_example(self, vocab):
        tok = Tokenizer(("[PAD]", "[CLS]", "[UNK]") + vocab, 7)
        ids = tok.tokenize("the cube is left of the ball")
        assert ids[0] == tok.cls_id and len(ids) == 7
        assert tok.detokenize(ids) == "the cube is left of the"
        assert tokenize("the zebra", tok.vocab, 4) == [tok.cls_id, tok.index["the"], tok.unk_id, tok.pad_id]

    def test_special_tokens_first(self, vocab):
        cfg = ModelConfig(vocab=vocab)
        assert cfg.vocab[:3] == ("[PAD]", "[CLS]", "[UNK]") and cfg.vocab.index(PAD) == 0

    def test_round_trip_generated(self, vocab):
        from spatial_mtl.scenegen import generate_sample
        from spatial_mtl.taxonomy import META_CATEGORIES
        tok = SpatialViLT.tokenizer_for(ModelConfig(vocab=vocab))
        for i in range(200):
            caption = generate_sample(i, 2, i % 2, META_CATEGORIES[i % 7]).caption_text
            assert tok.detokenize(tok.tokenize(caption)) == caption


class TestForward:
    def test_shapes(self, tiny_config, rng):
        model = SpatialViLT(tiny_config)
        images, tokens, _, _ = batch(tiny_config, rng)
        out = model.forward(images, tokens)
        t = tiny_config.target_map_size
        assert out.logits.shape == (3, 2)
        assert out.depth.shape == (3, t, t) and out.coords.shape == (3, 3, t, t) and out.edges.shape == (3, t, t)
        assert ((out.edges.data > 0) & (out.edges.data < 1)).all()

    def test_patchify(self):
        img = np.arange(2 * 4 * 4 * 3, dtype=np.float32).reshape(2, 4, 4, 3)
        p = patchify(img, 2)
        assert p.shape == (2, 4, 12)
        np.testing.assert_array_equal(p[0, 1], img[0, :2, 2:4].reshape(-1))

    def test_batch_permutation_equivariant(self, tiny_config, rng):
        model = SpatialViLT(tiny_config)
        images, tokens, _, _ = batch(tiny_config, rng)
        perm = [2, 0, 1]
        a = model.forward(images, tokens)
        b = model.forward(images[perm], tokens[perm])
        np.testing.assert_allclose(b.logits.data, a.logits.data[perm], atol=1e-6)
        np.testing.assert_allclose(b.depth.data, a.depth.data[perm], atol=1e-6)

    def test_padding_invisible(self, tiny_config, rng):
        # extra PAD positions are masked keys, so a longer text budget must not change the logits
        model = SpatialViLT(tiny_config)
        images, tokens, _, _ = batch(tiny_config, rng)
        changed = tokens.copy()
        changed[:, -1] = 0
        np.testing.assert_array_equal(model.forward(images, changed).logits.data,
                                      model.forward(images, tokens).logits.data)

    def test_deterministic_init(self, tiny_config):
        a, b = SpatialViLT(tiny_config), SpatialViLT(tiny_config)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        c = SpatialViLT(replace(tiny_config, seed=4))
        assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)

    @pytest.mark.parametrize("kw", [dict(patch_size=5), dict(num_heads=3), dict(target_map_size=5),
                                    dict(variant="joint")])
    def test_bad_config(self, tiny_config, kw):
        with pytest.raises(ValueError):
            replace(tiny_config, **kw)

    def test_config_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestLoss:
    def _losses(self, config, variant, images, tokens, targets, labels, weights=LossWeights()):
        model = SpatialViLT(config.with_variant(variant))
        with ad.precision(np.float64):
            for p in model.params.values():
                p.data = p.data.astype(np.float64)
            out = model.forward(images.astype(np.float64), tokens)
            return compute_total_loss(out, targets, labels, weights, variant, model)[1]

    def test_baseline_is_classification_only(self, tiny_config, rng):
        images, tokens, targets, labels = batch(tiny_config, rng)
        parts = self._losses(tiny_config, "baseline", images, tokens, targets, labels)
        assert parts.total == parts.classification
        assert (parts.depth, parts.coords, parts.edges) == (0.0, 0.0, 0.0)

    def test_total_is_weighted_sum(self, tiny_config, rng):
        images, tokens, targets, labels = batch(tiny_config, rng)
        weights = LossWeights(0.5, 0.25, 2.0)
        parts = self._losses(tiny_config, "spatial", images, tokens, targets, labels, weights)
        assert parts.total == pytest.approx(parts.recompute_total(weights), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_masked_ignores_outside(self, tiny_config, seed):
        rng = np.random.default_rng(seed)
        images, tokens, targets, labels = batch(tiny_config, rng)
        outside = targets.mask == 0
        perturbed = Targets(np.where(outside, rng.random(outside.shape), targets.depth),
                            np.where(outside[:, None], 10 * rng.normal(size=targets.coords.shape), targets.coords),
                            np.where(outside, 1 - targets.edges, targets.edges), targets.mask)
        a = self._losses(tiny_config, "masked_spatial", images, tokens, targets, labels)
        b = self._losses(tiny_config, "masked_spatial", images, tokens, perturbed, labels)
        for name in ("depth", "coords", "edges"):
            assert abs(getattr(a, name) - getattr(b, name)) < 1e-12

    def test_all_ones_mask_matches_spatial(self, tiny_config, rng):
        images, tokens, targets, labels = batch(tiny_config, rng)
        ones = replace(targets, mask=np.ones_like(targets.mask))
        model = SpatialViLT(tiny_config)
        out = model.forward(images, tokens)
        _, spatial = compute_total_loss(out, ones, labels, LossWeights(), "spatial", model)
        _, masked = compute_total_loss(out, ones, labels, LossWeights(), "masked_spatial", model)
        assert spatial == masked

    def test_missing_targets(self, tiny_config, rng):
        images, tokens, targets, labels = batch(tiny_config, rng)
        out = SpatialViLT(tiny_config).forward(images, tokens)
        with pytest.raises(ValueError):
            compute_total_loss(out, None, labels, LossWeights(), "spatial")
        with pytest.raises(ValueError):
            compute_total_loss(out, replace(targets, mask=None), labels, LossWeights(), "masked_spatial")

    def test_auxiliary_weights_reach_encoder(self, tiny_config, rng):
        images, tokens, targets, labels = batch(tiny_config, rng)

        def encoder_grad(weights):
            model = SpatialViLT(tiny_config.with_variant("spatial"))
            with Tape() as tape:
                out = model.forward(images, tokens)
                loss, _ = compute_total_loss(out, targets, labels, weights, "spatial", model)
                tape.backward(loss)
            return model.params["patch_w"].grad.copy(), model.params

        base, params = encoder_grad(LossWeights.zeros())
        aux, _ = encoder_grad(LossWeights())
        assert not np.allclose(base, aux)
        # with zero weights the decoders receive no gradient at all
        assert all(p.grad is None or not p.grad.any() for k, p in params.items() if k.startswith("dec_"))


class TestTraining:
    def test_epochs_zero(self, config32, arrays32):
        model = SpatialViLT(config32.with_variant("spatial"), coordinate_stats(arrays32["train"]))
        before = {k: p.data.copy() for k, p in model.params.items()}
        result = train(model, arrays32["train"], arrays32["val"], epochs=0)
        assert result.metrics == [] and result.best_epoch == 0
        for k, p in result.model.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_deterministic(self, config32, arrays32):
        def run():
            model = SpatialViLT(config32.with_variant("masked_spatial"), coordinate_stats(arrays32["train"]))
            return train(model, arrays32["train"], arrays32["val"], epochs=2, lr=1e-3, batch_size=8)

        a, b = run(), run()
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
        assert [m["train_total"] for m in a.metrics] == [m["train_total"] for m in b.metrics]

    def test_metrics_and_best_epoch(self, config32, arrays32):
        model = SpatialViLT(config32.with_variant("spatial"), coordinate_stats(arrays32["train"]))
        result = train(model, arrays32["train"], arrays32["val"], epochs=3, lr=1e-3, batch_size=8, patience=1)
        accs = [m["val_accuracy"] for m in result.metrics]
        assert result.best_epoch == 1 + int(np.argmax(accs))
        assert accuracy(result.model, arrays32["val"]) == accs[result.best_epoch - 1]
        for m in result.metrics:
            total = m["train_classification"] + 0.5 * (m["train_depth"] + m["train_coords"] + m["train_edges"])
            assert m["train_total"] == pytest.approx(total, rel=1e-5)

    def test_memorises_small_set(self, config32, arrays32):
        ds = arrays32["train"]
        model = SpatialViLT(config32.with_variant("baseline"))
        result = train(model, ds, ds, epochs=40, lr=3e-3, batch_size=8, patience=40)
        assert max(m["val_accuracy"] for m in result.metrics) == 1.0

    def test_divergence_names_batch(self, config32, arrays32):
        ds = arrays32["train"]
        bad = ArrayDataset(ds.ids, ds.images.copy(), ds.tokens, ds.labels, ds.relations,
                           ds.depth.copy(), ds.coords, ds.edges, ds.mask)
        bad.depth[3] = np.nan
        model = SpatialViLT(config32.with_variant("spatial"), coordinate_stats(ds))
        with pytest.raises(DivergenceError, match=r"epoch 1, batch \d+"):
            train(model, bad, arrays32["val"], epochs=1, batch_size=8)

    def test_variant_needs_targets(self, config32, arrays32):
        ds = arrays32["train"]
        bare = ArrayDataset(ds.ids, ds.images, ds.tokens, ds.labels, ds.relations)
        with pytest.raises(ValueError):
            train(SpatialViLT(config32.with_variant("spatial")), bare, arrays32["val"], epochs=1)

    def test_predict_records(self, config32, arrays32):
        model = SpatialViLT(config32.with_variant("baseline"))
        records = predict(model, arrays32["val"], "baseline")
        assert [r["id"] for r in records] == arrays32["val"].ids
        assert np.mean([r["correct"] for r in records]) == accuracy(model, arrays32["val"])
        assert set(records[0]) == {"id", "model_id", "predicted", "relation", "meta_category", "correct"}


class TestCheckpoint:
    def test_round_trip(self, config32, arrays32):
        model = SpatialViLT(config32.with_variant("spatial"), coordinate_stats(arrays32["train"]))
        result = train(model, arrays32["train"], arrays32["val"], epochs=1, batch_size=8)
        blob = result.checkpoint.to_bytes()
        back = Checkpoint.from_bytes(blob)
        assert back.to_bytes() == blob
        assert back.optimizer["step"] == result.checkpoint.optimizer["step"] > 0
        restored = back.to_model()
        probe = arrays32["test"]
        np.testing.assert_array_equal(restored.logits_numpy(probe.images, probe.tokens),
                                      result.model.logits_numpy(probe.images, probe.tokens))

    def test_file_round_trip(self, tmp_path, tiny_config):
        ck = Checkpoint.from_model(SpatialViLT(tiny_config))
        ck.save(tmp_path / "m.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes() == ck.to_bytes()
        assert Checkpoint.load(tmp_path / "m.ckpt").to_bytes() == ck.to_bytes()

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            Checkpoint.from_bytes(b"NOTACKPT" + bytes(8))

    def test_shape_mismatch(self, tiny_config):
        ck = Checkpoint.from_model(SpatialViLT(tiny_config))
        ck.params["patch_w"] = np.zeros((1, 1), np.float32)
        with pytest.raises(ValueError):
            ck.to_model()
