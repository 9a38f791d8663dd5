"""Model architectures, parameter accounting, and checkpoint persistence."""

import json
import math

import numpy as np
import pytest

from contourlab.autodiff import Adam, Tensor, mse
from contourlab.contour import Contour
from contourlab.errors import CheckpointError, ValidationError
from contourlab.models import (
    CHECKPOINT_VERSION,
    EMBEDDING_DIM,
    HEAD_HIDDEN,
    MLP_HIDDEN,
    PAIR_CLASSES,
    SLOTFILL_BOTTLENECK,
    SLOTFILL_HIDDEN,
    VGG_BLOCKS,
    CheckpointBundle,
    DownstreamMlp,
    SiameseModel,
    SlotFillModel,
    VggConfig,
    embed,
    load_checkpoint,
    save_checkpoint,
    siamese_forward,
)

RNG = np.random.default_rng(2024)


def cents_batch(n, scale=50.0, rng=RNG):
    return rng.normal(0.0, scale, (n, 100))


def make_contour(rng, rec="rec", start=0):
    vals = rng.normal(0.0, 50.0, 100)
    return Contour(recording_id=rec, start_frame=start,
                   values_cents=vals, values_hz=np.full(100, 220.0),
                   valid_length=100)


def walk_siamese_params(width):
    """Architecture-walking oracle, independent of the model classes.

    Blocks of (2, 2, 4, 4, 4) width-3 convolutions with channel counts
    max(1, round(base * width)) for base in (64, 128, 256, 512, 512),
    each block followed by a 2x pool (floor), then flatten -> 128 dense,
    then the concat head (256 hidden, 2 logits).
    """
    chans = [max(1, round(base * width)) for _, base in VGG_BLOCKS]
    total, c_in, length = 0, 1, 100
    for (n_convs, _), c_out in zip(VGG_BLOCKS, chans):
        for _ in range(n_convs):
            total += c_out * c_in * 3 + c_out
            c_in = c_out
        length //= 2
    total += EMBEDDING_DIM * (chans[-1] * length) + EMBEDDING_DIM
    total += HEAD_HIDDEN * (2 * EMBEDDING_DIM) + HEAD_HIDDEN
    total += PAIR_CLASSES * HEAD_HIDDEN + PAIR_CLASSES
    return total


class TestParameterCounts:
    @pytest.mark.parametrize("width,frozen", [
        (1.0, 6_941_122),
        (0.25, 534_034),
        (0.1, 153_132),
    ])
    def test_siamese_matches_walker_and_frozen_value(self, width, frozen):
        model = SiameseModel(VggConfig(width_multiplier=width), seed=0)
        assert walk_siamese_params(width) == frozen
        assert model.n_parameters() == frozen

    def test_slotfill_count_closed_form(self):
        h, k, n = SLOTFILL_HIDDEN, SLOTFILL_BOTTLENECK, 100
        closed = ((h * n + h) + (h * h + h) + (k * h + k)
                  + (h * k + h) + (h * h + h) + (n * h + n))
        assert closed == 8_888_440
        assert SlotFillModel(seed=0).n_parameters() == closed

    def test_mlp_count_closed_form(self):
        model = DownstreamMlp(input_dim=17, n_classes=3, seed=0)
        closed = ((MLP_HIDDEN * 17 + MLP_HIDDEN)
                  + (MLP_HIDDEN * MLP_HIDDEN + MLP_HIDDEN)
                  + (3 * MLP_HIDDEN + 3))
        assert model.n_parameters() == closed == 19_203

    def test_flatten_size_is_three_times_last_channels(self):
        # pooling trace 100 -> 50 -> 25 -> 12 -> 6 -> 3
        for width in (1.0, 0.25, 0.1):
            model = SiameseModel(VggConfig(width_multiplier=width), seed=0)
            chans = model.config.channels()
            w = model.param_dict()["encoder.embed.weight"]
            assert w.shape == (EMBEDDING_DIM, 3 * chans[-1])

    def test_channels_floor_at_one(self):
        assert VggConfig(width_multiplier=0.001).channels() == [1, 1, 1, 1, 1]

    def test_width_bounds_validated(self):
        with pytest.raises(ValidationError):
            VggConfig(width_multiplier=0.0).validate()
        with pytest.raises(ValidationError):
            VggConfig(width_multiplier=1.5).validate()
        with pytest.raises(ValidationError):
            VggConfig(input_length=50).validate()
        with pytest.raises(ValidationError):
            VggConfig(embedding_dim=64).validate()


class TestSiameseForward:
    def test_same_contour_same_embedding(self):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=0)
        rng = np.random.default_rng(1)
        c = make_contour(rng)
        _, ea, eb = siamese_forward(model, c, c)
        assert np.array_equal(ea.data, eb.data)

    def test_swapping_inputs_swaps_embeddings(self):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=0)
        rng = np.random.default_rng(2)
        a, b = make_contour(rng), make_contour(rng)
        _, ea, eb = siamese_forward(model, a, b)
        _, ea2, eb2 = siamese_forward(model, b, a)
        assert np.array_equal(ea.data, eb2.data)
        assert np.array_equal(eb.data, ea2.data)

    def test_full_width_embedding_has_128_components(self):
        model = SiameseModel(VggConfig(), seed=0)
        rng = np.random.default_rng(3)
        logits, ea, eb = siamese_forward(model, make_contour(rng), make_contour(rng))
        assert ea.data.shape == (128,)
        assert eb.data.shape == (128,)
        assert logits.data.shape == (2,)
        assert np.all(np.isfinite(logits.data))

    def test_zero_input_embeds_to_zero(self):
        # freshly initialized biases are zero, so the all-zero contour
        # stays zero through every conv/ReLU/pool stage
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=4)
        e = model.encode(np.zeros((1, 100)))
        assert np.array_equal(e.data, np.zeros((1, 128), dtype=np.float32))

    def test_wrong_length_rejected(self):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=0)
        with pytest.raises(ValidationError):
            model.encode(np.zeros((1, 99)))

    def test_forward_deterministic(self):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=5)
        x = cents_batch(3)
        assert np.array_equal(model.encode(x).data, model.encode(x).data)

    def test_no_accidental_shift_invariance(self):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=6)
        x = cents_batch(1)
        e0 = model.encode(x).data
        e1 = model.encode(x + 100.0).data
        e1_again = model.encode(x + 100.0).data
        assert np.array_equal(e1, e1_again)
        assert not np.allclose(e0, e1)

    def test_branches_share_weights_gradients_accumulate(self):
        # encoding the same input through both branches must push exactly
        # twice the single-branch gradient into the shared parameters
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=7)
        x = cents_batch(1)
        target = Tensor(np.zeros((1, 128), dtype=np.float32))
        (mse(model.encode(x), target) + mse(model.encode(x), target)).backward()
        doubled = {p.name: p.grad.copy() for p in model.parameters()
                   if p.grad is not None}
        model.zero_grad()
        mse(model.encode(x), target).backward()
        single = {p.name: p.grad.copy() for p in model.parameters()
                  if p.grad is not None}
        assert set(doubled) == set(single)
        assert any(np.any(g != 0) for g in single.values())
        for name, g in single.items():
            np.testing.assert_allclose(doubled[name], 2.0 * g, rtol=1e-5, atol=0)


class TestSiameseLoss:
    def test_zeroed_logit_layer_gives_ln2(self):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=0)
        for p in model.parameters():
            if p.name.startswith("head.logits"):
                p.data[...] = 0.0
        for label in (0, 1):
            loss = model.pair_loss(cents_batch(1), cents_batch(1),
                                   np.array([label]))
            assert float(loss.data) == pytest.approx(math.log(2.0), rel=1e-6)

    def test_overfits_one_pair_monotonically(self):
        # float64 keeps the loss representable all the way down; float32
        # underflows to exactly 0 once the pair is fully memorized
        model = SiameseModel(VggConfig(width_multiplier=0.25), seed=0,
                             dtype=np.float64)
        optimizer = Adam(model.parameters(), lr=1e-4)
        rng = np.random.default_rng(7)
        a = rng.normal(0, 50, (1, 100))
        b = rng.normal(0, 50, (1, 100))
        y = np.array([1])
        losses = []
        for _ in range(50):
            model.zero_grad()
            loss = model.pair_loss(a, b, y)
            losses.append(float(loss.data))
            loss.backward()
            optimizer.step()
        assert all(later < earlier
                   for earlier, later in zip(losses, losses[1:]))


class TestSlotFill:
    def test_encode_decode_shapes(self):
        model = SlotFillModel(seed=0, hidden_dim=64)
        e = model.encode(cents_batch(5))
        assert e.data.shape == (5, SLOTFILL_BOTTLENECK)
        out = model.decode(e)
        assert out.data.shape == (5, 100)

    def test_loss_terms_average(self):
        model = SlotFillModel(seed=1, hidden_dim=64)
        terms = model.triple_loss_terms(cents_batch(2), cents_batch(2),
                                        cents_batch(2))
        want = (float(terms["recon1"].data) + float(terms["recon3"].data)
                + float(terms["slot"].data)) / 3.0
        assert float(terms["total"].data) == pytest.approx(want, rel=1e-6)

    def test_random_init_loss_positive(self):
        model = SlotFillModel(seed=3, hidden_dim=64)
        loss = model.triple_loss(cents_batch(1, 100.0), cents_batch(1, 100.0),
                                 cents_batch(1, 100.0))
        assert float(loss.data) > 0.0

    def test_identity_on_subspace_gives_exact_zero(self):
        # Hand-built weights make D(E(x)) = x on contours supported by the
        # first 20 coordinates, with E linear there. ReLU is bypassed via
        # the (x+, x-) split, so E(p3) - E(p1) = E(p3 - p1) exactly: with
        # p2 = p3 - p1 every loss term vanishes. Coordinates are multiples
        # of 1200 so the 1/1200 input scaling stays exact in float32.
        H, K, N = 64, SLOTFILL_BOTTLENECK, 100
        model = SlotFillModel(seed=0, hidden_dim=H)

        def split_pm(n_out, n_in):
            w = np.zeros((n_out, n_in), dtype=np.float32)
            for i in range(K):
                w[i, i] = 1.0
                w[K + i, i] = -1.0
            return w

        def recombine(n_out, n_in):
            w = np.zeros((n_out, n_in), dtype=np.float32)
            for i in range(K):
                w[i, i] = 1.0
                w[i, K + i] = -1.0
            return w

        passthrough = np.zeros((H, H), dtype=np.float32)
        for i in range(2 * K):
            passthrough[i, i] = 1.0
        zeros = lambda n: np.zeros(n, dtype=np.float32)
        model.load_param_dict({
            "encoder.dense1.weight": split_pm(H, N),
            "encoder.dense1.bias": zeros(H),
            "encoder.dense2.weight": passthrough,
            "encoder.dense2.bias": zeros(H),
            "encoder.bottleneck.weight": recombine(K, H),
            "encoder.bottleneck.bias": zeros(K),
            "decoder.dense1.weight": split_pm(H, K),
            "decoder.dense1.bias": zeros(H),
            "decoder.dense2.weight": passthrough,
            "decoder.dense2.bias": zeros(H),
            "decoder.output.weight": recombine(N, H),
            "decoder.output.bias": zeros(N),
        })
        rng = np.random.default_rng(5)
        p1 = np.zeros((1, N))
        p3 = np.zeros((1, N))
        p1[0, :K] = 1200.0 * rng.integers(-4, 5, K)
        p3[0, :K] = 1200.0 * rng.integers(-4, 5, K)
        terms = model.triple_loss_terms(p1, p3 - p1, p3)
        assert float(terms["total"].data) == 0.0
        assert float(terms["slot"].data) == 0.0

    def test_constructor_validation(self):
        with pytest.raises(ValidationError):
            SlotFillModel(hidden_dim=0)
        with pytest.raises(ValidationError):
            SlotFillModel(contour_len=64)


class TestDownstreamMlp:
    def test_logits_and_predict_shapes(self):
        model = DownstreamMlp(input_dim=6, n_classes=4, seed=0)
        x = RNG.normal(0, 1, (9, 6))
        logits = model.logits(x)
        assert logits.data.shape == (9, 4)
        pred = model.predict(x)
        assert np.array_equal(pred, np.argmax(logits.data, axis=1))

    def test_zeroed_output_layer_gives_ln_k(self):
        model = DownstreamMlp(input_dim=5, n_classes=3, seed=0)
        for p in model.parameters():
            if p.name.startswith("logits"):
                p.data[...] = 0.0
        loss = model.loss(RNG.normal(0, 1, (7, 5)), np.arange(7) % 3)
        assert float(loss.data) == pytest.approx(math.log(3.0), rel=1e-6)

    def test_constructor_validation(self):
        with pytest.raises(ValidationError):
            DownstreamMlp(input_dim=0, n_classes=2)
        with pytest.raises(ValidationError):
            DownstreamMlp(input_dim=4, n_classes=1)

    def test_feature_dimension_mismatch(self):
        model = DownstreamMlp(input_dim=6, n_classes=2, seed=0)
        with pytest.raises(ValidationError):
            model.logits(np.zeros((2, 5)))


class TestCheckpointRoundTrip:
    def test_siamese_forward_bit_identical(self, tmp_path):
        model = SiameseModel(VggConfig(width_multiplier=0.1), seed=3)
        x = cents_batch(4)
        before = model.encode(x).data
        path = save_checkpoint(model, tmp_path / "m.ckpt.json")
        rebuilt = load_checkpoint(path).build_model()
        after = rebuilt.encode(x).data
        assert np.array_equal(before, after)

    def test_slotfill_config_preserved(self, tmp_path):
        model = SlotFillModel(seed=1, hidden_dim=64)
        path = save_checkpoint(model, tmp_path / "s.ckpt.json")
        bundle = load_checkpoint(path)
        assert bundle.kind == "slotfill"
        assert bundle.config == {"hidden_dim": 64, "contour_len": 100}
        rebuilt = bundle.build_model()
        x = cents_batch(2)
        assert np.array_equal(model.encode(x).data, rebuilt.encode(x).data)

    def test_optimizer_state_round_trip(self, tmp_path):
        model = DownstreamMlp(input_dim=4, n_classes=2, seed=0)
        optimizer = Adam(model.parameters(), lr=1e-3)
        x = RNG.normal(0, 1, (8, 4))
        y = np.arange(8) % 2
        for _ in range(3):
            model.zero_grad()
            model.loss(x, y).backward()
            optimizer.step()
        path = save_checkpoint(model, tmp_path / "o.ckpt.json",
                               optimizer=optimizer,
                               train_config={"note": 1}, rng_seed=42)
        bundle = load_checkpoint(path)
        state = optimizer.state_dict()
        assert bundle.optimizer["t"] == state["t"] == 3
        assert bundle.optimizer["lr"] == pytest.approx(1e-3)
        for name in state["m"]:
            np.testing.assert_array_equal(
                bundle.optimizer["m"][name],
                state["m"][name].astype(np.float32))
            np.testing.assert_array_equal(
                bundle.optimizer["v"][name],
                state["v"][name].astype(np.float32))
        assert bundle.train_config == {"note": 1}
        assert bundle.rng_seed == 42
        assert bundle.format_version == CHECKPOINT_VERSION

    def test_parameter_order_preserved(self, tmp_path):
        model = SlotFillModel(seed=0, hidden_dim=64)
        order = [p.name for p in model.parameters()]
        path = save_checkpoint(model, tmp_path / "p.ckpt.json")
        assert load_checkpoint(path).param_order == order


class TestCheckpointErrors:
    @pytest.fixture()
    def saved(self, tmp_path):
        model = SlotFillModel(seed=0, hidden_dim=64)
        path = save_checkpoint(model, tmp_path / "t.ckpt.json")
        return path, json.loads(path.read_text())

    def rewrite(self, path, doc):
        path.write_text(json.dumps(doc))
        return path

    def test_tampered_shape_names_parameter(self, saved):
        path, doc = saved
        doc["params"][0]["shape"] = [999]
        with pytest.raises(CheckpointError,
                           match=doc["params"][0]["name"]):
            load_checkpoint(self.rewrite(path, doc))

    def test_unknown_format_version(self, saved):
        path, doc = saved
        doc["format_version"] = 99
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(self.rewrite(path, doc))

    def test_corrupt_payload(self, saved):
        path, doc = saved
        doc["params"][0]["data"] = "!!!not base64!!!"
        with pytest.raises(CheckpointError, match="undecodable"):
            load_checkpoint(self.rewrite(path, doc))

    def test_duplicate_parameter(self, saved):
        path, doc = saved
        doc["params"].append(dict(doc["params"][0]))
        with pytest.raises(CheckpointError, match="duplicate"):
            load_checkpoint(self.rewrite(path, doc))

    def test_missing_kind(self, saved):
        path, doc = saved
        del doc["kind"]
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(self.rewrite(path, doc))

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.ckpt.json"
        path.write_text("garbage{{{")
        with pytest.raises(CheckpointError, match="JSON"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(tmp_path / "absent.ckpt.json")

    def test_unknown_kind_rejected_at_build(self, saved):
        path, doc = saved
        doc["kind"] = "transformer"
        with pytest.raises(CheckpointError, match="transformer"):
            load_checkpoint(self.rewrite(path, doc)).build_model()

    def test_load_param_dict_mismatches(self):
        model = SlotFillModel(seed=0, hidden_dim=64)
        good = model.param_dict()
        missing = dict(good)
        missing.pop("decoder.output.bias")
        with pytest.raises(CheckpointError, match="decoder.output.bias"):
            model.load_param_dict(missing)
        extra = dict(good)
        extra["bogus.weight"] = np.zeros(3)
        with pytest.raises(CheckpointError, match="bogus.weight"):
            model.load_param_dict(extra)
        bad_shape = {k: v.copy() for k, v in good.items()}
        bad_shape["encoder.dense1.bias"] = np.zeros(7, dtype=np.float32)
        with pytest.raises(CheckpointError, match="encoder.dense1.bias"):
            model.load_param_dict(bad_shape)


@pytest.fixture(scope="module")
def siamese_bundle():
    model = SiameseModel(VggConfig(width_multiplier=0.1), seed=0)
    return CheckpointBundle.from_model(model)


class TestEmbed:
    def test_empty_input_gives_0xd(self, siamese_bundle):
        out = embed(siamese_bundle, [])
        assert out.shape == (0, 128)

    def test_duplicate_contours_identical_rows(self, siamese_bundle):
        rng = np.random.default_rng(0)
        c = make_contour(rng)
        out = embed(siamese_bundle, [c, c, make_contour(rng), c])
        assert np.array_equal(out[0], out[1])
        assert np.array_equal(out[0], out[3])
        assert not np.allclose(out[0], out[2])

    def test_rows_follow_input_order(self, siamese_bundle):
        rng = np.random.default_rng(1)
        contours = [make_contour(rng) for _ in range(5)]
        fwd = embed(siamese_bundle, contours)
        rev = embed(siamese_bundle, contours[::-1])
        assert np.allclose(fwd, rev[::-1])

    def test_ten_thousand_contours_full_matrix(self, siamese_bundle):
        rng = np.random.default_rng(2)
        vals = rng.normal(0, 50, (10_000, 100))
        contours = [Contour("r", 0, v, np.full(100, 220.0), 100) for v in vals]
        out = embed(siamese_bundle, contours, batch_size=512)
        assert out.shape == (10_000, 128)
        assert out.dtype == np.float32
        assert np.all(np.isfinite(out))

    def test_slotfill_dimension_is_20(self):
        bundle = CheckpointBundle.from_model(SlotFillModel(seed=0, hidden_dim=64))
        rng = np.random.default_rng(3)
        out = embed(bundle, [make_contour(rng), make_contour(rng)])
        assert out.shape == (2, 20)

    def test_embed_accepts_checkpoint_path(self, siamese_bundle, tmp_path):
        path = siamese_bundle.save(tmp_path / "e.ckpt.json")
        rng = np.random.default_rng(4)
        contours = [make_contour(rng)]
        assert np.array_equal(embed(str(path), contours),
                              embed(siamese_bundle, contours))

    def test_mlp_checkpoint_rejected(self, tmp_path):
        path = save_checkpoint(DownstreamMlp(4, 2, seed=0),
                               tmp_path / "mlp.ckpt.json")
        rng = np.random.default_rng(5)
        with pytest.raises(CheckpointError, match="encoder"):
            embed(path, [make_contour(rng)])
