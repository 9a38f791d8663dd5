"""Sklearn-facing estimator wrappers: params, fitting, and composition."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from contourlab.contour import Contour, ContourSequence, segment_track
from contourlab.errors import ValidationError
from contourlab.estimators import (
    BlockScaler,
    ContextPairEmbedder,
    MlpClassifier,
    SlotFillEmbedder,
    StatFeatureTransformer,
    as_contour_list,
    as_sequence_list,
)
from contourlab.ingest import SynthSpec, generate_synthetic_corpus

RNG = np.random.default_rng(11)


def make_contour(rec="rec", start=0, seed=None):
    rng = RNG if seed is None else np.random.default_rng(seed)
    vals = rng.normal(0.0, 50.0, 100)
    return Contour(recording_id=rec, start_frame=start,
                   values_cents=vals, values_hz=np.full(100, 220.0),
                   valid_length=100)


@pytest.fixture(scope="module")
def synth_seqs():
    tracks, _ = generate_synthetic_corpus(
        SynthSpec(n_recordings=6, frames_per_recording=520, seed=5))
    return [segment_track(t) for t in tracks]


SMALL = dict(width_multiplier=0.1, max_epochs=30, batch_size=10,
             augmentation=False, n_train_samples=40, n_val_samples=20)


class TestInputHelpers:
    def test_contours_pass_through(self):
        contours = [make_contour(start=i * 100) for i in range(3)]
        assert as_contour_list(contours) == contours

    def test_sequences_flatten(self):
        contours = [make_contour(start=i * 100) for i in range(3)]
        seq = ContourSequence("rec", contours)
        assert as_contour_list([seq, contours[0]]) == contours + [contours[0]]

    def test_wrong_types_rejected(self):
        with pytest.raises(ValidationError, match="expected Contour"):
            as_contour_list([np.zeros(100)])
        with pytest.raises(ValidationError, match="expected ContourSequence"):
            as_sequence_list([make_contour()])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError, match="no contours"):
            as_contour_list([])
        with pytest.raises(ValidationError, match="no contour sequences"):
            as_sequence_list([])


class TestStatFeatureTransformer:
    def test_shape_and_statelessness(self):
        contours = [make_contour(start=i * 100) for i in range(4)]
        t = StatFeatureTransformer()
        out = t.fit(contours).transform(contours)
        assert out.shape == (4, 17)
        assert np.array_equal(out, StatFeatureTransformer().transform(contours))

    def test_get_params_round_trip(self):
        t = StatFeatureTransformer(skip_short=True)
        assert t.get_params() == {"skip_short": True}
        assert clone(t).skip_short is True


class TestBlockScaler:
    def test_train_statistics_applied_to_new_data(self):
        rng = np.random.default_rng(0)
        train = rng.normal(3.0, 2.0, (50, 4))
        scaler = BlockScaler().fit(train)
        z = scaler.transform(train)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)
        other = scaler.transform(rng.normal(0.0, 1.0, (10, 4)))
        mu, sigma = scaler.stats_
        assert not np.allclose(other.mean(axis=0), 0.0, atol=0.1)
        assert np.allclose(scaler.transform(mu[None, :]), 0.0, atol=1e-12)

    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            BlockScaler().transform(np.zeros((2, 2)))


class TestContextPairEmbedder:
    def test_get_params_and_clone(self):
        est = ContextPairEmbedder(scheme="contiguous", width_multiplier=0.25,
                                  resample_per_epoch=True)
        params = est.get_params()
        assert params["scheme"] == "contiguous"
        assert params["width_multiplier"] == 0.25
        assert params["resample_per_epoch"] is True
        twin = clone(est)
        assert twin.get_params() == params
        assert not hasattr(twin, "checkpoint_")

    def test_unknown_scheme_rejected(self, synth_seqs):
        with pytest.raises(ValidationError, match="unknown pairing scheme"):
            ContextPairEmbedder(scheme="triplet", **SMALL).fit(synth_seqs)

    def test_unfitted_transform_rejected(self):
        with pytest.raises(NotFittedError, match="not fitted"):
            ContextPairEmbedder().transform([make_contour()])

    def test_fit_transform_shapes(self, synth_seqs):
        est = ContextPairEmbedder(scheme="file", **SMALL).fit(synth_seqs)
        assert est.checkpoint_.train_config["kind"] == "file"
        assert est.checkpoint_.train_config["resample_per_epoch"] is False
        assert len(est.history_) == 30
        contours = synth_seqs[0].contours
        out = est.transform(contours)
        assert out.shape == (len(contours), 128)
        assert np.all(np.isfinite(out))
        both = est.transform([synth_seqs[0], synth_seqs[1]])
        assert both.shape[0] == len(synth_seqs[0].contours) + len(synth_seqs[1].contours)

    def test_config_passes_through(self, synth_seqs):
        est = ContextPairEmbedder(scheme="file", resample_per_epoch=True, **SMALL)
        est.fit(synth_seqs)
        cfg = est.checkpoint_.train_config
        assert cfg["resample_per_epoch"] is True
        assert cfg["width_multiplier"] == 0.1
        assert cfg["augmentation"] is False

    def test_fit_needs_sequences(self):
        with pytest.raises(ValidationError, match="expected ContourSequence"):
            ContextPairEmbedder(**SMALL).fit([make_contour()])


class TestSlotFillEmbedder:
    def test_fit_transform_shapes(self, synth_seqs):
        est = SlotFillEmbedder(max_epochs=30, batch_size=8, augmentation=False,
                               n_train_samples=8, n_val_samples=4)
        out = est.fit(synth_seqs).transform(synth_seqs[0].contours)
        assert out.shape == (len(synth_seqs[0].contours), 20)
        assert est.checkpoint_.train_config["kind"] == "slotfill"

    def test_get_params_defaults(self):
        params = SlotFillEmbedder().get_params()
        assert params["max_epochs"] == 100
        assert params["resample_per_epoch"] is False


class TestMlpClassifier:
    def test_fit_predict_separable(self):
        rng = np.random.default_rng(0)
        y = np.array(["a", "b", "c"] * 20)
        x = np.eye(3)[[ord(v) - 97 for v in y]] * 4 + rng.normal(0, 0.2, (60, 3))
        clf = MlpClassifier(max_epochs=30).fit(x, y)
        assert np.array_equal(clf.classes_, ["a", "b", "c"])
        assert np.mean(clf.predict(x) == y) == 1.0
        proba = clf.predict_proba(x)
        assert proba.shape == (60, 3)
        assert np.allclose(proba.sum(axis=1), 1.0)
        assert np.array_equal(clf.classes_[np.argmax(proba, axis=1)], clf.predict(x))

    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            MlpClassifier().predict(np.zeros((2, 3)))
        with pytest.raises(NotFittedError):
            MlpClassifier().predict_proba(np.zeros((2, 3)))

    def test_label_count_mismatch(self):
        with pytest.raises(ValidationError, match="labels for"):
            MlpClassifier().fit(np.zeros((4, 2)), [0, 1])

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError, match="two classes"):
            MlpClassifier().fit(np.zeros((4, 2)), [1, 1, 1, 1])

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (30, 4))
        y = rng.integers(0, 2, 30)
        a = MlpClassifier(max_epochs=5, seed=3).fit(x, y).predict_proba(x)
        b = MlpClassifier(max_epochs=5, seed=3).fit(x, y).predict_proba(x)
        assert np.array_equal(a, b)


class TestComposition:
    def test_stat_pipeline_classifies_recordings(self, synth_seqs):
        contours = [c for s in synth_seqs for c in s.contours]
        labels = np.array([c.recording_id for c in contours])
        pipe = make_pipeline(StatFeatureTransformer(), BlockScaler(),
                             MlpClassifier(max_epochs=40, seed=0))
        pipe.fit(contours, labels)
        assert np.mean(pipe.predict(contours) == labels) > 0.5

    def test_embedder_feeds_scaler(self, synth_seqs):
        est = ContextPairEmbedder(scheme="file", **SMALL).fit(synth_seqs)
        contours = synth_seqs[0].contours
        z = BlockScaler().fit(est.transform(contours)).transform(est.transform(contours))
        assert z.shape == (len(contours), 128)
