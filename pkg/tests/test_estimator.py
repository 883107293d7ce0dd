"""Estimator surface: sklearn conventions and learning behavior."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qbn.data import DatasetSpec, generate
from qbn.errors import DimensionError, InputError
from qbn.estimator import QBNClassifier, check_inputs


def toy_dataset(n=120, seed=2):
    return generate(DatasetSpec(seed=seed, num_examples=n, num_regions=4,
                                region_channels=8, noise_sigma=0.02,
                                max_objects=2, question_len=8))


def toy_estimator(**kw):
    base = dict(model_dim=16, num_heads=2, num_blocks=1, question_len=8,
                num_regions=4, region_channels=8, epochs=6,
                learning_rate=3e-3, batch_size=24, seed=0, dropout_rate=0.0)
    base.update(kw)
    return QBNClassifier(**base)


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = toy_estimator()
        params = est.get_params()
        assert params["model_dim"] == 16
        est.set_params(model_dim=32)
        assert est.get_params()["model_dim"] == 32

    def test_clone(self):
        est = toy_estimator(num_blocks=2)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()
        assert cloned is not est

    def test_not_fitted_error(self):
        ds = toy_dataset(20)
        with pytest.raises(NotFittedError):
            toy_estimator().predict((ds.regions, ds.tokens))

    def test_input_validation(self):
        with pytest.raises(InputError):
            check_inputs(np.zeros((3, 3)))
        with pytest.raises(DimensionError):
            check_inputs((np.zeros((2, 4, 2, 2, 8)), np.zeros((3, 8))))


class TestFitPredict:
    def test_fit_on_dataset_and_predict_shapes(self):
        ds = toy_dataset()
        est = toy_estimator(epochs=2)
        est.fit(ds)
        preds = est.predict((ds.regions, ds.tokens))
        assert preds.shape == (len(ds),)
        proba = est.predict_proba((ds.regions, ds.tokens))
        assert proba.shape == (len(ds), est.model_.cfg.num_answers)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-5)

    def test_fit_on_arrays_learns_above_chance(self):
        ds = toy_dataset(n=160)
        est = toy_estimator(epochs=10)
        est.fit((ds.regions, ds.tokens), ds.answers)
        acc = est.score((ds.regions, ds.tokens), ds.answers)
        # memorizing a small noiseless-ish set should beat chance comfortably
        assert acc > 2.5 / est.model_.cfg.num_answers

    def test_seeded_fit_deterministic(self):
        ds = toy_dataset(60)
        a = toy_estimator(epochs=2).fit((ds.regions, ds.tokens), ds.answers)
        b = toy_estimator(epochs=2).fit((ds.regions, ds.tokens), ds.answers)
        assert a.history_["losses"] == b.history_["losses"]

    def test_fit_requires_labels_for_arrays(self):
        ds = toy_dataset(20)
        with pytest.raises(InputError):
            toy_estimator().fit((ds.regions, ds.tokens))
