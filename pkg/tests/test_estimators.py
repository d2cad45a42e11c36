import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cellsearch.data import DatasetSpec, generate_synthetic
from cellsearch.estimators import GenotypeClassifier, ProgressiveSearch
from cellsearch.genotype import Genotype
from cellsearch.search import StagePlan

from test_genotype import REFERENCE


@pytest.fixture(scope="module")
def images():
    splits = generate_synthetic(DatasetSpec(image_size=4, train_count=24, test_count=8))
    names = np.array(["a", "b", "c", "d"])
    return splits.train.images, names[splits.train.labels], splits.test.images


def test_search_estimator_fits_a_genotype(images):
    X, y, _ = images
    plan = StagePlan.from_lists((2, 3), (8, 4), (0.0, 0.2), epochs=1, warm_epochs=0)
    est = ProgressiveSearch(plan=plan, init_channels=2, batch_size=8, m_skip=1).fit(X, y)
    assert isinstance(est.genotype_, Genotype) and est.genotype_.skip_count() <= 1
    assert len(est.snapshots_) == 2
    assert list(est.classes_) == ["a", "b", "c", "d"]
    assert clone(est).get_params()["m_skip"] == 1


def test_classifier_fit_predict(images):
    X, y, X_test = images
    clf = GenotypeClassifier(REFERENCE, depth=3, init_channels=4, epochs=1, batch_size=8, drop_path_prob=0.1)
    clf.fit(X, y)
    proba = clf.predict_proba(X_test)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert set(clf.predict(X_test)) <= set(y)
    assert 0.0 <= clf.score(X, y) <= 1.0
    again = clone(clf).fit(X, y)
    np.testing.assert_array_equal(again.decision_function(X_test), clf.decision_function(X_test))


def test_input_validation(images):
    X, y, _ = images
    with pytest.raises(NotFittedError):
        GenotypeClassifier(REFERENCE).predict(X)
    with pytest.raises(ValueError):
        GenotypeClassifier(None).fit(X, y)
    with pytest.raises(ValueError):
        GenotypeClassifier(REFERENCE).fit(X.reshape(len(X), -1), y)
    with pytest.raises(ValueError):
        GenotypeClassifier(REFERENCE).fit(X, y[:-1])
    with pytest.raises(ValueError):
        ProgressiveSearch(plan="huge").fit(X, y)
