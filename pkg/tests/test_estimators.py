import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import load_digits
from sklearn.exceptions import NotFittedError

from dagafl.estimators import DagAFLClassifier, MLPClassifier, SignatureTransformer


@pytest.fixture(scope="module")
def digits():
    X, y = load_digits(return_X_y=True)
    return X / 16.0, y


def test_mlp_fits_digits(digits):
    X, y = digits
    clf = MLPClassifier(epochs=10).fit(X[:1500], y[:1500])
    assert clf.score(X[1500:], y[1500:]) > 0.85
    assert clf.get_params()["hidden"] == 64
    assert clone(clf).get_params() == clf.get_params()


def test_mlp_keeps_label_values():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.3, (20, 2)), rng.normal(2, 0.3, (20, 2))])
    y = np.array(["neg"] * 20 + ["pos"] * 20)
    clf = MLPClassifier(hidden=8, epochs=100, lr=0.1, batch_size=4).fit(X, y)
    assert set(clf.predict(X)) <= {"neg", "pos"}
    assert clf.score(X, y) == 1.0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MLPClassifier().predict(np.zeros((1, 3)))
    with pytest.raises(NotFittedError):
        SignatureTransformer().transform(np.zeros((1, 3)))


def test_signature_transformer(digits):
    X, y = digits
    clf = MLPClassifier(epochs=2).fit(X[:300], y[:300])
    sig = SignatureTransformer(clf).fit_transform(X[:50])
    assert sig.shape == (50, 8)
    assert np.all((sig >= 0) & (sig <= 1))
    with pytest.raises(ValueError):
        SignatureTransformer().fit(X[:10])


def test_dag_classifier(digits):
    X, y = digits
    clf = DagAFLClassifier(clients=4, max_global_iters=4, patience=0).fit(X[:1200], y[:1200])
    assert clf.score(X[1200:], y[1200:]) > 0.7
    assert len(clf.ledger_) == 1 + 4 * 4
    assert clf.metrics_.terminated_by == "max_iters"
