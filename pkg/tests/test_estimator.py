import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from amcground.errors import ValidationError
from amcground.estimator import GroundingModel, check_heatmaps, check_triplets
from amcground.groundata import generate_dataset, write_dataset


@pytest.fixture(scope="module")
def data():
    return generate_dataset(0, 8, "hard"), generate_dataset(1, 3, "hard", split="val")


def small(**kw):
    base = dict(embed_dim=8, heads=2, layers=2, patch_size=16, epochs=1, batch_size=4)
    base.update(kw)
    return GroundingModel(**base)


def test_params_round_trip_through_clone():
    est = small(w_amc=3.0, seed=4)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(lr=0.5).lr == 0.5


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        small().predict(data[1])


def test_fit_transform_predict_score(data):
    tr, va = data
    est = small(pretrain_epochs=1).fit(tr)
    assert est.n_steps_ == 4
    maps = est.transform(va)
    assert maps.shape == (3, 64, 64) and maps.min() >= 0 and maps.max() > 0
    points = est.predict(va)
    assert points.shape == (3, 2)
    assert all(tuple(p) == np.unravel_index(np.argmax(m), m.shape) for p, m in zip(points, maps))
    assert 0.0 <= est.score(va) <= 1.0


def test_fit_is_deterministic(data):
    a = small(seed=2).fit(data[0])
    b = small(seed=2).fit(data[0])
    assert a.history_ == b.history_


def test_accepts_directory(tmp_path, data):
    write_dataset(tmp_path, data[1])
    assert len(check_triplets(tmp_path)) == 3
    assert len(check_triplets(data[1][0])) == 1


def test_input_validation():
    with pytest.raises(ValidationError):
        check_triplets([])
    with pytest.raises(ValidationError):
        check_triplets([np.zeros(3)])
    assert check_heatmaps(np.zeros((4, 5))).shape == (1, 4, 5)
    with pytest.raises(ValidationError):
        check_heatmaps(np.full((2, 2), np.nan))
