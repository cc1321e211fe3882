import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from collabdiff import CollaborativeDiffusion, CollaborativeEditor, UnimodalDiffusion
from collabdiff.diffcore import RngStream
from collabdiff.exceptions import ArgumentError
from collabdiff.toyface import generate_dataset
from collabdiff.validation import (
    check_attributes,
    check_consistent_length,
    check_images,
    check_masks,
    check_random_state,
)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(12, 16, RngStream(0))


@pytest.fixture(scope="module")
def fitted(data):
    kw = dict(base_channels=8, steps=2, batch_size=4, lr=1e-3, random_state=1)
    mask = UnimodalDiffusion("mask", **kw).fit(data.images, data.masks)
    attr = UnimodalDiffusion("attribute", **kw).fit(data.images, data.attributes)
    collab = CollaborativeDiffusion([mask, attr], diffuser_channels=4, steps=2, batch_size=4, lr=1e-3,
                                    random_state=2)
    collab.fit(data.images, {"mask": data.masks, "attribute": data.attributes})
    return mask, attr, collab


def test_get_params_and_clone():
    est = UnimodalDiffusion("attribute", steps=7, lr=0.5)
    params = est.get_params()
    assert params["modality"] == "attribute" and params["steps"] == 7 and params["lr"] == 0.5
    other = clone(est).set_params(steps=3)
    assert other.steps == 3 and est.steps == 7
    assert "collaborators" in CollaborativeDiffusion().get_params()
    assert CollaborativeEditor(alpha=0.2).get_params()["alpha"] == 0.2


def test_not_fitted_errors(data):
    with pytest.raises(NotFittedError):
        UnimodalDiffusion().sample(data.masks[:1])
    with pytest.raises(NotFittedError):
        CollaborativeDiffusion([UnimodalDiffusion()]).fit(data.images, {"mask": data.masks})
    with pytest.raises(NotFittedError):
        CollaborativeDiffusion().sample({"mask": data.masks})
    with pytest.raises(ArgumentError):
        CollaborativeDiffusion().fit(data.images, {})
    with pytest.raises(ArgumentError):
        UnimodalDiffusion("text").fit(data.images, data.masks)


def test_fitted_estimators(fitted, data):
    mask, attr, collab = fitted
    assert mask.loss_curve_.shape == (2,) and np.isfinite(mask.score(data.images, data.masks))
    out = mask.sample(data.masks[:2])
    assert out.shape == (2, 16, 16, 3)
    assert np.array_equal(out, mask.predict(data.masks[:2]))
    conds = {"mask": data.masks[:2], "attribute": data.attributes[:2]}
    a = collab.sample(conds)
    assert np.array_equal(a, collab.sample(conds))
    assert not np.array_equal(a, collab.sample(conds, random_state=5))
    tr = collab.influence_trace(conds)
    assert tr["influence"].shape == (2, 2, 50, 16, 16)
    assert set(collab.theta_hashes_) == {"mask", "attribute"}


def test_editor(fitted, data):
    _, _, collab = fitted
    ed = CollaborativeEditor(collab, alpha=0.5, opt_steps=1, finetune_steps=1, batch_size=2, random_state=3)
    with pytest.raises(NotFittedError):
        ed.transform()
    ed.fit(data.images[:1], {"mask": data.masks[1:2], "attribute": data.attributes[1:2]})
    img = ed.transform()
    assert img.shape == (16, 16, 3) and np.array_equal(img, ed.transform())
    assert not np.array_equal(img, ed.transform(alpha=0.0))
    with pytest.raises(ArgumentError):
        ed.transform(alpha=2.0)
    with pytest.raises(ArgumentError):
        CollaborativeEditor(collab).fit(data.images[:2], {"mask": data.masks[:2], "attribute": data.attributes[:2]})


def test_validation_helpers():
    img = np.zeros((16, 16, 3))
    assert check_images(img).shape == (1, 16, 16, 3)
    for bad in (np.zeros((16, 16)), np.zeros((1, 24, 24, 3)), np.full((1, 16, 16, 3), 2.0),
                np.full((1, 16, 16, 3), np.nan)):
        with pytest.raises(ArgumentError):
            check_images(bad)
    with pytest.raises(ArgumentError):
        check_images(np.zeros((1, 32, 32, 3)), resolution=16)
    assert check_masks(np.zeros((16, 16))).dtype == np.uint8
    for bad in (np.full((4, 4), 8), np.full((4, 4), 0.5), np.zeros((2, 3, 4))):
        with pytest.raises(ArgumentError):
            check_masks(bad)
    np.testing.assert_array_equal(check_attributes([1.5, -0.5]), [[1.0, 0.0]])
    with pytest.raises(ArgumentError):
        check_attributes([[0.1, 0.2, 0.3]])
    with pytest.raises(ArgumentError):
        check_consistent_length(np.zeros(2), np.zeros(3))
    assert check_random_state(None).seed_int() == RngStream(0).seed_int()
    s = RngStream(4)
    assert check_random_state(s) is s
    for bad in (-1, 1.5, True, "x"):
        with pytest.raises(ArgumentError):
            check_random_state(bad)
