import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare import tensorcore as tc
from flare.model import (ModelParams, NetworkShape, classify, extract, forward_source, init_params,
                         predict_labels, reconstruct, translate)

SMALL = NetworkShape(view_dims=(3, 2), translator_hidden=(4, 4), extractor_hidden=6, latent=4,
                     classifier_hidden=5, decoder_hidden=3)


def test_layer_depths():
    layers = NetworkShape(view_dims=(5, 7), sources=2).layers()
    assert [len(layers[k]) for k in ("D0", "D1", "F", "L0", "L1", "R0", "R1")] == [3, 3, 2, 2, 2, 2, 2]
    assert layers["D0"] == [(12, 12), (12, 12), (12, 12)]
    assert layers["R1"][-1] == (64, 7)
    assert "D0" not in NetworkShape(view_dims=(5,), translator=False).layers()


def test_init_bounds_and_zero_biases():
    p = init_params(NetworkShape(view_dims=(10, 6)), 3)
    for k, v in p.arrays.items():
        if ".b" in k:
            assert np.all(v == 0)
        elif not k.startswith("D"):
            assert np.all(np.abs(v) <= np.sqrt(6.0 / v.shape[0]))


def test_init_is_seeded():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert a.allclose(b)
    assert not a.allclose(c)


def test_translator_starts_as_identity():
    p = init_params(SMALL, 0)
    X = np.random.default_rng(0).standard_normal((7, 5))
    np.testing.assert_array_equal(translate(p, X).value, X)


def test_no_translator_means_identity():
    p = init_params(NetworkShape(view_dims=(3, 2), translator=False), 0)
    X = np.ones((2, 5))
    np.testing.assert_array_equal(forward_source(p, X)[0].value, X)


def test_latent_rows_are_unit_norm():
    p = init_params(SMALL, 4)
    Z = extract(p, np.random.default_rng(1).standard_normal((20, 5))).value
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-9)


def test_zero_latent_row_is_guarded():
    p = init_params(SMALL, 0)
    for k in p.arrays:
        if k.startswith("F"):
            p.arrays[k][:] = 0.0
    Z = extract(p, np.ones((3, 5)))
    assert Z.guarded == 3
    np.testing.assert_allclose(np.linalg.norm(Z.value, axis=1), 1.0)


def test_output_shapes():
    p = init_params(SMALL, 0)
    Z = extract(p, np.zeros((4, 5)))
    assert classify(p, Z).shape == (4, 2)
    assert [r.shape for r in reconstruct(p, Z)] == [(4, 3), (4, 2)]


def test_wrong_width_raises_shape_error():
    p = init_params(SMALL, 0)
    with pytest.raises(tc.ShapeError):
        extract(p, np.zeros((4, 6)))


def test_save_load_round_trip(tmp_path):
    p = init_params(SMALL, 9)
    p.save(tmp_path / "c.npz", meta={"seed": 9})
    q, meta = ModelParams.load(tmp_path / "c.npz")
    assert q.shape == SMALL
    assert meta == {"seed": 9}
    assert p.allclose(q)
    p.save(tmp_path / "d.npz", meta={"seed": 9})
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()


def test_predict_tie_goes_to_class_one():
    P = np.array([[0.5, 0.5], [0.6, 0.4], [0.2, 0.8]])
    assert predict_labels(P).tolist() == [1, 0, 1]
    assert predict_labels(np.array([[0.2, 0.5, 0.3]])).tolist() == [1]


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(6)))
def test_rows_are_processed_independently(perm):
    p = init_params(SMALL, 2)
    X = np.random.default_rng(5).standard_normal((6, 5))
    perm = np.array(perm)
    a = classify(p, extract(p, X)).value[perm]
    b = classify(p, extract(p, X[perm])).value
    np.testing.assert_allclose(a, b, atol=1e-14)
