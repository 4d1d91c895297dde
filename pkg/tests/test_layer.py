import numpy as np
import pytest

from ropo import autodiff as ad
from ropo.layer import DecomposedWeight, column_norms, footprint, merge, ropo_forward, ropo_forward_node

from helpers import rel_err


def random_layer(rng, d=6, n=4):
    base = DecomposedWeight.from_weight(rng.standard_normal((d, n)))
    return base.with_params(
        theta=rng.uniform(-np.pi, np.pi, d - 1),
        v1=rng.standard_normal(d),
        v2=rng.standard_normal(d),
        m=rng.uniform(0.5, 2.0, n),
    )


def test_single_column_at_init():
    layer = DecomposedWeight.from_weight([[3.0], [4.0]])
    np.testing.assert_allclose(layer.column_norms, [5.0])
    np.testing.assert_allclose(layer.direction[:, 0], [0.6, 0.8])
    z = ropo_forward(layer, np.array([1.0, 0.0]))
    assert z[0] == pytest.approx(3.0, abs=1e-15)


def test_init_matches_dense_forward(rng):
    W = rng.standard_normal((8, 5))
    layer = DecomposedWeight.from_weight(W)
    x = rng.standard_normal((1000, 8))
    assert np.abs(ropo_forward(layer, x) - x @ W).max() < 1e-12


def test_magnitude_is_linear(rng):
    layer = random_layer(rng)
    x = rng.standard_normal((3, 6))
    doubled = layer.with_params(m=2 * layer.m)
    np.testing.assert_allclose(ropo_forward(doubled, x), 2 * ropo_forward(layer, x), rtol=1e-14)


def test_zero_column_is_rejected():
    W = np.ones((3, 3))
    W[:, 1] = 0
    with pytest.raises(ValueError, match="column 1"):
        column_norms(W)
    with pytest.raises(ValueError):
        DecomposedWeight.from_weight(W)


def test_input_width_is_checked(rng):
    with pytest.raises(ValueError):
        ropo_forward(random_layer(rng), np.ones(5))


def test_frozen_arrays_are_read_only(rng):
    layer = DecomposedWeight.from_weight(rng.standard_normal((4, 3)))
    with pytest.raises(ValueError):
        layer.direction[0, 0] = 1.0
    with pytest.raises(ValueError):
        layer.W_frozen[0, 0] = 1.0


def test_merge_equivalence(rng):
    for _ in range(10):
        layer = random_layer(rng, d=8, n=5)
        x = rng.standard_normal((100, 8))
        assert np.abs(x @ merge(layer) - ropo_forward(layer, x)).max() < 1e-10


def test_merge_preserves_column_angles(rng):
    layer = random_layer(rng, d=6, n=4)
    merged = merge(layer)
    np.testing.assert_allclose(np.linalg.norm(merged, axis=0), layer.m, rtol=1e-12)
    D = layer.direction
    U = merged / np.linalg.norm(merged, axis=0)
    np.testing.assert_allclose(U.T @ U, D.T @ D, atol=1e-12)


@pytest.mark.parametrize("d,n,expected", [(4096, 4096, 16383), (2, 1, 6), (8, 8, 31)])
def test_footprint(d, n, expected):
    fp = footprint(d, n)
    assert fp.trainable_count == expected
    assert fp.frozen_count == d * n


def test_footprint_rejects_degenerate():
    with pytest.raises(ValueError):
        footprint(1, 3)


def test_tape_forward_and_gradients(rng):
    layer = random_layer(rng, d=5, n=3)
    x = rng.standard_normal((4, 5))
    target = rng.standard_normal((4, 3))
    hh = layer.rot.householders
    point = [layer.rot.plan.angles, hh.v1, hh.v2, layer.m]

    def build(theta, v1, v2, m):
        z = ropo_forward_node(x, layer.direction, theta, v1, v2, m)
        diff = z - target
        return ad.sum(diff * diff)

    outs, tape = ad.forward(build, point)
    np.testing.assert_allclose(outs[0], np.sum((ropo_forward(layer, x) - target) ** 2), rtol=1e-12)
    grads = ad.backward(tape)
    for k, g in enumerate(grads):
        def f(p, k=k):
            args = list(point)
            args[k] = p
            return float(ad.forward(build, args)[0][0])
        assert rel_err(g, ad.finite_difference_gradient(f, point[k])).max() < 1e-6
