import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triplane_codec.anchors import synth_correlated_cloud
from triplane_codec.context import (
    SIGMA_MIN,
    ContextPipeline,
    DistributionModel,
    QuantConfig,
    assemble_context,
    brute_force_knn,
    build_knn_index,
    entropy_loss,
    predict_distribution,
    quantize_eval,
    quantize_train,
)
from triplane_codec.errors import SymbolRangeError, ValidationError
from triplane_codec.gaussian import bin_bits
from triplane_codec.triplane import ContractParams, TriPlaneGrid

PARAMS = ContractParams(np.zeros(3), 1.0)


def test_knn_examples():
    line = np.array([[x, 0.0, 0.0] for x in range(5)])
    assert list(build_knn_index(line, 2).query(0)) == [1, 2]
    # x=2 has neighbours 1 and 3 at equal distance; the smaller index comes first
    assert list(build_knn_index(line, 2).query(2)) == [1, 3]
    assert build_knn_index(np.zeros((1, 3)), 4).query(0).shape == (0,)
    with pytest.raises(ValidationError):
        build_knn_index(line).query(5)
    with pytest.raises(ValidationError):
        build_knn_index(np.zeros((0, 3)))


@pytest.mark.parametrize("k", [1, 4, 8])
def test_knn_matches_brute_force_random(k):
    rng = np.random.default_rng(k)
    pos = rng.uniform(-1, 1, size=(500, 3))
    assert np.array_equal(build_knn_index(pos, k).neighbors(), brute_force_knn(pos, k))


@given(st.integers(0, 2**31), st.sampled_from([1, 4, 8]), st.integers(1, 60))
def test_knn_matches_brute_force_with_ties(seed, k, n):
    rng = np.random.default_rng(seed)
    # integer lattice points produce many exact distance ties and duplicates
    pos = rng.integers(0, 3, size=(n, 3)).astype(float)
    got = build_knn_index(pos, k).neighbors()
    assert np.array_equal(got, brute_force_knn(pos, k))
    assert got.shape == (n, min(k, n - 1))
    for i, row in enumerate(got):
        assert i not in row and len(set(row)) == len(row)


def grid_and_cloud(n=30, r=8, c=2, seed=0):
    cloud = synth_correlated_cloud(seed, n)
    grid = TriPlaneGrid(np.random.default_rng(seed).normal(size=(3, r, r, c)))
    return cloud, grid


def test_context_layout_and_padding():
    cloud, grid = grid_and_cloud(n=1)
    ctx = assemble_context(cloud, grid, PARAMS, build_knn_index(cloud.positions, 4), 0)
    w = 3 * grid.channels
    assert ctx.shape == (5 * w + 3,)
    assert not np.any(ctx[w:5 * w])
    pipe = ContextPipeline(cloud.positions, PARAMS, grid.resolution, build_knn_index(cloud.positions, 4))
    assert np.array_equal(ctx[:w], pipe.sampler.sample(grid.planes)[0])
    assert np.array_equal(ctx[-3:], pipe.contracted[0])
    with pytest.raises(ValidationError):
        assemble_context(cloud, grid, PARAMS, build_knn_index(cloud.positions, 4), 1)


def test_duplicate_anchor_is_nearest_block():
    cloud, grid = grid_and_cloud(n=20)
    pos = cloud.positions.copy()
    pos[7] = pos[3]
    cloud = type(cloud)(pos, cloud.features, cloud.scalings, cloud.offsets)
    idx = build_knn_index(pos, 4)
    assert idx.query(3)[0] == 7
    ctx = assemble_context(cloud, grid, PARAMS, idx, 3)
    w = 3 * grid.channels
    assert np.array_equal(ctx[w:2 * w], ctx[:w])


def test_contexts_ignore_attributes():
    cloud, grid = grid_and_cloud()
    idx = build_knn_index(cloud.positions, 4)
    pipe = ContextPipeline(cloud.positions, PARAMS, grid.resolution, idx)
    before = pipe.contexts(grid.planes)
    rng = np.random.default_rng(1)
    other = type(cloud)(cloud.positions, rng.normal(size=cloud.features.shape),
                        rng.normal(size=cloud.scalings.shape), rng.normal(size=cloud.offsets.shape))
    for i in (0, 5, 29):
        assert np.array_equal(assemble_context(other, grid, PARAMS, idx, i), before[i])


def test_contexts_invariant_to_storage_order():
    cloud, grid = grid_and_cloud(n=80)
    perm = np.random.default_rng(2).permutation(cloud.n)
    a = ContextPipeline(cloud.positions, PARAMS, 8, build_knn_index(cloud.positions)).contexts(grid.planes)
    p = cloud.positions[perm]
    b = ContextPipeline(p, PARAMS, 8, build_knn_index(p)).contexts(grid.planes)
    assert np.allclose(a[perm], b, atol=1e-15)


def test_zero_model_prediction():
    m = DistributionModel.zeros(10, 4, hidden=8)
    out = predict_distribution(m, np.ones(10))
    for g, (mu, sigma) in out.items():
        assert np.all(mu == 0)
        assert np.allclose(sigma, np.log(2) + SIGMA_MIN, atol=1e-15)
    assert out["features"][0].shape == (32,) and out["offsets"][0].shape == (12,)
    with pytest.raises(ValidationError):
        predict_distribution(m, np.ones(11))


def test_model_deterministic_and_pinned(rng):
    m = DistributionModel.init(rng, 12, 2, hidden=16)
    ctx = rng.normal(size=(5, 12))
    mu, sigma, _ = m.forward(ctx)
    mu2, sigma2, _ = m.forward(ctx)
    assert np.array_equal(mu, mu2) and np.array_equal(sigma, sigma2)
    pm, ps = m.forward_pinned(ctx)
    assert np.allclose(pm, mu, atol=1e-12) and np.allclose(ps, sigma, atol=1e-12)
    assert np.all(sigma >= SIGMA_MIN)


def test_model_gradients(rng):
    m = DistributionModel.init(rng, 7, 1, hidden=6)
    for name in ("b1", "b2", "b3"):
        getattr(m, name)[...] = rng.normal(scale=0.3, size=getattr(m, name).shape)
    ctx = rng.normal(size=(4, 7))
    a = rng.normal(size=(4, m.coeff_dim))
    b = rng.normal(size=(4, m.coeff_dim))

    def f():
        mu, sigma, _ = m.forward(ctx)
        return float(np.sum(a * mu + b * sigma))

    _, _, cache = m.forward(ctx)
    grads, dctx = m.backward(cache, a, b)
    worst = 0.0
    for name, p in m.params().items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = f()
            flat[i] = old - 1e-6
            fm = f()
            flat[i] = old
            fd = (fp - fm) / 2e-6
            if abs(fd) > 1e-6:
                worst = max(worst, abs(fd - grads[name].reshape(-1)[i]) / abs(fd))
    assert worst < 1e-5


def test_quantize_examples():
    assert quantize_train(1.3, 0.1, 0.0) == 1.3
    assert quantize_train(1.0, 0.1, 0.5) == pytest.approx(1.05)
    assert quantize_eval(0.04999, 0.1)[0] == 0
    s, r = quantize_eval(-0.05, 0.1)
    assert s == -1 and r == pytest.approx(-0.1)
    s, r = quantize_eval(1.234, 0.01)
    assert s == 123 and r == pytest.approx(1.23)
    with pytest.raises(SymbolRangeError):
        quantize_eval(1e12, 0.01)


@given(st.floats(-100, 100), st.floats(1e-3, 10))
def test_quantize_eval_error_bounded(v, q):
    _, r = quantize_eval(v, q)
    assert abs(v - r) <= q / 2 * (1 + 1e-9)


def test_noise_proxy_is_uniform(rng):
    v, q = 0.7, 0.2
    out = quantize_train(v, q, rng.uniform(-0.5, 0.5, 100_000))
    assert out.min() >= v - q / 2 and out.max() <= v + q / 2
    hist, _ = np.histogram(out, bins=10, range=(v - q / 2, v + q / 2))
    assert np.all(np.abs(hist - 10_000) < 500)


def test_entropy_examples():
    assert bin_bits(np.array([0.0]), 0.0, 1.0 / (2 * 0.6744897501960817), 1e9)[0] == pytest.approx(0, abs=1e-12)
    # a bin covering exactly the right half of the Gaussian holds half the mass
    assert bin_bits(np.array([5e8]), 0.0, 1.0, 1e9)[0] == pytest.approx(1.0, abs=1e-12)
    assert bin_bits(np.array([100.0]), 0.0, 1.0, 1.0)[0] == pytest.approx(33.2193, abs=1e-4)


def test_entropy_prefers_matched_sigma():
    cloud = synth_correlated_cloud(0, 300)
    qcfg = QuantConfig()
    vals = np.concatenate([cloud.features, cloud.scalings, cloud.offsets.reshape(cloud.n, -1)], axis=1)
    mu = vals.mean(axis=0)
    sd = vals.std(axis=0)
    q = qcfg.vector(cloud.k)
    matched = bin_bits(vals, mu, sd, q).sum()
    wide = bin_bits(vals, mu, 10 * sd, q).sum()
    assert matched <= wide


def test_entropy_loss_gradients_tiny_instance():
    rng = np.random.default_rng(0)
    cloud = synth_correlated_cloud(0, 8, k=2)
    grid = TriPlaneGrid(rng.normal(size=(3, 8, 8, 2)))
    idx = build_knn_index(cloud.positions, 2)
    qcfg = QuantConfig()
    model = DistributionModel.init(rng, ContextPipeline(cloud.positions, PARAMS, 8, idx).dim(2), 2, hidden=8)
    noise = rng.uniform(-0.5, 0.5, size=(8, 32 + 3 + 6))
    res = entropy_loss(cloud, model, grid, PARAMS, idx, qcfg, noise=noise, with_grad=True)
    assert res.bits >= 0

    def f():
        return entropy_loss(cloud, model, grid, PARAMS, idx, qcfg, noise=noise).bits

    checked = 0
    for name, arr in list(model.params().items()) + [("grid", grid.planes)]:
        flat, g = arr.reshape(-1), res.grads[name].reshape(-1)
        for i in rng.choice(flat.size, min(10, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = f()
            flat[i] = old - 1e-6
            fm = f()
            flat[i] = old
            fd = (fp - fm) / 2e-6
            if abs(fd) > 1e-5:
                checked += 1
                assert abs(fd - g[i]) / abs(fd) < 1e-4, name
    assert checked > 10
