import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from hybridloc.features import (
    Encoder, FeatureNormalizer, TrainingDivergedError, encode, fit_normalizer, load_encoder,
    normalize, pca_features, pca_reconstruct, pretrain_autoencoder, save_encoder, transform_input,
)
from hybridloc.pipeline import SignalConfig, Simulator
from hybridloc.scenario import default_scenario, generate_grid
from hybridloc.signal import BasebandSignal


@pytest.fixture(scope="module")
def scenario_magnitudes():
    sc = default_scenario()
    sim = Simulator(sc, SignalConfig())
    grid = generate_grid(sc.grid_bounds, 1.0)
    grid = grid[np.linalg.norm(grid - sc.anchors[0].p, axis=1) > 1e-9]
    return sim.magnitudes(grid, sc.anchors[0], np.random.default_rng(0))


def test_pca_rank_one_reconstruction():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=8)
    X = 3.0 + rng.normal(size=(40, 1)) * direction
    enc = pca_features(X, 1)
    np.testing.assert_allclose(pca_reconstruct(enc, X), X, atol=1e-9)


def test_pca_planar_preserves_distances():
    rng = np.random.default_rng(1)
    basis = np.linalg.qr(rng.normal(size=(5, 2)))[0]
    X = rng.normal(size=(3, 2)) @ basis.T + 1.0
    Z = encode(pca_features(X, 2), X)
    for i in range(3):
        for k in range(3):
            assert np.linalg.norm(Z[i] - Z[k]) == pytest.approx(np.linalg.norm(X[i] - X[k]), abs=1e-9)


def test_pca_rotation_invariant_spectrum():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 6)) * np.arange(1, 7)
    R = ortho_group.rvs(6, random_state=3)
    a = pca_features(X, 3).explained_variance
    b = pca_features(X @ R, 3).explained_variance
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_pca_sign_convention_and_centering():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 7))
    enc = pca_features(X, 3)
    V = enc.weights[0]
    assert np.all(V[np.argmax(np.abs(V), axis=0), np.arange(3)] > 0)
    np.testing.assert_allclose(encode(enc, X.mean(axis=0)), 0.0, atol=1e-12)


def test_pca_rank_deficient_rejected():
    X = np.tile(np.arange(5.0), (20, 1))
    with pytest.raises(ValueError):
        pca_features(X, 1)


def test_encode_accepts_signal_and_checks_dim():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 3, size=(30, 81))
    enc = pca_features(X, 4, "log1p")
    r = rng.normal(size=81) + 1j * rng.normal(size=81)
    sig = BasebandSignal(r, 1.25e-9)
    np.testing.assert_array_equal(encode(enc, sig), encode(enc, sig))
    np.testing.assert_allclose(encode(enc, sig), encode(enc, np.abs(r)))
    with pytest.raises(ValueError):
        encode(enc, np.ones(80))


def test_transform_input():
    x = np.array([0.0, 1.0, 9.0])
    np.testing.assert_array_equal(transform_input(x, "none"), x)
    np.testing.assert_allclose(transform_input(x, "log1p"), np.log1p(x))
    with pytest.raises(ValueError):
        transform_input(x, "sqrt")


def test_autoencoder_loss_decreases_on_scenario_data(scenario_magnitudes):
    enc = pretrain_autoencoder(scenario_magnitudes, f=4, epochs=5, seed=0)
    h = enc.loss_history
    assert len(h) == 6
    assert all(b < a for a, b in zip(h[:-1], h[1:]))
    assert enc.latent_dim == 4 and len(enc.weights) == 3
    assert [w.shape for w in enc.weights] == [(81, 32), (32, 16), (16, 4)]
    Z = encode(enc, scenario_magnitudes)
    assert np.all(np.isfinite(Z))


def test_autoencoder_constant_dataset():
    X = np.full((50, 10), 2.5)
    enc = pretrain_autoencoder(X, f=2, epochs=3, seed=1)
    assert enc.loss_history[-1] < 1e-12
    Z = encode(enc, X)
    assert np.ptp(Z, axis=0).max() < 1e-12


def test_autoencoder_needs_enough_samples():
    with pytest.raises(ValueError):
        pretrain_autoencoder(np.ones((30, 10)), f=4)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_autoencoder_divergence_reported():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 10))
    with pytest.raises(TrainingDivergedError):
        pretrain_autoencoder(X, f=2, epochs=3, learning_rate=np.inf)


def test_normalizer_examples():
    norm = fit_normalizer([[0.0], [5.0], [10.0]])
    np.testing.assert_allclose(normalize(norm, [[0.0], [5.0], [10.0]]).ravel(), [0, 0.5, 1])
    assert normalize(norm, [12.0])[0] == 1.0
    assert normalize(norm, [-3.0])[0] == 0.0
    with pytest.raises(ValueError):
        fit_normalizer([[1.0, 2.0], [1.0, 3.0]])
    with pytest.raises(ValueError):
        FeatureNormalizer(np.array([1.0]), np.array([1.0]))


@settings(max_examples=100)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30, unique=True),
       st.floats(-1e4, 1e4))
def test_normalizer_properties(values, probe):
    L = np.array(values)[:, None]
    if np.ptp(L) < 1e-6:
        return
    norm = fit_normalizer(L)
    z = normalize(norm, L)
    assert z.min() == pytest.approx(0.0, abs=1e-12) and z.max() == pytest.approx(1.0, abs=1e-12)
    out = normalize(norm, [probe])[0]
    assert 0.0 <= out <= 1.0


@pytest.mark.parametrize("kind", ["pca", "ae"])
def test_encoder_roundtrip(tmp_path, kind):
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 5, size=(80, 12))
    enc = pca_features(X, 3, "log1p") if kind == "pca" else pretrain_autoencoder(X, 3, epochs=2)
    norm = fit_normalizer(encode(enc, X))
    save_encoder(enc, norm, tmp_path / "enc.txt")
    enc2, norm2 = load_encoder(tmp_path / "enc.txt")
    assert isinstance(enc2, Encoder) and enc2.input_transform == enc.input_transform
    np.testing.assert_array_equal(encode(enc2, X), encode(enc, X))
    np.testing.assert_array_equal(norm2.lo, norm.lo)
    np.testing.assert_array_equal(norm2.hi, norm.hi)
