import numpy as np
import pytest

from trajlearn.container import dumps, loads
from trajlearn.convisa import (ConvIsaConfig, Geometry, PcaModel, StackedModel, TwoStreamModel, apply_stacked,
                               convolve_layer1, covering_stride, filter_grid, layer1_filters, pca_apply, pca_invert,
                               pca_train, subvolumes, train_stacked, train_two_stream)
from trajlearn.errors import DataError, GeometryError
from trajlearn.isa import IsaLayer, TrainOpts, isa_activation, random_orthonormal
from trajlearn.trajectory import extract_volumes, extract_trajectories_level
from trajlearn.optical_flow import synthetic_flow_sequence
from trajlearn.video_io import Oscillate, Translate, synth_video

SMALL = ConvIsaConfig(pca1_dim=24, pca2_dim=16, stack_top=8, sample_count=400, isa=TrainOpts(epochs=15))


# -- PCA -----------------------------------------------------------------------

def test_pca_line_direction(rng):
    t = rng.standard_normal(200)
    X = np.column_stack([t, t]) + rng.normal(0, 1e-3, (200, 2))
    m = pca_train(X, 1)
    assert abs(abs(m.basis[0] @ np.array([1, 1]) / np.sqrt(2)) - 1) < 1e-6


def test_pca_whitening_and_reconstruction(rng):
    X = rng.standard_normal((3000, 6)) @ rng.standard_normal((6, 6)) + 5.0
    m = pca_train(X, 4)
    Y = pca_apply(m, X)
    np.testing.assert_allclose(np.cov(Y.T), np.eye(4), atol=0.05)
    np.testing.assert_allclose(Y.var(axis=0, ddof=1), 1.0, atol=0.05)
    np.testing.assert_allclose(m.basis @ m.basis.T, np.eye(4), atol=1e-10)
    assert not pca_apply(m, m.mean[None]).any()
    assert pca_apply(m, X).tobytes() == Y.tobytes()
    full = pca_train(X, 6, whiten=False)
    assert np.abs(pca_invert(full, pca_apply(full, X)) - X).max() < 1e-6


def test_pca_errors(rng):
    with pytest.raises(DataError):
        pca_train(rng.standard_normal((5, 8)), 5)
    with pytest.raises(DataError):
        pca_train(np.ones((50, 3)), 2)
    m = pca_train(rng.standard_normal((50, 3)), 2)
    with pytest.raises(GeometryError):
        pca_apply(m, np.zeros((1, 4)))


# -- geometry and dimension chain ----------------------------------------------

def test_default_geometry():
    g = Geometry()
    assert g.positions_per_axis == (2, 2, 3) and g.num_positions == 12
    assert g.input_dim == 16 * 16 * 5
    assert Geometry(channels=2).input_dim == 2560
    assert Geometry(stride=(8, 5)).num_positions == 27
    assert ConvIsaConfig().output_dim == 200


def test_non_tiling_geometry_names_equation():
    with pytest.raises(GeometryError, match=r"\(volume_s - rf_s\) % stride_s"):
        Geometry(rf=(16, 5), stride=(12, 5))
    with pytest.raises(GeometryError, match="stride_t"):
        Geometry(rf=(16, 5), stride=(16, 4))
    with pytest.raises(GeometryError):
        Geometry(rf=(40, 5))


def test_dimension_chain_errors():
    with pytest.raises(GeometryError, match="pca1_dim <= rf_s"):
        ConvIsaConfig(rf=(8, 5), stride=(8, 5), pca1_dim=400).check(1)
    with pytest.raises(GeometryError, match="pca2_dim % group2"):
        ConvIsaConfig(pca2_dim=201).check(1)
    with pytest.raises(GeometryError, match="stack_top <= pca2_dim"):
        ConvIsaConfig(pca2_dim=50, stack_top=100).check(1)


@pytest.mark.parametrize("stride", [(s, t) for s in (4, 8, 16) for t in (2, 5)])
def test_study_strides_accepted(stride):
    cfg = ConvIsaConfig(stride=stride)
    for ch in (1, 2):
        cfg.check(ch)
        g = cfg.geometry(ch)
        assert g.num_positions == ((32 - 16) // stride[0] + 1) ** 2 * ((15 - 5) // stride[1] + 1)


@pytest.mark.parametrize("rf", [(s, t) for s in (8, 16, 24) for t in (5, 10)])
def test_study_receptive_fields_accepted(rf):
    stride = covering_stride(rf)
    cfg = ConvIsaConfig(rf=rf, stride=stride)
    for ch in (1, 2):
        cfg.check(ch)
    assert covering_stride((8, 10)) == (8, 5) and covering_stride((16, 5)) == (16, 5)


@pytest.mark.parametrize("dim", [50, 100, 150, 200, 250, 300])
def test_study_output_dims_accepted(dim):
    cfg = ConvIsaConfig(pca2_dim=dim, stack_top=dim // 2)
    cfg.check(1)
    assert cfg.output_dim == dim


# -- convolution ---------------------------------------------------------------

def _random_layer1(rng, geom, k=10):
    n = geom.input_dim
    pca = PcaModel(rng.standard_normal(n), np.linalg.qr(rng.standard_normal((n, k)))[0].T,
                   rng.uniform(0.5, 2, k), True)
    return pca, IsaLayer(random_orthonormal(k, k, rng), 1)


@pytest.mark.parametrize("channels,stride", [(1, (16, 5)), (2, (16, 5)), (1, (8, 5))])
def test_convolution_matches_position_loop(rng, channels, stride):
    geom = Geometry(stride=stride, channels=channels)
    pca, isa = _random_layer1(rng, geom)
    shape = (2, 15, 32, 32) + ((2,) if channels == 2 else ())
    vols = rng.random(shape)
    got = convolve_layer1(vols, pca, isa, geom)
    for i in range(2):
        parts = []
        for t0 in range(0, 15 - 5 + 1, stride[1]):
            for y0 in range(0, 32 - 16 + 1, stride[0]):
                for x0 in range(0, 32 - 16 + 1, stride[0]):
                    crop = vols[i, t0:t0 + 5, y0:y0 + 16, x0:x0 + 16]
                    parts.append(isa_activation(pca_apply(pca, crop.reshape(-1)), isa))
        np.testing.assert_allclose(got[i], np.concatenate(parts), atol=1e-12)
    np.testing.assert_allclose(convolve_layer1(vols[0], pca, isa, geom), got[0])


def test_flow_crop_interleaves_channels():
    geom = Geometry(channels=2)
    v = np.zeros((1, 15, 32, 32, 2))
    v[0, 0, 0, 0] = [1.0, 2.0]
    v[0, 0, 0, 1] = [3.0, 4.0]
    crop = subvolumes(v, geom)[0, 0]
    assert crop[:4].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_default_layer1_output_and_zero_volume(rng):
    geom = Geometry()
    n = geom.input_dim
    pca = PcaModel(np.zeros(n), np.linalg.qr(rng.standard_normal((n, 300)))[0].T, np.ones(300), True)
    isa = IsaLayer(random_orthonormal(300, 300, rng), 1)
    out = convolve_layer1(np.zeros((15, 32, 32)), pca, isa, geom)
    assert out.shape == (3600,) and not out.any()


# -- training ------------------------------------------------------------------

def _motion_volumes(motion, seeds, frames=24):
    vols = []
    for s in seeds:
        v = synth_video(motion, (64, 64, frames), s)
        flows = synthetic_flow_sequence(motion, 64, 64, frames)
        vols.append(extract_volumes(v, extract_trajectories_level(v, flows, 0)))
    return np.concatenate(vols)


@pytest.fixture(scope="module")
def pixel_model():
    vols = np.random.default_rng(0).random((300, 15, 32, 32)).astype(np.float32)
    return train_stacked(vols, SMALL, seed=5), vols


def test_stacked_shapes_and_determinism(pixel_model):
    model, vols = pixel_model
    assert model.output_dim == 16
    out = apply_stacked(model, vols[:7])
    assert out.shape == (7, 16) and np.all(np.isfinite(out))
    np.testing.assert_allclose(apply_stacked(model, vols[3]), out[3], atol=1e-12)
    again = train_stacked(vols, SMALL, seed=5)
    assert dumps(*again.to_tensors()) == dumps(*model.to_tensors())


def test_whitening_at_both_stages(pixel_model):
    model, vols = pixel_model
    layer1 = convolve_layer1(vols, model.pca1, model.isa1, model.geometry)
    x2 = pca_apply(model.pca2, layer1)
    np.testing.assert_allclose(np.cov(x2.T), np.eye(16), atol=0.05)
    np.testing.assert_allclose(model.isa1.W @ model.isa1.W.T, np.eye(24), atol=1e-6)
    np.testing.assert_allclose(model.isa2.W @ model.isa2.W.T, np.eye(16), atol=1e-6)


def test_scaled_volumes_stay_finite(pixel_model):
    model, vols = pixel_model
    outs = [apply_stacked(model, c * vols[0]) for c in np.linspace(0, 10, 21)]
    assert all(np.all(np.isfinite(o)) for o in outs)
    close = apply_stacked(model, 1.001 * vols[0]) - outs[2]
    assert np.abs(close).max() < 0.1 * np.abs(outs[2]).max() + 1e-9


def test_stream_mismatch_and_too_few_samples(pixel_model, rng):
    model, _ = pixel_model
    with pytest.raises(GeometryError):
        apply_stacked(model, np.zeros((15, 32, 32, 2)))
    with pytest.raises(DataError):
        train_stacked(rng.random((20, 15, 32, 32)), SMALL)


def test_between_class_exceeds_within_class():
    a = _motion_volumes(Translate(1.5, 0), [1, 2])
    b = _motion_volumes(Oscillate("y", 8, 3), [3, 4])
    flow_a = np.zeros(a.shape + (2,), np.float32)
    flow_a[..., 0] = 1.5
    cfg = ConvIsaConfig(pca1_dim=24, pca2_dim=16, stack_top=8, isa=TrainOpts(epochs=15))
    model = train_stacked(np.concatenate([a, b]), cfg, seed=1)
    da, db = apply_stacked(model, a), apply_stacked(model, b)

    def mean_dist(x, y):
        return np.linalg.norm(x[:, None] - y[None], axis=-1).mean()
    within = 0.5 * (mean_dist(da, da) + mean_dist(db, db))
    assert mean_dist(da, db) > within


def test_two_stream_round_trip_and_filters(rng):
    pix = rng.random((260, 15, 32, 32)).astype(np.float32)
    flo = rng.normal(0, 1, (260, 15, 32, 32, 2)).astype(np.float32)
    m = train_two_stream(pix, flo, SMALL, seed=2)
    lop, lof = m.describe(pix[:3], flo[:3])
    assert lop.shape == lof.shape == (3, 16)
    back = TwoStreamModel.from_tensors(loads(dumps(*m.to_tensors())))
    lop2, lof2 = back.describe(pix[:3], flo[:3])
    np.testing.assert_allclose(lop2, lop, atol=1e-4)
    np.testing.assert_allclose(lof2, lof, atol=1e-4)
    with pytest.raises(GeometryError):
        m.pixel_model and apply_stacked(m.pixel_model, flo[:2])
    f = layer1_filters(m.flow_model)
    assert f.shape == (24, 5, 16, 16, 2)
    grid = filter_grid(f, 16)
    assert grid.shape == (16 * 2 * 17, 5 * 17) and grid.min() >= 0 and grid.max() <= 1
    with pytest.raises(DataError):
        TwoStreamModel.from_tensors(loads(dumps({"x": np.zeros(1)}, {"kind": "other"})))


@pytest.mark.parametrize("T,n", [(40, 60), (80, 30)])
def test_pca_matches_covariance_eigendecomposition(rng, T, n):
    X = rng.standard_normal((T, n)) * np.linspace(3, 0.5, n)
    m = pca_train(X, 10)
    Xc = X - X.mean(axis=0)
    vals, vecs = np.linalg.eigh(Xc.T @ Xc / (T - 1))
    top = vecs[:, ::-1][:, :10].T
    np.testing.assert_allclose(np.abs(m.basis @ top.T), np.eye(10), atol=1e-8)
    reg = 1e-5 * vals.sum() / n
    np.testing.assert_allclose(m.scales, 1 / np.sqrt(vals[::-1][:10] + reg), rtol=1e-8)
