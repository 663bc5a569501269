import numpy as np
import pytest
from hypothesis import given, strategies as st

from _oracles import fisher_vector_loop
from trajlearn.config import desk_scale_config
from trajlearn.container import dumps, loads
from trajlearn.convisa import PcaModel
from trajlearn.descriptors import DIMS, DescriptorSet
from trajlearn.encoding import (FisherEncoder, GmmModel, encode_video, fisher_vector, gmm_train, mifs_stack,
                                power_l2_normalize, required_frames, train_encoder)
from trajlearn.errors import DataError, GeometryError
from trajlearn.pipeline import extract_single_rate
from trajlearn.video_io import GrayVideo, Static, Translate, synth_video


def _random_gmm(rng, K, D):
    w = rng.uniform(0.2, 1.0, K)
    return GmmModel(w / w.sum(), rng.normal(0, 1, (K, D)), rng.uniform(0.3, 2.0, (K, D)))


# -- GMM -----------------------------------------------------------------------

def test_two_separated_clusters(rng):
    centers = np.array([[-5.0, 0.0, 2.0], [5.0, 1.0, -2.0]])
    X = np.concatenate([rng.normal(c, 0.5, (1000, 3)) for c in centers])
    g = gmm_train(X, 2, seed=1)
    order = np.argsort(g.means[:, 0])
    assert np.abs(g.means[order] - centers).max() < 0.1
    assert np.abs(g.weights - 0.5).max() < 0.05
    assert abs(g.weights.sum() - 1) < 1e-9


def test_single_component_closed_form(rng):
    X = rng.normal(3, 2, (500, 4)) * np.array([1, 2, 0.5, 3])
    g = gmm_train(X, 1)
    np.testing.assert_allclose(g.weights, [1.0], atol=1e-12)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-8)
    np.testing.assert_allclose(g.variances[0], X.var(axis=0), atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_em_monotone_and_floor(seed):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(rng.uniform(-3, 3, 2), rng.uniform(0.3, 1.5), (150, 2)) for _ in range(4)])
    g = gmm_train(X, 8, seed=seed, tol=0.0, max_iter=60)
    ll = np.array(g.log_likelihoods)
    assert np.all(np.diff(ll) >= -1e-10)
    assert abs(g.weights.sum() - 1) < 1e-9 and np.all(g.weights > 0)
    assert np.all(g.variances >= 1e-4 * X.var(axis=0) - 1e-15)


def test_gmm_deterministic_and_errors(rng):
    X = rng.standard_normal((400, 3))
    a, b = gmm_train(X, 4, seed=9), gmm_train(X, 4, seed=9)
    assert a.means.tobytes() == b.means.tobytes() and a.variances.tobytes() == b.variances.tobytes()
    with pytest.raises(DataError):
        gmm_train(X[:30], 4)


# -- Fisher vectors ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_fisher_vector_matches_summation_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    K, D, M = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 8)
    g = _random_gmm(rng, K, D)
    X = rng.normal(0, 1.5, (M, D))
    np.testing.assert_allclose(fisher_vector(X, g), fisher_vector_loop(X, g.weights, g.means, g.variances),
                               rtol=0, atol=1e-10)


def test_fisher_vector_examples(rng):
    g = GmmModel(np.array([1.0]), np.array([[0.7]]), np.array([[2.0]]))
    np.testing.assert_allclose(fisher_vector(np.array([[0.7]]), g), [0.0, -1 / np.sqrt(2)], atol=1e-15)
    g2 = _random_gmm(rng, 3, 4)
    z = fisher_vector(np.zeros((0, 4)), g2)
    assert z.shape == (24,) and not z.any()
    with pytest.raises(GeometryError):
        fisher_vector(np.zeros((2, 5)), g2)


@given(st.integers(0, 2**32 - 1))
def test_fisher_vector_permutation_and_additivity(seed):
    rng = np.random.default_rng(seed)
    g = _random_gmm(rng, 3, 2)
    X = rng.normal(0, 2, (int(rng.integers(2, 12)), 2))
    fv = fisher_vector(X, g)
    np.testing.assert_allclose(fisher_vector(X[rng.permutation(len(X))], g), fv, atol=1e-12)
    cut = int(rng.integers(1, len(X)))
    combined = fisher_vector(X[:cut], g) * cut + fisher_vector(X[cut:], g) * (len(X) - cut)
    np.testing.assert_allclose(fv * len(X), combined, atol=1e-9)


def test_power_l2_examples():
    np.testing.assert_allclose(power_l2_normalize(np.array([4.0, -9.0])), [2 / np.sqrt(13), -3 / np.sqrt(13)])
    np.testing.assert_allclose(power_l2_normalize(np.array([4.0, -9.0])), [0.5547, -0.8321], atol=1e-4)
    assert not power_l2_normalize(np.zeros(5)).any()


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.1, 1.0))
def test_power_l2_unit_norm(values, alpha):
    v = np.array(values)
    out = power_l2_normalize(v, alpha)
    if np.any(v != 0):
        assert abs(np.linalg.norm(out) - 1) < 1e-9
        assert np.all(np.sign(out) == np.sign(v))


# -- encoder and representation ------------------------------------------------

def _pool(rng, n, kinds):
    return DescriptorSet({k: rng.random((n, DIMS[k])) for k in kinds}, rng.random((n, 3)))


@pytest.fixture(scope="module")
def encoder():
    rng = np.random.default_rng(4)
    return train_encoder(_pool(rng, 400, ["hog", "lop"]), K=8, seed=2)


def test_representation_length_and_norms(encoder, rng):
    assert encoder.block_dims() == {"hog": 2 * 48 * 8, "lop": 2 * 100 * 8}
    assert encoder.dim == 2368
    rep = encode_video(_pool(rng, 30, ["hog", "lop"]), encoder)
    assert rep.vector.shape == (2368,)
    for kind in ("hog", "lop"):
        assert abs(np.linalg.norm(rep.block(kind)) - 1) < 1e-9


def test_empty_kinds_give_zeros(encoder, rng):
    rep = encode_video(DescriptorSet.empty(["hog", "lop"]), encoder)
    assert rep.vector.shape == (2368,) and not rep.vector.any()
    with pytest.raises(ValueError):
        DescriptorSet({"hog": rng.random((5, 96)), "lop": np.zeros((0, 200))}, rng.random((5, 3)))


def test_descriptor_order_irrelevant(encoder, rng):
    ds = _pool(rng, 25, ["hog", "lop"])
    perm = rng.permutation(25)
    np.testing.assert_allclose(encode_video(ds.take(perm), encoder).vector, encode_video(ds, encoder).vector,
                               atol=1e-12)


def test_encode_errors(encoder, rng):
    with pytest.raises(DataError):
        encode_video(_pool(rng, 5, ["hog", "hof", "lop"]), encoder)
    with pytest.raises(DataError):
        encode_video(_pool(rng, 5, ["hog"]), encoder)
    with pytest.raises(DataError):
        train_encoder(_pool(rng, 400, ["hog"]), K=2, kinds=["hog", "mbh"])


def test_encoder_round_trip(encoder, rng):
    back = FisherEncoder.from_tensors(loads(dumps(*encoder.to_tensors())))
    ds = _pool(rng, 12, ["hog", "lop"])
    np.testing.assert_allclose(encode_video(ds, back).vector, encode_video(ds, encoder).vector, atol=1e-5)
    again = train_encoder(_pool(np.random.default_rng(4), 400, ["hog", "lop"]), K=8, seed=2)
    assert dumps(*again.to_tensors()) == dumps(*encoder.to_tensors())


def test_pca_halves_every_kind(rng):
    kinds = ["traj_shape", "hog", "hof", "mbh", "lop", "lof"]
    enc = train_encoder(_pool(rng, 300, kinds), K=2, seed=0)
    assert {k: enc.gmms[k].D for k in kinds} == {k: -(-DIMS[k] // 2) for k in kinds}


def test_xyt_extension_adds_three_dims(rng):
    enc = train_encoder(_pool(rng, 300, ["hog"]), K=2, seed=0, xyt=True)
    assert enc.gmms["hog"].D == 51
    assert encode_video(_pool(rng, 9, ["hog"]), enc).vector.shape == (2 * 51 * 2,)


# -- multi-skip stacking -------------------------------------------------------

def _counting_extractor(video):
    n = video.frames
    return DescriptorSet({"hog": np.full((n, 96), float(n))}, np.zeros((n, 3)))


def test_mifs_counts_and_skipping():
    video = GrayVideo(np.zeros((40, 8, 8)))
    ds, report = mifs_stack(video, (0, 1, 2), _counting_extractor)
    assert required_frames(1) == 32 and required_frames(2) == 48
    assert report["used"] == [0, 1] and report["skipped"] == [2]
    assert len(ds) == 40 + 20
    ds0, _ = mifs_stack(video, (0,), _counting_extractor)
    assert len(ds0) == 40
    with pytest.raises(ValueError):
        mifs_stack(video, (0,))


@pytest.fixture(scope="module")
def desk():
    return desk_scale_config(0)


def test_mifs_real_extraction(desk):
    video = synth_video(Translate(1.0, 0.5), (64, 64, 64), seed=3)
    plain = extract_single_rate(video, desk)
    only0, _ = mifs_stack(video, (0,), lambda v: extract_single_rate(v, desk))
    assert len(only0) == len(plain) > 0
    for k in plain.descriptors.values:
        np.testing.assert_array_equal(only0.descriptors.values[k], plain.descriptors.values[k])
    both, rep = mifs_stack(video, (0, 1), lambda v: extract_single_rate(v, desk))
    assert len(both) == rep["counts"][0] + rep["counts"][1] and rep["counts"][1] > 0


def test_mifs_static_video_is_empty(desk):
    video = synth_video(Static(), (64, 64, 48), seed=1)
    ds, rep = mifs_stack(video, (0, 1, 2), lambda v: extract_single_rate(v, desk))
    assert len(ds) == 0 and rep["used"] == [0, 1, 2]
