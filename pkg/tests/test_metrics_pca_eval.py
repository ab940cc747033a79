import math
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from diqa.data import ImageCache, load_manifest
from diqa.evaluate import (
    UnsupportedModeError,
    evaluate,
    export_maps,
    np_sweep,
    predict_image,
    read_grid_csv,
    read_report,
    sample_reference_features,
    to_gray8,
    write_report,
)
from diqa.metrics import DegenerateError, average_ranks, lcc, logistic_fit, srocc
from diqa.model import ModelConfig, QualityNet
from diqa.pca import pca_fit, pca_reduce
from diqa.pooling import ImagePrediction
from diqa.synthetic import make_corpus


# -- correlation oracles ----------------------------------------------------------

def pearson_oracle(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = math.fsum((a - mx) ** 2 for a in x)
    vy = math.fsum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def rank_oracle(values):
    """Brute force: rank = 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(w < v for w in values) + (sum(w == v for w in values) - 1) / 2 for v in values]


def test_lcc_examples(rng):
    x = rng.normal(size=50)
    assert lcc(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
    assert lcc(x, -x) == pytest.approx(-1.0, abs=1e-12)
    y = rng.normal(size=50)
    assert abs(lcc(x, y) - pearson_oracle(list(x), list(y))) < 1e-10


def test_lcc_errors():
    with pytest.raises(DegenerateError):
        lcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        lcc([1], [2])
    with pytest.raises(ValueError):
        lcc([1, 2], [1, 2, 3])


def test_ranks_with_ties():
    assert average_ranks([1, 2, 2, 3]).tolist() == [1, 2.5, 2.5, 4]
    assert average_ranks([5, 5, 5]).tolist() == [2, 2, 2]


def test_srocc_examples(rng):
    x = rng.normal(size=30)
    assert srocc(x, np.exp(x)) == pytest.approx(1.0)
    assert srocc(x, -x ** 3) == pytest.approx(-1.0)
    x = [1, 2, 2, 3]
    y = [4.0, 1.0, 3.0, 9.0]
    assert abs(srocc(x, y) - pearson_oracle(rank_oracle(x), rank_oracle(y))) < 1e-10
    with pytest.raises(DegenerateError):
        srocc([2, 2, 2], [1, 2, 3])


def test_random_oracles_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 40))
        if trial % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert abs(lcc(x, y) - pearson_oracle(list(x), list(y))) < 1e-10
        assert abs(srocc(x, y) - pearson_oracle(rank_oracle(list(x)), rank_oracle(list(y)))) < 1e-10
        assert average_ranks(x).tolist() == rank_oracle(list(x))


def test_invariances(rng):
    x, y = rng.normal(size=60), rng.normal(size=60)
    base_l, base_s = lcc(x, y), srocc(x, y)
    assert abs(lcc(3.5 * x + 2, y) - base_l) < 1e-10
    assert abs(lcc(x, 0.1 * y - 7) - base_l) < 1e-10
    assert abs(srocc(np.exp(x), y ** 3) - base_s) < 1e-10
    assert abs(srocc(x, y) - lcc(average_ranks(x), average_ranks(y))) < 1e-15


def test_logistic_fit_monotone(rng):
    p = np.linspace(0, 1, 40)
    t = 100 / (1 + np.exp(-(p - 0.5) * 12)) + rng.normal(0, 1, 40)
    mapped = logistic_fit(p, t)
    assert lcc(mapped, t) > lcc(p, t)
    assert srocc(mapped, t) == pytest.approx(srocc(p, t))


# -- PCA --------------------------------------------------------------------------

def test_pca_rank_one(rng):
    t = rng.normal(size=(200, 1))
    x = t * np.array([[1.0, 2.0, -2.0]]) + np.array([5.0, 0.0, 1.0])
    pca = pca_fit(x)
    assert pca.explained_ratio()[0] >= 0.999
    np.testing.assert_allclose(pca.components[0], [1 / 3, 2 / 3, -2 / 3], atol=1e-8)


def test_pca_orthonormal_and_sorted(rng):
    x = rng.normal(size=(300, 12)) @ rng.normal(size=(12, 12))
    pca = pca_fit(x)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(12), atol=1e-5)
    assert np.all(np.diff(pca.explained_variance) <= 1e-12)
    for row in pca.components:
        assert row[np.flatnonzero(np.abs(row) > 1e-12)[0]] > 0
    # residual orthogonal to the retained subspace
    f = rng.normal(size=(5, 12))
    resid = f - pca_reduce(f, pca, 4)
    assert np.abs(resid @ pca.components[:4].T).max() < 1e-5


def test_pca_2x2_analytic():
    x = np.array([[2.0, 0.0], [0.0, 1.0], [-2.0, 0.0], [0.0, -1.0], [1.0, 1.0], [-1.0, -1.0]])
    pca = pca_fit(x)
    c = np.cov(x.T)
    a, b, d = c[0, 0], c[0, 1], c[1, 1]
    lam1 = (a + d) / 2 + math.sqrt(((a - d) / 2) ** 2 + b * b)
    lam2 = (a + d) / 2 - math.sqrt(((a - d) / 2) ** 2 + b * b)
    v1 = np.array([b, lam1 - a])
    v1 /= np.linalg.norm(v1)
    np.testing.assert_allclose(pca.explained_variance, [lam1, lam2], atol=1e-12)
    np.testing.assert_allclose(pca.components[0], v1 * np.sign(v1[0]), atol=1e-12)


def test_pca_reduce_endpoints_and_monotone(rng):
    train = rng.normal(size=(400, 16)) @ rng.normal(size=(16, 16))
    held = rng.normal(size=(100, 16)) @ rng.normal(size=(16, 16))
    pca = pca_fit(train)
    np.testing.assert_allclose(pca_reduce(held, pca, 16), held, atol=1e-4)
    assert np.array_equal(pca_reduce(held, pca, 0), np.broadcast_to(pca.mean, held.shape))
    errors = [np.sum((pca_reduce(train[:100], pca, k) - train[:100]) ** 2) for k in range(17)]
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))
    with pytest.raises(ValueError):
        pca_reduce(held, pca, 17)
    with pytest.raises(ValueError):
        pca_fit(train[:3], n_components=4)


# -- prediction, reports, maps ----------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = make_corpus(tmp_path_factory.mktemp("toy"), n_images=6, size=64, seed=3)
    return load_manifest(path)


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(0)
    return {
        "nr_avg": QualityNet.initialize(ModelConfig("nr", "average", depth="shallow"), rng),
        "nr_w": QualityNet.initialize(ModelConfig("nr", "weighted", depth="shallow"), rng),
        "fr_w": QualityNet.initialize(ModelConfig("fr", "weighted", "diff", "shallow"), rng),
    }


def test_predict_dense_average(corpus, nets):
    cache = ImageCache()
    p = predict_image(corpus[0], nets["nr_avg"], mode="dense", cache=cache)
    assert len(p.patch_qualities) == 4
    assert p.q_hat == pytest.approx(np.mean(p.patch_qualities), abs=1e-6)
    again = predict_image(corpus[0], nets["nr_avg"], mode="dense", cache=cache)
    assert again.q_hat == p.q_hat


def test_predict_weighted_and_seeded(corpus, nets):
    p = predict_image(corpus[1], nets["nr_w"], n_patches=32, seed=4)
    assert abs(p.normalized_weights.sum() - 1) < 1e-5 and np.all(p.normalized_weights > 0)
    assert len(p.patch_coords) == 32
    q = predict_image(corpus[1], nets["nr_w"], n_patches=32, seed=4)
    assert np.array_equal(p.patch_coords, q.patch_coords) and p.q_hat == q.q_hat


def test_predict_siamese_identity(corpus, nets):
    same = replace(corpus[2], reference_path=corpus[2].distorted_path)
    p = predict_image(same, nets["fr_w"], n_patches=16, seed=0)
    assert np.all(p.patch_qualities == p.patch_qualities[0])


def test_evaluate_report_roundtrip(corpus, nets, tmp_path):
    rep = evaluate(corpus, nets["nr_avg"], n_patches=8, seed=1, group_by="group")
    assert rep.n == 6 and -1 <= rep.lcc <= 1 and -1 <= rep.srocc <= 1
    assert set(rep.groups) == {"noise_low", "noise_high"}
    write_report(rep, tmp_path / "r.csv")
    ids, t, p = read_report(tmp_path / "r.csv")
    assert ids == rep.ids and np.array_equal(p, rep.predictions)
    text = (tmp_path / "r.csv").read_text()
    assert f"# {rep.summary()}" in text and "# group=noise_low" in text


def test_np_sweep_rows(corpus, nets):
    rows = np_sweep(corpus, nets["nr_avg"], [1, 2, 4], repeats=2, seed=0)
    assert [r[0] for r in rows] == [1, 2, 4]
    dense = np_sweep(corpus, nets["nr_avg"], [4], repeats=5, mode="dense")
    assert dense == np_sweep(corpus, nets["nr_avg"], [4], repeats=1, mode="dense")


def test_reference_feature_sampling(corpus, nets):
    f = sample_reference_features(corpus, nets["fr_w"], n_samples=50, seed=0)
    assert f.shape == (50, 256)


def test_maps_constant_and_grid(tmp_path):
    assert np.all(to_gray8(np.full((2, 2), 3.0)) == 128)
    g = to_gray8(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert g[0, 0] == 0 and g[1, 1] == 255
    pred = ImagePrediction("x", 1.0, np.array([1.0, 2.0, 3.0, 4.0]), np.zeros((4, 2)),
                           np.full(4, 0.25), np.array([0.5, 1.0, 1.5, 2.0]), "dense", (64, 64))
    files = export_maps(pred, tmp_path, "x")
    assert np.array_equal(read_grid_csv(files["quality_csv"]), [[1, 2], [3, 4]])
    assert np.array_equal(read_grid_csv(files["weight_csv"]), [[0.5, 1.0], [1.5, 2.0]])
    png = np.asarray(Image.open(files["quality_png"]))
    assert png.shape == (2, 2) and png.dtype == np.uint8
    with pytest.raises(UnsupportedModeError):
        export_maps(replace(pred, mode="random"), tmp_path)


def test_maps_from_dense_prediction(corpus, nets, tmp_path):
    p = predict_image(corpus[0], nets["nr_w"], mode="dense")
    files = export_maps(p, tmp_path)
    grid = read_grid_csv(files["quality_csv"])
    assert np.array_equal(grid.ravel(), p.patch_qualities)
    assert read_grid_csv(files["weight_csv"]).shape == (2, 2)
