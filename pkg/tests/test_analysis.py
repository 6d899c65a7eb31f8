import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegcond.analysis import (EmbeddingMatrix, TsneConfig, cluster_report, collect_embeddings,
                              conditional_affinities, joint_probabilities, kl_divergence,
                              kl_gradient, run_tsne, squared_distances, tsne_csv)
from eegcond.conditioning import EMBED_DIM, code_string, encode_profile
from eegcond.dataset import SubjectProfile
from eegcond.models import ModelSpec, build_model

FAST = TsneConfig(perplexity=3.0, iterations=300, seed=1)


def _points(n, dim=5, seed=0):
    return np.random.default_rng(seed).standard_normal((n, dim))


@pytest.mark.parametrize("n", [4, 7, 10])
def test_kl_gradient_matches_finite_differences(n):
    X = _points(n)
    P, _, _ = joint_probabilities(X, perplexity=2.0)
    Y = _points(n, 2, seed=n)
    g = kl_gradient(P, Y)
    h = 1e-6
    num = np.zeros_like(Y)
    for i, k in itertools.product(range(n), range(2)):
        Yp, Ym = Y.copy(), Y.copy()
        Yp[i, k] += h
        Ym[i, k] -= h
        num[i, k] = (kl_divergence(P, Yp) - kl_divergence(P, Ym)) / (2 * h)
    rel = np.abs(g - num).max() / np.abs(num).max()
    assert rel < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(6, 20), st.floats(1.5, 4.5), st.integers(0, 1000))
def test_perplexity_calibration(n, perplexity, seed):
    X = _points(n, 3, seed)
    P, _, H = conditional_affinities(squared_distances(X), perplexity)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(np.diag(P) == 0)
    # independent entropy of each row, in nats
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.nansum(np.where(P > 0, P * np.log(P), 0.0), axis=1)
    assert np.max(np.abs(np.exp(ent) / perplexity - 1)) < 1e-3
    np.testing.assert_allclose(ent, H, atol=1e-9)


def test_joint_probabilities_symmetric_and_translation_invariant():
    X = _points(9)
    P, _, _ = joint_probabilities(X, 3.0)
    np.testing.assert_allclose(P, P.T, rtol=0, atol=0)
    assert P.sum() == pytest.approx(1.0, abs=1e-12)
    Q, _, _ = joint_probabilities(X + 17.0, 3.0)
    np.testing.assert_allclose(P, Q, rtol=1e-9, atol=1e-15)
    Y = _points(9, 2, 4)
    assert kl_divergence(P, Y + 3.0) == pytest.approx(kl_divergence(P, Y), rel=1e-12)


def test_duplicate_rows_share_a_point():
    X = _points(8)
    dup = np.vstack([X, X[2], X[5], X[2]])
    res = run_tsne(dup, FAST)
    assert res.embedding.shape == (11, 2)
    assert np.array_equal(res.embedding[8], res.embedding[2])
    assert np.array_equal(res.embedding[10], res.embedding[2])
    assert np.array_equal(res.embedding[9], res.embedding[5])
    assert len(res.unique_embedding) == 8


def test_optimisation_lowers_kl():
    X = np.vstack([_points(6, seed=1) + 5, _points(6, seed=2) - 5])
    res = run_tsne(X, FAST)
    assert res.kl_final < res.kl_initial
    assert np.all(np.isfinite(res.embedding))
    # well-separated groups stay separated in the layout
    a, b = res.embedding[:6], res.embedding[6:]
    within = max(np.ptp(a, axis=0).max(), np.ptp(b, axis=0).max())
    assert np.linalg.norm(a.mean(0) - b.mean(0)) > within


def test_tsne_is_seeded():
    X = _points(10)
    a, b = run_tsne(X, FAST), run_tsne(X, FAST)
    assert np.array_equal(a.embedding, b.embedding)


def test_too_few_distinct_rows():
    with pytest.raises(ValueError, match="identical"):
        run_tsne(np.ones((5, 3)), FAST)
    with pytest.raises(ValueError, match="at least 4"):
        run_tsne(np.vstack([_points(3)] * 3), FAST)
    with pytest.raises(ValueError, match="perplexity"):
        run_tsne(_points(5), TsneConfig(perplexity=4.0))
    with pytest.raises(ValueError):
        TsneConfig(perplexity=0.5)


def _matrix(codes, unseen=None, rows=None):
    codes = np.asarray(codes)
    n = len(codes)
    if rows is None:
        rows = np.hstack([codes, np.zeros((n, EMBED_DIM - 4))]).astype(float)
    return EmbeddingMatrix(rows, [f"S{i:02d}" for i in range(n)], codes,
                           np.zeros(n, bool) if unseen is None else np.asarray(unseen))


def test_cluster_report_hand_example():
    codes = [[1, 0, 0, 0], [1, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0],
             [1, 1, 1, 1], [1, 0, 0, 0]]
    unseen = [0, 0, 0, 0, 0, 0, 1]
    rep = cluster_report(_matrix(codes, unseen), min_size=2)
    assert rep.n_possible == 16
    assert rep.n_observed == 3
    assert rep.prominent == ["0110", "1000"]
    assert rep.membership["1000"] == ["S00", "S01", "S06"]
    assert rep.unseen_nearest == {"S06": "1000"}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 1)] * 4), min_size=1, max_size=40),
       st.integers(1, 5))
def test_cluster_report_bounds(codes, min_size):
    rep = cluster_report(_matrix(codes), min_size)
    assert 1 <= rep.n_observed <= min(16, len(codes))
    assert 0 <= rep.n_prominent <= rep.n_observed
    assert sum(len(v) for v in rep.membership.values()) == len(codes)
    assert rep.n_observed == len({code_string(c) for c in codes})
    assert all(len(rep.membership[k]) >= min_size for k in rep.prominent)


def test_collect_embeddings(small_pre):
    spec = ModelSpec("lstm", True, n_channels=small_pre.n_channels)
    model = build_model(spec, seed=3)
    E = collect_embeddings(model, small_pre.profiles, unseen_ids=[small_pre.subjects[1]])
    assert E.row_ids == sorted(small_pre.profiles)
    assert E.unseen.tolist() == [s == small_pre.subjects[1] for s in E.row_ids]
    codes = np.stack([encode_profile(small_pre.profiles[s]) for s in E.row_ids])
    W = model.embedder.weight.detach().double().numpy()
    b = model.embedder.bias.detach().double().numpy()
    np.testing.assert_allclose(E.rows, codes @ W.T + b, rtol=1e-6, atol=1e-7)
    with pytest.raises(ValueError):
        collect_embeddings(build_model(ModelSpec("lstm", n_channels=4)), small_pre.profiles)


def test_embeddings_depend_only_on_profile():
    spec = ModelSpec("dmu", True, n_channels=4)
    model = build_model(spec, seed=0)
    profiles = {"A": SubjectProfile("A", "visual", 1, 0, 1),
                "B": SubjectProfile("B", "visual", 1, 0, 1),
                "C": SubjectProfile("C", "auditory", 1, 0, 1)}
    E = collect_embeddings(model, profiles)
    assert np.array_equal(E.rows[0], E.rows[1])
    assert not np.array_equal(E.rows[0], E.rows[2])


def test_tsne_csv_columns():
    E = _matrix([[1, 0, 0, 0], [0, 1, 1, 0]], unseen=[0, 1])
    text = tsne_csv(E, np.array([[0.5, -1.0], [2.0, 3.0]]), "h")
    lines = text.splitlines()
    assert lines[0] == "# config_hash: h"
    assert lines[1] == "subject_id,x,y,profile_code,unseen_flag"
    assert lines[3] == "S01,2.0,3.0,0110,1"
    assert math.isclose(float(lines[2].split(",")[1]), 0.5)
