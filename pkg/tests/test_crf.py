import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgmseg.crf import (CrfGraph, PotentialParams, build_graph, clique_energy, clique_lambda,
                        clique_quality, energy_terms, minimize, pairwise_energy,
                        segment_volume, total_energy, unary_energy)
from dgmseg.embedding import EmbeddingModel, class_posterior
from dgmseg.evaluation import dice
from dgmseg.grassmann import KernelParams
from dgmseg.volume import PhantomSpec, Volume, generate_phantom

from oracles import brute_force_minimum, enumerate_energies, random_crf


def knn_model(labels, coords, k=15):
    coords = np.asarray(coords, dtype=float).reshape(len(labels), -1)
    return EmbeddingModel(A=np.zeros((len(labels), coords.shape[1])),
                          points=np.zeros((len(labels), 4, 1)), labels=np.asarray(labels),
                          params=KernelParams(), k1=1, k2=1, d=coords.shape[1], h=1.0,
                          classifier_k=k, train_embedded=coords)


def test_unary_examples():
    tie = knn_model(np.tile([0, 1], 10), np.zeros(20), k=4)
    assert math.isclose(unary_energy([0.0], 0, tie), math.log(2), abs_tol=1e-15)
    assert math.isclose(unary_energy([0.0], 1, tie), math.log(2), abs_tol=1e-15)
    tumor = knn_model(np.ones(20, dtype=int), np.arange(20.0))
    assert math.isclose(unary_energy([0.0], 1, tumor), -math.log(16 / 17), rel_tol=1e-14)
    assert math.isclose(unary_energy([0.0], 0, tumor), -math.log(1 / 17), rel_tol=1e-14)
    assert abs(unary_energy([0.0], 1, tumor) - 0.0606) < 1e-4
    assert abs(unary_energy([0.0], 0, tumor) - 2.833) < 1e-3


def test_unary_matches_posterior(rng):
    model = knn_model(rng.integers(0, 2, 40), rng.standard_normal((40, 3)))
    for _ in range(10):
        v = rng.standard_normal(3)
        p = class_posterior(v, model)
        for c in (0, 1):
            assert unary_energy(v, c, model) == -np.log(p[c])
            assert 0 < unary_energy(v, c, model) <= math.log(17)


def test_pairwise_examples():
    p = PotentialParams(w=1.7, sigma_f=0.8)
    v = np.array([0.3, -1.0])
    assert pairwise_energy(v, v + 1, 1, 1, p) == 0.0
    assert pairwise_energy(v, v, 0, 1, p) == 1.7
    u = v + np.array([0.8 * math.sqrt(2 * math.log(2)), 0.0])
    assert math.isclose(pairwise_energy(v, u, 0, 1, p), 1.7 / 2, rel_tol=1e-12)
    assert pairwise_energy(v, u, 0, 1, p) == pairwise_energy(u, v, 1, 0, p)
    with pytest.raises(ValueError):
        pairwise_energy(v, u, 0, 1, PotentialParams())


def test_clique_quality():
    assert clique_quality([3], np.random.default_rng(0).normal(size=(5, 4))) == 0.0
    emb = np.zeros((2, 3))
    emb[1, 0] = 2.0
    # two points at distance r in one of d dimensions: r^2/4 in that dimension
    assert math.isclose(clique_quality([0, 1], emb), (4 / 4) / 3)
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(10, 6))
    c = [1, 4, 5, 9]
    pts = emb[c]
    oracle = np.mean([np.mean((pts[:, k] - pts[:, k].mean()) ** 2) for k in range(6)])
    assert math.isclose(clique_quality(c, emb), oracle, rel_tol=1e-12)


def test_clique_energy_examples():
    assert clique_energy([1, 1, 1, 1], 3.0, 2) == 0
    assert clique_energy([0, 1, 0, 1], 3.0, 2) == 3.0
    assert clique_energy([0, 1, 0, 1, 1, 0], 3.0, 2) == 3.0
    lam = clique_lambda(0.0, PotentialParams(lambda_max=2.0))
    assert clique_energy([0, 0, 0, 1], lam, 2) == 2.0 / 2
    # literal power form, evaluation only
    assert clique_energy([0, 0, 0, 1], 2.0, 2, mode="power") == 2.0
    assert clique_energy([0, 0, 1, 1, 0, 0, 0, 0, 0], 2.0, 3, mode="power") == 2.0 * 2 ** (1 / 3)
    assert clique_energy([0, 0, 1, 1, 1, 1, 0, 0, 0], 2.0, 3, mode="power") == 2.0
    with pytest.raises(ValueError):
        clique_energy([0, 1], 1.0, 1, mode="bogus")


@given(st.integers(2, 9), st.integers(1, 9), st.floats(0, 5, allow_subnormal=False),
       st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_clique_energy_bounded_and_monotone(t, T, lam, seed):
    T = min(T, t)
    prev = -1.0
    for C in range(t // 2 + 1):
        labels = np.array([1] * C + [0] * (t - C))
        e = clique_energy(np.random.default_rng(seed).permutation(labels), lam, T)
        assert 0 <= e <= lam
        assert e >= prev
        assert (e == 0) == (C == 0 or lam == 0)
        prev = e


def test_clique_lambda_decreases_with_quality():
    p = PotentialParams(lambda_max=2.0, beta_q=1.5)
    assert clique_lambda(0.0, p) == 2.0
    assert clique_lambda(1.0, p) < clique_lambda(0.5, p)


def test_energy_examples():
    g = CrfGraph([[0.2, 1.0], [0.7, 0.1], [0.3, 0.4]], [[0, 1], [1, 2]], [0.0, 0.0])
    x = np.array([0, 1, 1])
    assert total_energy(g, x) == 0.2 + 0.1 + 0.4
    chain = CrfGraph([[0.2, 1.0], [0.7, 0.1], [0.3, 0.4]], [[0, 1], [1, 2]], [0.5, 0.25],
                     [[0, 1, 2]], [1.2], [1])
    assert math.isclose(total_energy(chain, x), 0.2 + 0.1 + 0.4 + 0.5 + 1.2)
    assert total_energy(chain, x) == total_energy(chain, x.copy())
    u, pw, cl = energy_terms(chain, x)
    assert total_energy(chain, x) == u + pw + cl
    with pytest.raises(ValueError):
        total_energy(chain, [0, 1])
    with pytest.raises(ValueError):
        total_energy(chain, [0, 2, 1])


def test_minimize_dominant_unaries(rng):
    g = random_crf(rng)
    g.unary[:, 0] = 1000.0
    g.unary[:, 1] = 0.0
    assert np.all(minimize(g) == 1)


def test_minimize_separable(rng):
    g = random_crf(rng)
    g.edge_weight[:] = 0.0
    g.cliques, g.lambda_q, g.truncation = [], np.zeros(0), np.zeros(0, dtype=int)
    g.unary[0] = [0.5, 0.5]
    x = minimize(g)
    keep = np.arange(1, g.n_nodes)
    assert np.array_equal(x[keep], np.argmin(g.unary[keep], axis=1))


def test_minimize_12_nodes_3_cliques():
    rng = np.random.default_rng(3)
    unary = rng.uniform(0, 3, size=(12, 2))
    pairs = [(i, j) for i in range(12) for j in range(i + 1, 12)]
    edges = np.array([pairs[k] for k in sorted(rng.choice(len(pairs), 20, replace=False))])
    cliques = [np.arange(0, 4), np.arange(4, 8), np.arange(8, 12)]
    g = CrfGraph(unary, edges, rng.uniform(0, 2, 20), cliques, [2.0, 3.0, 1.0], [2, 1, 3])
    best, _ = brute_force_minimum(g)
    assert total_energy(g, minimize(g)) == best


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_minimize_matches_enumeration(seed):
    g = random_crf(np.random.default_rng(seed), max_nodes=12)
    x = minimize(g)
    best, enum_min = brute_force_minimum(g)
    assert total_energy(g, x) == best
    X, E = enumerate_energies(g)
    assert abs(E[int("".join(map(str, x)), 2)] - enum_min) < 1e-9
    uniform = [total_energy(g, np.full(g.n_nodes, c)) for c in (0, 1)]
    assert total_energy(g, x) <= min(uniform)


def test_minimize_beats_random_labelings(rng):
    g = random_crf(rng, max_nodes=14)
    e = total_energy(g, minimize(g))
    for _ in range(64):
        assert e <= total_energy(g, rng.integers(0, 2, g.n_nodes))


def test_non_finite_potential_rejected():
    g = CrfGraph([[np.inf, 0.0]], np.zeros((0, 2)), [])
    with pytest.raises(FloatingPointError):
        minimize(g)


def test_build_graph_edges_and_weights(rng):
    V = rng.standard_normal((12, 3))
    unary = rng.uniform(0, 2, (12, 2))
    sp_edges = np.array([[0, 1], [1, 2], [5, 3]])
    cliques = [np.arange(0, 6), np.arange(6, 12)]
    p = PotentialParams(w=1.5, sigma_f=0.7, k_f=2, lambda_max=2.0, beta_q=1.0)
    g = build_graph(V, unary, sp_edges, cliques, p)
    E = {tuple(e) for e in g.edges.tolist()}
    assert {(0, 1), (1, 2), (3, 5)} <= E
    assert all(i < j for i, j in E) and len(E) == len(g.edges)
    d2 = ((V[:, None] - V[None]) ** 2).sum(-1)
    for i in range(12):
        for j in np.argsort(d2[i], kind="stable")[1:3]:
            assert (min(i, j), max(i, j)) in E
    for (i, j), w in zip(g.edges, g.edge_weight):
        assert math.isclose(w, pairwise_energy(V[i], V[j], 0, 1, p), rel_tol=1e-12)
    assert g.truncation.tolist() == [3, 3]
    for c, lam in zip(cliques, g.lambda_q):
        assert math.isclose(lam, 2.0 * math.exp(-clique_quality(c, V) / 0.7 ** 2))


def test_auto_sigma_is_scaled_median(rng):
    V = rng.standard_normal((9, 3))
    unary = rng.uniform(0, 2, (9, 2))
    p = PotentialParams(w=1.0, k_f=3, sigma_scale=0.5)
    g = build_graph(V, unary, np.zeros((0, 2), dtype=int), [], p)
    d2 = ((V[:, None] - V[None]) ** 2).sum(-1)
    sigma = 0.5 * np.median(np.sqrt(d2[np.triu_indices(9, 1)]))
    for (i, j), w in zip(g.edges, g.edge_weight):
        assert math.isclose(w, math.exp(-d2[i, j] / (2 * sigma ** 2)), rel_tol=1e-12)
    with pytest.raises(ValueError):
        PotentialParams(sigma_scale=0)


def test_segment_volume_zero_noise(model):
    vol, mask = generate_phantom(PhantomSpec(volume_dims=(48, 48, 24), tumor_contrast=20,
                                             tumor_diameter=20, noise_sd=0))
    seg = segment_volume(vol, model)
    assert dice(seg, mask) >= 0.9


def test_segment_volume_constant_volume(model):
    vol = Volume(np.full((48, 48, 8), 60.0))
    seg = segment_volume(vol, model)
    assert seg.data.mean() < 0.01


def test_segment_volume_deterministic(model):
    vol, _ = generate_phantom(PhantomSpec(volume_dims=(40, 40, 20), tumor_diameter=16,
                                          rng_seed=9))
    a, logs = segment_volume(vol, model, return_log=True)
    b = segment_volume(vol, model)
    assert a == b
    assert len(logs) == 20
    assert all(entry.final_energy <= entry.initial_energy + 1e-9 for entry in logs)


def test_segment_volume_too_small(model):
    with pytest.raises(ValueError):
        segment_volume(Volume(np.zeros((6, 6, 2))), model)
