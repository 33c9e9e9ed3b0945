import numpy as np
import pytest
import scipy.sparse as sp

from caprec.core import ContextVectors, LatentModel, RatingsDataset, TrainConfig
from caprec.objective import bpr_pairs
from caprec.train import (
    AdagradState,
    TrainingError,
    grad_accuracy,
    grad_capacity_u,
    grad_capacity_v,
    grad_capacity_x,
    init_model,
    load_checkpoint,
    objective_gradients,
    save_checkpoint,
    train,
    train_unconstrained,
)
from helpers import fd_gradients, random_context, random_model, random_signed, rel_err


def test_capacity_gradients_vanish():
    rng = np.random.default_rng(0)
    m = random_model(rng, 4, 5, 2, L=3)
    ctx = ContextVectors(np.array([0.0, 0.3, 0.5, 0.9]), np.ones(5))
    assert np.all(grad_capacity_u(m, ctx, 0) == 0)
    assert np.all(grad_capacity_x(m, ctx, 0) == 0)
    zero_p = ContextVectors(np.zeros(4), np.ones(5))
    assert np.all(grad_capacity_v(m, zero_p, 2) == 0)
    slack = ContextVectors(np.full(4, 0.5), np.full(5, 102.0))
    assert np.linalg.norm(grad_capacity_u(m, slack, 1)) < 1e-30
    m.Y[:] = 0.0
    assert np.all(grad_capacity_x(m, ctx, 2) == 0)
    with pytest.raises(ValueError):
        grad_capacity_x(random_model(rng, 4, 5, 2), ctx, 0)


def test_single_rating_accuracy_gradient():
    d = RatingsDataset.from_triples([(0, 0, 1.0)], 1, 1, feedback_mode="implicit01")
    m = LatentModel(np.array([[1.0]]), np.array([[0.5]]))
    assert grad_accuracy(m, d, "square", "u", 0) == pytest.approx([-0.5])
    perfect = LatentModel(np.array([[2.0]]), np.array([[0.5]]))
    assert np.all(grad_accuracy(perfect, d, "square", "v", 0) == 0)


@pytest.mark.parametrize("surrogate", ["logistic", "exponential", "hinge"])
@pytest.mark.parametrize("kind", ["square", "bpr"])
def test_per_vector_gradients_match_differences(surrogate, kind):
    rng = np.random.default_rng([len(surrogate), len(kind)])
    M, N, k, L = 5, 6, 2, 3
    d = random_signed(rng, M, N)
    m = random_model(rng, M, N, k, L=L)
    ctx = random_context(rng, m)
    pairs = bpr_pairs(d) if kind == "bpr" else None
    cap = TrainConfig(alpha=1.0, lam=0.0, rank=k, surrogate=surrogate, accuracy=kind, geo=True)
    acc = TrainConfig(alpha=0.0, lam=0.0, rank=k, surrogate=surrogate, accuracy=kind, geo=True)
    fd_cap = fd_gradients(m, d, ctx, cap, pairs=pairs)
    fd_acc = fd_gradients(m, d, ctx, acc, pairs=pairs)
    for i in range(M):
        assert rel_err(grad_capacity_u(m, ctx, i, surrogate), fd_cap["U"][:, i]) < 1e-5 or np.abs(fd_cap["U"][:, i]).max() < 1e-9
        assert rel_err(grad_capacity_x(m, ctx, i, surrogate), fd_cap["X"][:, i]) < 1e-5 or np.abs(fd_cap["X"][:, i]).max() < 1e-9
        assert rel_err(grad_accuracy(m, d, kind, "u", i, pairs), fd_acc["U"][:, i]) < 1e-5
    for j in range(N):
        assert rel_err(grad_capacity_v(m, ctx, j, surrogate), fd_cap["V"][:, j]) < 1e-5 or np.abs(fd_cap["V"][:, j]).max() < 1e-9
        assert rel_err(grad_accuracy(m, d, kind, "v", j, pairs), fd_acc["V"][:, j]) < 1e-5


def test_sparse_influence_gives_same_gradients(rng):
    d = random_signed(rng, 4, 6)
    m = random_model(rng, 4, 6, 2, L=3)
    ctx = random_context(rng, m)
    cfg = TrainConfig(alpha=0.4, lam=0.1, rank=2, geo=True)
    dense = objective_gradients(m, d, ctx, cfg)
    m2 = LatentModel(m.U, m.V, m.X, sp.csr_matrix(m.Y))
    sparse = objective_gradients(m2, d, ctx, cfg)
    for name in "UVX":
        np.testing.assert_allclose(sparse[name], dense[name], rtol=1e-13, atol=1e-15)


def test_adagrad_step_by_hand():
    state = AdagradState({"U": np.zeros(2)}, epsilon=1e-8)
    p = np.array([1.0, -1.0])
    state.step(p, np.array([3.0, 4.0]), "U")
    np.testing.assert_allclose(p, [1.0 - 3.0 / (1e-8 + 3.0), -1.0 - 4.0 / (1e-8 + 4.0)])
    state.step(p, np.array([4.0, 3.0]), "U")
    np.testing.assert_allclose(state.sums["U"], [25.0, 25.0])
    first = np.array([1.0 - 3.0 / (1e-8 + 3.0), -1.0 - 4.0 / (1e-8 + 4.0)])
    np.testing.assert_allclose(p, first - np.array([4.0, 3.0]) / (1e-8 + 5.0), rtol=1e-15)


def test_rank_one_matrix_is_recovered():
    d = RatingsDataset.from_triples([(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)], feedback_mode="raw-stars")
    model, trace = train(d, None, TrainConfig(alpha=0.0, lam=0.0, rank=1, seed=0))
    assert trace.breakdowns[-1].accuracy_term < 1e-4
    np.testing.assert_allclose(model.scores(), [[1, 2], [2, 4]], atol=1e-2)


def test_onlycap_ignores_rating_values(small_split):
    tr = small_split[2]
    ctx = ContextVectors(np.full(tr.num_users, 0.3), np.full(tr.num_items, 2.0))
    cfg = TrainConfig(alpha=1.0, rank=3, max_iters=30)
    flipped = tr.with_values(-tr.values, tr.feedback_mode)
    seen = {}

    def record(tag):
        seen[tag] = []
        return lambda it, model, ob: seen[tag].append(model.U.copy())

    train(tr, ctx, cfg, callback=record("a"))
    train(flipped, ctx, cfg, callback=record("b"))
    for a, b in zip(seen["a"], seen["b"]):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic(small_split):
    tr = small_split[2]
    ctx = ContextVectors(np.full(tr.num_users, 0.3), np.full(tr.num_items, 2.0))
    cfg = TrainConfig(alpha=0.5, rank=3, max_iters=40, seed=5)
    m1, t1 = train(tr, ctx, cfg)
    m2, t2 = train(tr, ctx, cfg)
    assert list(t1.rows()) == list(t2.rows())
    np.testing.assert_array_equal(m1.U, m2.U)


def test_objective_decreases_overall(small_split):
    tr = small_split[2]
    ctx = ContextVectors(np.full(tr.num_users, 0.3), np.full(tr.num_items, 2.0))
    for kind in ["square", "bpr"]:
        _, trace = train(tr, ctx, TrainConfig(alpha=0.3, rank=3, max_iters=60, accuracy=kind))
        assert trace.totals[-1] < trace.totals[0]


def test_exponential_overflow_aborts():
    M = 1500
    d = RatingsDataset.from_triples([(i, 0, 1.0) for i in range(M)], M, 2, feedback_mode="implicit01")
    ctx = ContextVectors(np.ones(M), np.full(2, 1e-3))
    with pytest.raises(TrainingError, match="exponential"):
        train(d, ctx, TrainConfig(alpha=0.5, rank=1, surrogate="exponential", init_scale=0.0001))


def test_exponential_gradients_are_clipped(small_split):
    tr = small_split[2]
    ctx = ContextVectors(np.ones(tr.num_users), np.full(tr.num_items, 1.0))
    _, trace = train(tr, ctx, TrainConfig(alpha=0.9, rank=2, surrogate="exponential", max_iters=5))
    assert trace.clipped > 0


def test_geo_requires_influence(small_split):
    with pytest.raises(ValueError):
        train(small_split[2], None, TrainConfig(alpha=0.0, geo=True))


def test_init_is_seeded_gaussian():
    cfg = TrainConfig(rank=4, seed=9)
    m = init_model(30, 40, cfg)
    g = np.random.default_rng(9)
    np.testing.assert_array_equal(m.U, g.normal(0, 0.1, (4, 30)))
    np.testing.assert_array_equal(m.V, g.normal(0, 0.1, (4, 40)))


def test_checkpoint_roundtrip(tmp_path, rng):
    m = random_model(rng, 3, 4, 2, L=5)
    m = LatentModel(m.U, m.V, m.X, sp.csr_matrix(m.Y))
    save_checkpoint(m, tmp_path / "m.ckpt", "ab" * 32)
    back, h = load_checkpoint(tmp_path / "m.ckpt")
    assert h == "ab" * 32
    for name in ["U", "V", "X"]:
        np.testing.assert_array_equal(getattr(back, name), getattr(m, name))
    np.testing.assert_array_equal(back.Y.toarray(), m.Y.toarray())
    (tmp_path / "bad.ckpt").write_bytes(b"garbage" * 20)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_trace_csv(tmp_path, small_split):
    _, trace = train_unconstrained(small_split[2], TrainConfig(rank=2, max_iters=3))
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,accuracy,capacity,regularization,total"
    assert len(lines) == 1 + 4


def reference_pmf(train_data, cfg, iters):
    """Straightforward per-vector PMF/BPR with Adagrad, for cross-checking ``train``."""
    rng = np.random.default_rng(cfg.seed)
    U = rng.normal(0, cfg.init_scale, (cfg.rank, train_data.num_users))
    V = rng.normal(0, cfg.init_scale, (cfg.rank, train_data.num_items))
    aU, aV = np.zeros_like(U), np.zeros_like(V)
    triples = list(zip(train_data.users.tolist(), train_data.items.tolist(), train_data.values.tolist()))
    pairs = list(zip(*[a.tolist() for a in bpr_pairs(train_data)]))

    def grads(which):
        G = np.zeros_like(U if which == "U" else V)
        if cfg.accuracy == "square":
            for i, j, r in triples:
                e = -2.0 * (r - U[:, i] @ V[:, j])
                if which == "U":
                    G[:, i] += e * V[:, j]
                else:
                    G[:, j] += e * U[:, i]
        else:
            for i, k, j in pairs:
                diff = U[:, i] @ (V[:, k] - V[:, j])
                w = -1.0 / (1.0 + np.exp(diff))
                if which == "U":
                    G[:, i] += w * (V[:, k] - V[:, j])
                else:
                    G[:, k] += w * U[:, i]
                    G[:, j] -= w * U[:, i]
        return G + 2 * cfg.lam * (U if which == "U" else V)

    totals = []
    for _ in range(iters):
        g = grads("U")
        aU += g * g
        U -= g / (cfg.adagrad_epsilon + np.sqrt(aU))
        g = grads("V")
        aV += g * g
        V -= g / (cfg.adagrad_epsilon + np.sqrt(aV))
        S = U.T @ V
        if cfg.accuracy == "square":
            acc = sum((r - S[i, j]) ** 2 for i, j, r in triples)
        else:
            acc = sum(np.log1p(np.exp(-(S[i, k] - S[i, j]))) for i, k, j in pairs)
        totals.append(acc + cfg.lam * ((U ** 2).sum() + (V ** 2).sum()))
    return np.array(totals)


@pytest.mark.parametrize("kind", ["square", "bpr"])
def test_unconstrained_matches_reference_loop(kind, small_split):
    tr = small_split[2]
    cfg = TrainConfig(alpha=0.0, lam=0.01, rank=3, accuracy=kind, max_iters=15, tol=1e-300, seed=2)
    _, trace = train_unconstrained(tr, cfg)
    ref = reference_pmf(tr, cfg, 15)
    np.testing.assert_allclose(trace.totals[1:], ref, rtol=1e-9)
