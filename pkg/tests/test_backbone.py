import numpy as np
import pytest

from refinerec import oracles
from refinerec import tensor as T
from refinerec.backbone import (ModelConfig, SeqRecModel, attention_masks, dot_attention_scores,
                                stochastic_attention_scores)
from refinerec.bench import COMBOS, tiny_model
from refinerec.errors import ConfigError, ContractError
from refinerec.gaussian import pairwise_wasserstein2, wasserstein2_diag
from refinerec.refine import aggregate_values
from refinerec.tensor import Tensor


# -- config ------------------------------------------------------------------

def test_config_round_trip_and_unknown_keys():
    cfg = ModelConfig(mechanism="add", d=16, heads=4, n=10)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"dim": 3})


@pytest.mark.parametrize("bad", [
    {"d": 10, "heads": 3}, {"mechanism": "stoc"}, {"backbone": "rnn"}, {"mechanism": "twice"},
    {"dropout": 1.0}, {"n": 1}, {"layers": 0}, {"refine_scale": "sqrt_k"}, {"init_scheme": "he"},
])
def test_config_rejects_invalid_values(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


# -- scores ------------------------------------------------------------------

def test_dot_scores_orthonormal_identity():
    H = np.eye(4)
    A = dot_attention_scores(Tensor(H), Tensor(np.eye(4)), Tensor(np.eye(4))).data
    assert np.array_equal(A, np.eye(4) / 2)


@pytest.mark.parametrize("seed", range(5))
def test_dot_scores_match_triple_loop(seed):
    rng = np.random.default_rng(seed)
    H, WQ, WK = rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    A = dot_attention_scores(Tensor(H), Tensor(WQ), Tensor(WK)).data
    assert np.max(np.abs(A - np.array(oracles.dot_scores(H, WQ, WK)))) <= 1e-12


def test_dot_scores_are_bilinear_in_H():
    rng = np.random.default_rng(1)
    H, WQ, WK = rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    A = dot_attention_scores(Tensor(H), Tensor(WQ), Tensor(WK)).data
    A3 = dot_attention_scores(Tensor(3 * H), Tensor(WQ), Tensor(WK)).data
    assert np.allclose(A3, 9 * A, rtol=1e-13, atol=1e-13)


def test_w2_closed_form_examples():
    assert wasserstein2_diag(np.zeros(1), np.ones(1), np.ones(1), np.ones(1)).item() == 1.0
    x = np.array([0.3, -1.0])
    v = np.array([0.5, 2.0])
    assert wasserstein2_diag(x, v, x, v).item() == 0.0


def test_w2_rejects_non_positive_variance():
    with pytest.raises(ContractError):
        wasserstein2_diag(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2), np.ones(2))


def test_w2_triangle_inequality_and_symmetry():
    rng = np.random.default_rng(2)
    trials, d = 10_000, 3
    mu = rng.normal(size=(3, trials, d)) * rng.uniform(0.1, 5)
    var = rng.uniform(1e-3, 4.0, size=(3, trials, d))
    xy = wasserstein2_diag(mu[0], var[0], mu[1], var[1]).data
    yz = wasserstein2_diag(mu[1], var[1], mu[2], var[2]).data
    xz = wasserstein2_diag(mu[0], var[0], mu[2], var[2]).data
    yx = wasserstein2_diag(mu[1], var[1], mu[0], var[0]).data
    assert np.all(xz <= xy + yz + 1e-12)
    assert np.array_equal(xy, yx)
    assert np.all(xy >= 0)


def test_pairwise_w2_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    ma, mb = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    va, vb = rng.uniform(0.2, 2, size=(3, 2)), rng.uniform(0.2, 2, size=(4, 2))
    got = pairwise_wasserstein2(Tensor(ma), Tensor(va), Tensor(mb), Tensor(vb)).data
    want = [[oracles.w2(ma[i], va[i], mb[j], vb[j]) for j in range(4)] for i in range(3)]
    assert np.max(np.abs(got - np.array(want))) <= 1e-12


def test_stochastic_scores_identical_positions_give_identical_rows():
    rng = np.random.default_rng(4)
    M = np.tile(rng.normal(size=(1, 2)), (3, 1))
    S = np.tile(rng.normal(size=(1, 2)), (3, 1))
    Ws = [Tensor(rng.normal(size=(2, 2))) for _ in range(4)]
    A = stochastic_attention_scores(Tensor(M), Tensor(S), *Ws).data
    assert np.all(A == A[0, 0])
    assert A[0, 0] < 0  # query and key projections differ


@pytest.mark.parametrize("seed", range(5))
def test_stochastic_scores_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    M, S = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    Ws = [rng.normal(size=(2, 2)) for _ in range(4)]
    A = stochastic_attention_scores(Tensor(M), Tensor(S), *map(Tensor, Ws)).data
    assert np.max(np.abs(A - np.array(oracles.stochastic_scores(M, S, *Ws)))) <= 1e-12


def test_aggregated_covariance_strictly_positive():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n, d = rng.integers(1, 6), rng.integers(1, 4)
        w = T.softmax_rows(Tensor(rng.normal(size=(n, n)) * 5), np.tril(np.ones((n, n), bool))).data
        var = T.elu_plus_one(Tensor(rng.normal(size=(n, d)) * 10)).data
        _, out_v = aggregate_values(Tensor(w), (Tensor(np.zeros((n, d))), Tensor(var)))
        assert np.all(out_v.data > 0)


# -- masks -------------------------------------------------------------------

def test_attention_masks():
    valid, allowed = attention_masks(np.array([[0, 2, 5]]))
    assert valid.tolist() == [[False, True, True]]
    assert allowed[0].tolist() == [[False, False, False], [False, True, False], [False, True, True]]


# -- encode ------------------------------------------------------------------

@pytest.mark.parametrize("backbone", ["dot_product", "stochastic"])
def test_encode_shapes(backbone):
    model = SeqRecModel(ModelConfig(backbone=backbone, d=8, n=6, heads=2, layers=2), 10)
    enc = model.encode(np.array([[0, 0, 1, 2, 3, 4], [1, 2, 3, 4, 5, 6]]), record=True)
    assert enc.states.shape == (2, 6, 8)
    assert (enc.cov is None) == (backbone == "dot_product")
    if enc.cov is not None:
        assert enc.cov.shape == (2, 6, 8) and np.all(enc.cov.data > 0)
    assert [(r.layer, r.head) for r in enc.records] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert enc.records[0].weights.shape == (2, 6, 6)


def test_encode_left_pads_short_input():
    model = SeqRecModel(ModelConfig(d=4, n=5, layers=1), 8)
    short = model.encode(np.array([3, 4])).states.data
    full = model.encode(np.array([0, 0, 0, 3, 4])).states.data
    assert np.array_equal(short, full)


def test_encode_rejects_bad_ids_and_lengths():
    model = SeqRecModel(ModelConfig(d=4, n=3, layers=1), 5)
    with pytest.raises(ContractError):
        model.encode(np.array([1, 2, 6]))
    with pytest.raises(ContractError):
        model.encode(np.array([1, 2, 3, 4]))


def test_pad_positions_output_zero():
    model = tiny_model("dot_product", "simp", d=4, n=5, num_items=12)
    states = model.encode(np.array([0, 0, 3, 1, 2])).states.data[0]
    assert np.all(states[:2] == 0)


@pytest.mark.parametrize("backbone,mechanism", COMBOS)
def test_encode_is_causal(backbone, mechanism):
    model = tiny_model(backbone, mechanism, d=4, n=6, num_items=10, seed=3)
    base = np.array([0, 4, 9, 2, 7, 1])
    ref = model.encode(base)
    for j in range(1, 6):
        changed = base.copy()
        changed[j] = changed[j] % 10 + 1
        other = model.encode(changed)
        assert np.array_equal(ref.states.data[0, :j], other.states.data[0, :j])
        assert not np.array_equal(ref.states.data[0, j:], other.states.data[0, j:])


def test_encode_deterministic_without_dropout():
    cfg = ModelConfig(mechanism="value", d=8, n=6, heads=2, dropout=0.0, seed=5)
    a, b = SeqRecModel(cfg, 9), SeqRecModel(cfg, 9)
    x = np.array([[0, 1, 2, 3, 4, 5]])
    assert np.array_equal(a.encode(x, training=True, rng=np.random.default_rng(0)).states.data,
                          b.encode(x, training=True, rng=np.random.default_rng(1)).states.data)


def test_training_dropout_depends_on_rng():
    model = SeqRecModel(ModelConfig(d=8, n=6, dropout=0.5), 9)
    x = np.array([[0, 1, 2, 3, 4, 5]])
    a = model.encode(x, training=True, rng=np.random.default_rng(0)).states.data
    b = model.encode(x, training=True, rng=np.random.default_rng(0)).states.data
    c = model.encode(x, training=True, rng=np.random.default_rng(1)).states.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# -- parameters --------------------------------------------------------------

def test_padding_row_is_zero_and_xavier_default():
    model = SeqRecModel(ModelConfig(d=8, n=6), 9)
    assert np.all(model.params["item_emb"].data[0] == 0)
    bound = np.sqrt(6 / 16)
    W = model.params["layer0.WQ"].data
    assert np.abs(W).max() <= bound and np.abs(W).max() > 0.02
    assert np.abs(model.params["pos_emb"].data).max() <= 0.02


def test_uniform_scheme_keeps_everything_small():
    model = SeqRecModel(ModelConfig(d=8, n=6, init_scheme="uniform", mechanism="simp"), 9)
    weights = [p for p in model.parameters() if not p.name.endswith(("_g", "_b"))]
    assert max(np.abs(p.data).max() for p in weights) <= 0.02


def test_state_dict_round_trip():
    a = SeqRecModel(ModelConfig(backbone="stochastic", mechanism="stoc", d=4, n=5, seed=1), 7)
    b = SeqRecModel(ModelConfig(backbone="stochastic", mechanism="stoc", d=4, n=5, seed=2), 7)
    b.load_state_dict(a.state_dict())
    x = np.array([[0, 1, 2, 3, 4]])
    assert np.array_equal(a.score_histories(x), b.score_histories(x))
    with pytest.raises(ContractError):
        b.load_state_dict({"item_mean": np.zeros((3, 3))})


# -- scoring -----------------------------------------------------------------

def test_dot_scoring_prefers_aligned_item():
    model = SeqRecModel(ModelConfig(d=4, n=3, layers=1), 3)
    e = np.array([1.0, -2.0, 0.5, 0.3])
    model.params["item_emb"].data[1] = e
    model.params["item_emb"].data[2] = -e
    enc = model.encode(np.array([[1, 2, 3]]))
    enc.states = Tensor(np.broadcast_to(e, (1, 3, 4)).copy())
    s = model.score_items(enc, np.array([[[1, 2]] * 3])).data
    assert np.all(s[..., 0] > s[..., 1])


def test_stochastic_scoring_is_zero_for_identical_distribution():
    model = SeqRecModel(ModelConfig(backbone="stochastic", d=4, n=3, layers=1), 5)
    enc = model.encode(np.array([[1, 2, 3]]))
    mu, var = model.item_distribution(np.array([4]))
    enc.states = Tensor(np.broadcast_to(mu.data, (1, 3, 4)).copy())
    enc.cov = Tensor(np.broadcast_to(var.data, (1, 3, 4)).copy())
    s = model.score_items(enc, np.array([[[4, 1, 2, 3, 5]]] * 1).repeat(3, axis=1)).data
    assert np.all(s[..., 0] == 0) and np.all(s[..., 1:] < 0)


@pytest.mark.parametrize("backbone", ["dot_product", "stochastic"])
def test_full_vocabulary_scoring_matches_per_item_loop(backbone):
    model = SeqRecModel(ModelConfig(backbone=backbone, d=8, n=6, seed=3), 50)
    rng = np.random.default_rng(0)
    hist = rng.integers(1, 51, size=(4, 6))
    hist[0, :3] = 0
    full = model.score_histories(hist)
    enc = model.encode(hist)
    for u in range(4):
        for item in range(51):
            if backbone == "dot_product":
                s = sum(enc.states.data[u, -1, j] * model.params["item_emb"].data[item, j] for j in range(8))
            else:
                mu, var = model.item_distribution(np.array([item]))
                s = -oracles.w2(enc.states.data[u, -1], enc.cov.data[u, -1], mu.data[0], var.data[0])
            assert abs(full[u, item] - s) <= 1e-12
