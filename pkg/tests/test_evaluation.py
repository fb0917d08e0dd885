import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refinerec import oracles
from refinerec.backbone import ModelConfig, SeqRecModel
from refinerec.data import SequenceDataset, leave_one_out_split
from refinerec.errors import ConfigError, ContractError
from refinerec.evaluation import (MetricsReport, PopularityModel, evaluate, format_table,
                                  metrics_at, parse_mode, rank_target)


# -- ranks and metrics -------------------------------------------------------

def test_rank_unique_max_is_one():
    assert rank_target(np.array([0.1, 0.9, 0.3]), 1) == 1


def test_rank_ties_are_pessimistic():
    assert rank_target(np.array([0.9, 0.9, 0.3]), 0) == 2
    assert rank_target(np.array([0.9, 0.9, 0.3]), 1) == 2


def test_rank_rejects_unknown_target():
    with pytest.raises(ContractError):
        rank_target(np.zeros(3), 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=20), st.data())
def test_rank_matches_sort_oracle(scores, data):
    target = data.draw(st.integers(0, len(scores) - 1))
    assert rank_target(np.array(scores, float), target) == oracles.rank_by_sort(scores, target)


def test_metrics_examples():
    assert metrics_at([1, 1, 1], 5) == (1.0, 1.0)
    r, n = metrics_at([2], 5)
    assert r == 1.0 and abs(n - 1 / math.log2(3)) < 1e-15 and abs(n - 0.6309) < 1e-4
    assert metrics_at([1, 3, 10], 5) == (2 / 3, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=50), st.integers(1, 30))
def test_metrics_properties(ranks, N):
    r, n = metrics_at(ranks, N)
    assert 0 <= n <= r <= 1
    assert (r, n) == pytest.approx(oracles.metrics(ranks, N), abs=1e-12)
    r1, n1 = metrics_at(ranks, 1)
    assert r1 == n1
    r2, n2 = metrics_at(ranks, N + 1)
    assert r2 >= r and n2 >= n


def test_metrics_validation():
    with pytest.raises(ConfigError):
        metrics_at([1], 0)
    with pytest.raises(ContractError):
        metrics_at([0], 5)


@pytest.mark.parametrize("text,parsed", [("full", ("full", 0)), ("sampled:100", ("sampled", 100)),
                                         (("sampled", 5), ("sampled", 5))])
def test_parse_mode(text, parsed):
    assert parse_mode(text) == parsed


@pytest.mark.parametrize("bad", ["partial", "sampled:0", "sampled:x"])
def test_parse_mode_rejects(bad):
    with pytest.raises((ConfigError, ValueError)):
        parse_mode(bad)


# -- evaluate ----------------------------------------------------------------

def _split(num_users=400, num_items=100, length=8, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [list(rng.choice(np.arange(1, num_items + 1), size=length, replace=False)) for _ in range(num_users)]
    ds = SequenceDataset([f"u{k}" for k in range(num_users)], [f"i{k}" for k in range(num_items)], seqs, 10)
    return leave_one_out_split(ds)


class OracleModel:
    def __init__(self, split, target):
        self.targets = np.array(split.test_target if target == "test" else split.valid_target)
        self.V = split.num_items
        self.row = 0

    def score_histories(self, inputs):
        out = np.zeros((len(inputs), self.V + 1))
        out[np.arange(len(inputs)), self.targets[self.row:self.row + len(inputs)]] = 1.0
        self.row += len(inputs)
        return out


class RandomModel:
    def __init__(self, V, seed):
        self.V, self.rng = V, np.random.default_rng(seed)

    def score_histories(self, inputs):
        return self.rng.random((len(inputs), self.V + 1))


@pytest.mark.parametrize("target", ["valid", "test"])
def test_oracle_model_has_perfect_recall(target):
    sp = _split()
    rep = evaluate(OracleModel(sp, target), sp, target, Ns=(1,))
    assert rep.recall[1] == 1.0 and rep.ndcg[1] == 1.0


def test_random_model_recall_at_one_is_one_over_vocabulary():
    sp = _split(num_users=4000, num_items=100, length=3)
    rep = evaluate(RandomModel(100, 0), sp, "test", Ns=(1,))
    # two history items are excluded, so each user ranks among 98 candidates
    assert abs(rep.recall[1] - 0.01) <= 0.005


def test_history_items_are_excluded_but_target_is_not():
    ds = SequenceDataset(["u"], [f"i{k}" for k in range(5)], [[1, 2, 1, 3]], 4)
    sp = leave_one_out_split(ds)   # train [1, 2], valid 1, test 3

    class Fixed:
        def score_histories(self, inputs):
            return np.array([[0.0, 9.0, 8.0, 1.0, 7.0, 0.5]])

    test = evaluate(Fixed(), sp, "test", Ns=(1, 2), keep_ranks=True)
    assert test.ranks.tolist() == [2]   # items 1 and 2 are history; 4 beats 3
    valid = evaluate(Fixed(), sp, "valid", Ns=(1,), keep_ranks=True)
    assert valid.ranks.tolist() == [1]  # target 1 is in the history yet still ranked


def test_sampled_mode_uses_k_negatives():
    sp = _split(num_users=50)
    rep = evaluate(RandomModel(100, 1), sp, "test", Ns=(1, 200), ranking_mode="sampled:20", keep_ranks=True)
    assert rep.ranks.max() <= 21 and rep.recall[200] == 1.0
    assert rep.ranking_mode == "sampled(20)"


def test_sampled_and_full_agree_on_model_ordering():
    from refinerec.bench import synthetic_split
    from refinerec.train import TrainConfig, fit
    sp = synthetic_split(0, 10, num_users=300, num_items=60, seq_len=15)
    trained = fit(ModelConfig(d=16, n=10, layers=1, learning_rate=5e-3), sp,
                  TrainConfig(batch_size=64, max_epochs=8, patience=8)).model
    pop = PopularityModel(sp)
    for mode in ("full", "sampled:100"):
        a = evaluate(trained, sp, "test", (5,), mode).ndcg[5]
        b = evaluate(pop, sp, "test", (5,), mode).ndcg[5]
        assert a > b, mode


def test_evaluate_does_not_mutate_parameters():
    sp = _split(num_users=30, num_items=40)
    model = SeqRecModel(ModelConfig(mechanism="simp", d=8, n=10), 40)
    before = model.state_dict()
    evaluate(model, sp, "test")
    evaluate(model, sp, "valid", ranking_mode="sampled:10")
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(p.grad is None for p in model.parameters())


def test_evaluate_is_deterministic_with_seed():
    sp = _split(num_users=50)
    model = SeqRecModel(ModelConfig(d=8, n=10), 100)
    a = evaluate(model, sp, "test", ranking_mode="sampled:10", seed=4).to_dict()
    b = evaluate(model, sp, "test", ranking_mode="sampled:10", seed=4).to_dict()
    assert a == b


def test_bad_score_shape_is_a_contract_error():
    class Broken:
        def score_histories(self, inputs):
            return np.zeros((len(inputs), 3))

    with pytest.raises(ContractError):
        evaluate(Broken(), _split(num_users=5), "test")


def test_report_round_trip_and_table():
    rep = MetricsReport({5: 0.5, 10: 0.75}, {5: 0.25, 10: 0.3}, 4, "full")
    assert MetricsReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()
    table = format_table({"base": rep}, (5, 10)).splitlines()
    assert table[0].split() == ["model", "Re@5", "Re@10", "Nd@5", "Nd@10"]
    assert table[1].split() == ["base", "0.5000", "0.7500", "0.2500", "0.3000"]


def test_popularity_model_ranks_frequent_items_first():
    ds = SequenceDataset(["a", "b"], ["x", "y", "z"], [[1, 1, 2, 3, 3], [1, 2, 1, 3, 3]], 5)
    sp = leave_one_out_split(ds)
    scores = PopularityModel(sp).score_histories(np.zeros((1, 5), int))
    assert scores[0].tolist() == [0.0, 4.0, 2.0, 0.0]
