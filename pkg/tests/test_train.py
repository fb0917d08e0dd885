import json
import math

import numpy as np
import pytest

from refinerec.backbone import ModelConfig, SeqRecModel
from refinerec.bench import SMALL_MODEL, small_split, tiny_batch, tiny_model
from refinerec.checkpoint import load_checkpoint
from refinerec.errors import ConfigError, ContractError, NonFiniteError
from refinerec.gradcheck import check_gradients
from refinerec.tensor import Parameter, Tensor
from refinerec.train import Adam, TrainConfig, TrainState, bce_loss, fit, global_grad_norm


# -- loss --------------------------------------------------------------------

def test_bce_saturates_to_zero():
    loss = bce_loss(Tensor([[30.0]]), Tensor([[[-30.0]]]), np.array([[True]])).item()
    assert 0 <= loss < 1e-12


def test_bce_at_zero_scores_is_two_ln_two():
    loss = bce_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3, 1))), np.ones((2, 3), bool)).item()
    assert abs(loss - 2 * math.log(2)) <= 1e-15


def test_bce_ignores_masked_positions():
    mask = np.array([[False, True]])
    a = bce_loss(Tensor([[100.0, 0.0]]), Tensor([[[5.0], [0.0]]]), mask).item()
    assert abs(a - 2 * math.log(2)) <= 1e-15
    with pytest.raises(ContractError):
        bce_loss(Tensor([[0.0]]), Tensor([[[0.0]]]), np.array([[False]]))


def test_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    pos, neg = Parameter(rng.normal(size=(2, 3)), "pos"), Parameter(rng.normal(size=(2, 3, 2)), "neg")
    mask = np.array([[True, False, True], [True, True, True]])
    assert check_gradients(lambda: bce_loss(pos, neg, mask), [pos, neg]).worst <= 1e-6


# -- optimizer ---------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    w = Parameter(np.array([0.5]), "w")
    w.grad = np.array([1.0])
    Adam([w], lr=1e-3).step()
    assert abs((0.5 - w.data[0]) - 1e-3) < 1e-10


def test_adam_zero_gradient_is_no_op():
    w = Parameter(np.array([0.5, -2.0]), "w")
    w.grad = np.zeros(2)
    opt = Adam([w], lr=0.1)
    for _ in range(3):
        opt.step()
    assert w.data.tolist() == [0.5, -2.0]


def test_adam_l2_acts_as_penalty_gradient():
    w = Parameter(np.array([2.0]), "w")
    w.grad = np.zeros(1)
    Adam([w], lr=1e-2, l2_weight=0.1).step()
    assert abs(w.data[0] - (2.0 - 1e-2)) < 1e-9  # first step moves by lr in the sign of l2*w


def test_adam_converges_on_quadratic_bowl():
    target = np.array([1.5, -0.5, 3.0])
    scale = np.array([1.0, 10.0, 0.1])
    w = Parameter(np.zeros(3), "w")
    opt = Adam([w], lr=0.05)
    for _ in range(5000):
        w.zero_grad()
        (((w - Tensor(target)) * (w - Tensor(target))) * Tensor(scale)).sum().backward()
        opt.step()
    assert np.max(np.abs(w.data - target)) <= 1e-6


def test_adam_rejects_non_finite_gradients_by_name():
    w = Parameter(np.zeros(2), "layer0.WQ")
    w.grad = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteError, match="layer0.WQ"):
        Adam([w]).step()


def test_adam_rejects_duplicate_parameters():
    w = Parameter(np.zeros(1), "w")
    with pytest.raises(ContractError):
        Adam([w, w])


def test_global_grad_norm():
    a, b = Parameter(np.zeros(1), "a"), Parameter(np.zeros(1), "b")
    assert global_grad_norm([a, b]) == 0.0
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert global_grad_norm([a, b]) == 5.0
    rng = np.random.default_rng(0)
    ps = [Parameter(np.zeros(s), f"p{k}") for k, s in enumerate([(2, 3), (4,), (1, 1, 5)])]
    for p in ps:
        p.grad = rng.normal(size=p.shape)
    flat = [float(x) for p in ps for x in p.grad.ravel()]
    assert abs(global_grad_norm(ps) - math.sqrt(sum(x * x for x in flat))) <= 1e-12


# -- configs and state -------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(eval_mode="partial")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})


def test_train_state_strict_improvement():
    s = TrainState()
    s.epoch = 1
    assert s.update(0.2)
    s.epoch = 2
    assert not s.update(0.2)
    assert s.best_epoch == 1 and s.epochs_since_improvement == 1


# -- fit ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def split():
    return small_split()


def _fit(split, schedule, patience, **kw):
    scores = iter(schedule)
    snaps = {}
    model = SeqRecModel(ModelConfig(mechanism="simp", **SMALL_MODEL), split.num_items)
    res = fit(model, split, TrainConfig(batch_size=16, max_epochs=50, patience=patience),
              evaluator=lambda m: next(scores),
              on_epoch_end=lambda s: snaps.__setitem__(s.epoch, model.state_dict()), **kw)
    return res, snaps


def test_fit_stops_after_patience_and_returns_best_snapshot(split):
    res, snaps = _fit(split, [0.1, 0.1, 0.1], patience=2)
    assert res.state.epoch == 3 and res.state.best_epoch == 1
    final = res.model.state_dict()
    assert all(np.array_equal(final[k], snaps[1][k]) for k in final)
    assert not all(np.array_equal(final[k], snaps[3][k]) for k in final)


@pytest.mark.parametrize("schedule,patience,best,stop", [
    ([0.3, 0.2, 0.4, 0.4, 0.1], 2, 3, 5),
    ([0.0, 0.1, 0.2, 0.3, 0.2], 1, 4, 5),
])
def test_fit_patience_arithmetic(split, schedule, patience, best, stop):
    res, _ = _fit(split, schedule, patience)
    assert (res.state.best_epoch, res.state.epoch) == (best, stop)


def test_fit_respects_max_epochs(split):
    res = fit(ModelConfig(**SMALL_MODEL), split, TrainConfig(batch_size=16, max_epochs=2, patience=5),
              evaluator=lambda m: 0.5)
    assert res.state.epoch == 2


def test_training_loss_decreases_over_five_epochs():
    from refinerec.bench import synthetic_split
    sp = synthetic_split(0, 20, num_users=300, num_items=50, seq_len=25)
    cfg = ModelConfig(d=16, n=20, layers=1, dropout=0.2, learning_rate=3e-3)
    res = fit(cfg, sp, TrainConfig(batch_size=64, max_epochs=5, patience=10), evaluator=lambda m: 0.0)
    losses = [r["train_loss"] for r in res.state.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_fit_is_deterministic(split, tmp_path):
    logs = []
    for k in range(2):
        fit(ModelConfig(mechanism="value", seed=3, **SMALL_MODEL), split,
            TrainConfig(batch_size=16, max_epochs=3, patience=3), run_dir=tmp_path / str(k))
        logs.append([{a: b for a, b in json.loads(x).items() if a != "seconds"}
                     for x in (tmp_path / str(k) / "train_log.jsonl").read_text().splitlines()])
    assert logs[0] == logs[1] and len(logs[0]) == 3


def test_fit_writes_run_artifacts(split, tmp_path):
    res = fit(ModelConfig(**SMALL_MODEL), split, TrainConfig(batch_size=16, max_epochs=2, patience=2),
              run_dir=tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    assert set(json.loads(lines[0])) == {"epoch", "train_loss", "valid_ndcg5", "grad_norm", "seconds"}
    best, meta = load_checkpoint(tmp_path / "best.npz")
    assert meta["epoch"] == res.state.best_epoch
    assert all(np.array_equal(best.state_dict()[k], v) for k, v in res.model.state_dict().items())


def test_resume_after_interruption_is_bit_exact(split, tmp_path):
    cfg = ModelConfig(mechanism="add", seed=1, **SMALL_MODEL)
    tc = TrainConfig(batch_size=16, max_epochs=6, patience=6)
    full = fit(cfg, split, tc, run_dir=tmp_path / "full")

    class Interrupt(Exception):
        pass

    def stop_at_three(state):
        if state.epoch == 3:
            raise Interrupt

    with pytest.raises(Interrupt):
        fit(cfg, split, tc, run_dir=tmp_path / "cut", on_epoch_end=stop_at_three)
    resumed = fit(cfg, split, tc, run_dir=tmp_path / "cut", resume=True)

    def log(run):
        return [{a: b for a, b in json.loads(x).items() if a != "seconds"}
                for x in (tmp_path / run / "train_log.jsonl").read_text().splitlines()]

    assert log("full") == log("cut")
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_rejects_other_config(split, tmp_path):
    fit(ModelConfig(**SMALL_MODEL), split, TrainConfig(batch_size=16, max_epochs=1), run_dir=tmp_path)
    with pytest.raises(ConfigError):
        fit(ModelConfig(mechanism="simp", **SMALL_MODEL), split, TrainConfig(batch_size=16, max_epochs=2),
            run_dir=tmp_path, resume=True)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_gradient_aborts_with_parameter_name():
    model = tiny_model("dot_product", "simp")
    model.params["layer0.WQ"].data[0, 0] = np.nan
    inputs, pos, neg, mask = tiny_batch()
    enc = model.encode(inputs)
    loss = bce_loss(model.score_items(enc, pos), model.score_items(enc, neg), mask)
    loss.backward()
    with pytest.raises(NonFiniteError):
        Adam(model.parameters()).step()


def test_fit_rejects_vocabulary_mismatch(split):
    with pytest.raises(ConfigError):
        fit(SeqRecModel(ModelConfig(**SMALL_MODEL), split.num_items + 1), split)
