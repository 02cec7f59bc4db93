import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gedaes.model import ModelParams, init_params
from gedaes.training import (
    DEFAULT_GRID,
    AdadeltaState,
    EarlyStopping,
    NonFiniteGradientError,
    SweepRow,
    TrainConfig,
    TrainRecord,
    adadelta_update,
    best_gamma,
    evaluate_corpus,
    read_sweep,
    sweep_gamma,
    train,
    write_sweep,
)


def _single(value):
    """Parameters with every tensor a copy of a 1-element array, for optimizer arithmetic."""
    names = ModelParams.names()
    return ModelParams(**{n: np.array([value], dtype=float) for n in names})


def test_adadelta_first_step():
    params = _single(0.0)
    state = AdadeltaState.for_params(params)
    grads = {n: np.array([1.0]) for n in ModelParams.names()}
    adadelta_update(state, params, grads)
    # -sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g
    expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
    assert params.fwd_w[0] == pytest.approx(expected, rel=1e-12)
    assert params.fwd_w[0] == pytest.approx(-4.472e-3, abs=1e-6)
    assert state.acc_grad["fwd_w"][0] == pytest.approx(0.05)
    assert state.acc_update["fwd_w"][0] == pytest.approx(0.05 * expected ** 2)


def test_adadelta_zero_gradient_is_a_no_op():
    params = _single(2.0)
    state = AdadeltaState.for_params(params)
    adadelta_update(state, params, {n: np.array([0.0]) for n in ModelParams.names()})
    assert params.aes_b[0] == 2.0


def test_adadelta_steps_downhill_on_a_quadratic():
    params = _single(3.0)
    state = AdadeltaState.for_params(params)
    for _ in range(200):
        adadelta_update(state, params, {"aes_b": 2 * params.aes_b})
    assert 0.0 < params.aes_b[0] < 3.0
    assert params.fwd_w[0] == 3.0  # untouched without a gradient


def test_adadelta_rejects_non_finite_gradient_atomically():
    params = _single(1.0)
    state = AdadeltaState.for_params(params)
    grads = {n: np.array([1.0]) for n in ModelParams.names()}
    grads["aes_w"] = np.array([math.nan])
    with pytest.raises(NonFiniteGradientError, match="aes_w"):
        adadelta_update(state, params, grads)
    assert all(v[0] == 1.0 for _, v in params.items())
    assert all(v[0] == 0.0 for v in state.acc_grad.values())


def test_early_stopping_rules():
    stop = EarlyStopping(patience=2)
    assert stop.update(1, 0.3)
    assert not stop.update(2, 0.3)  # equal is not an improvement
    assert not stop.should_stop
    assert not stop.update(3, math.nan)
    assert stop.should_stop
    assert stop.best_epoch == 1


def _scripted(values):
    def evaluate_fn(params, epoch):
        v = values[min(epoch, len(values)) - 1]
        return {"f_half": v, "qwk": v, "spearman": v}

    return evaluate_fn


def test_scripted_plateau_stops_at_epoch_ten(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    snapshots = {}
    best, record = train(
        small_model,
        TrainConfig(batch_size=4, max_epochs=50),
        train_set,
        dev,
        vocab,
        evaluate_fn=_scripted([0.1, 0.2, 0.3] + [0.3] * 20),
        on_epoch=lambda epoch, p: snapshots.__setitem__(epoch, p.copy()),
    )
    assert len(record.epochs) == 10
    assert record.best_epoch == 3
    for name, value in best.items():
        assert np.array_equal(value, getattr(snapshots[3], name))
    assert not np.array_equal(best.fwd_w, snapshots[10].fwd_w)


def test_single_epoch_budget(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    _, record = train(small_model, TrainConfig(max_epochs=1), train_set, dev, vocab)
    assert len(record.epochs) == 1 and record.best_epoch == 1
    assert record.stop_reason == "max_epochs"


def test_training_is_deterministic(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    cfg = TrainConfig(max_epochs=2, seed=9)
    a, ra = train(small_model, cfg, train_set, dev, vocab)
    b, rb = train(small_model, cfg, train_set, dev, vocab)
    for (_, x), (_, y) in zip(a.items(), b.items()):
        assert np.array_equal(x, y)
    assert [e.train_loss for e in ra.epochs] == [e.train_loss for e in rb.epochs]


def test_training_reduces_loss(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    _, record = train(small_model, TrainConfig(max_epochs=15, patience=100, batch_size=4), train_set, dev, vocab)
    assert record.epochs[-1].train_loss < record.epochs[0].train_loss


def test_divergence_is_reported(small_corpus, small_model, monkeypatch):
    import gedaes.training as training

    train_set, dev, _, vocab = small_corpus
    real = training.loss_and_grads
    calls = {"n": 0}

    def poisoned(params, config, ids, essay):
        calls["n"] += 1
        loss, out, grads = real(params, config, ids, essay)
        if calls["n"] > len(train_set):  # second epoch onwards
            grads["fwd_w"] = np.full_like(grads["fwd_w"], math.inf)
        return loss, out, grads

    monkeypatch.setattr(training, "loss_and_grads", poisoned)
    best, record = train(small_model, TrainConfig(max_epochs=5), train_set, dev, vocab)
    assert record.stop_reason == "diverged"
    assert best.all_finite()
    assert record.best_epoch == 1


def test_selection_metric_follows_gamma(small_model):
    cfg = TrainConfig()
    assert cfg.metric_for(small_model) == "f_half"
    assert cfg.metric_for(replace(small_model, gamma_aes=1.0)) == "qwk"
    assert TrainConfig(selection_metric="qwk").metric_for(small_model) == "qwk"


def test_train_record_round_trip(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    _, record = train(small_model, TrainConfig(max_epochs=2), train_set, dev, vocab)
    again = TrainRecord.from_lines(record.to_lines())
    assert again.best_epoch == record.best_epoch
    assert again.stop_reason == record.stop_reason
    assert [e.epoch for e in again.epochs] == [1, 2]


def test_default_grid():
    assert DEFAULT_GRID == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@pytest.mark.parametrize("grid", [[1.0, 0.0], [0.5]])
def test_sweep_rows_follow_grid(small_corpus, small_model, grid, tmp_path):
    train_set, dev, test, vocab = small_corpus
    rows = sweep_gamma(small_model, TrainConfig(max_epochs=1), train_set, dev, vocab, grid=grid, test_essays=test)
    assert [r.gamma_aes for r in rows] == sorted(grid)
    assert all(not math.isnan(r.test_f_half) for r in rows)
    write_sweep(tmp_path / "s.txt", rows)
    assert read_sweep(tmp_path / "s.txt") == rows


def test_sweep_rejects_bad_grid(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    with pytest.raises(ValueError):
        sweep_gamma(small_model, TrainConfig(max_epochs=1), train_set, dev, vocab, grid=[1.5])


def test_read_sweep_validation(tmp_path):
    row = SweepRow(0.3, 0.5, 0.6, 0.7, 2, 9, "f_half")
    path = tmp_path / "s.txt"
    path.write_text(row.to_line() + "\n" + row.to_line() + "\n")
    with pytest.raises(ValueError, match="increasing"):
        read_sweep(path)
    path.write_text("gamma_aes=0.1 dev_qwk=0.4\n")
    with pytest.raises(ValueError, match="missing"):
        read_sweep(path)


def test_best_gamma_ignores_nan():
    rows = [
        SweepRow(0.0, 0.2, math.nan, 0.0, 1, 1, "f_half"),
        SweepRow(0.5, 0.4, 0.7, 0.0, 1, 1, "f_half"),
        SweepRow(1.0, 0.1, 0.6, 0.0, 1, 1, "qwk"),
    ]
    assert best_gamma(rows, "qwk") == 0.5
    assert best_gamma(rows, "f_half") == 0.5


def test_one_epoch_moves_parameters_off_init(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    snaps = {}
    train(small_model, TrainConfig(max_epochs=1, seed=4), train_set, dev, vocab,
          on_epoch=lambda e, p: snaps.__setitem__(e, p.copy()))
    fresh = init_params(small_model, seed=4)
    assert not np.array_equal(fresh.fwd_w, snaps[1].fwd_w)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-1e3, 1e3)))
def test_adadelta_step_opposes_gradient(g):
    params = ModelParams(**{n: np.zeros(5) for n in ModelParams.names()})
    state = AdadeltaState.for_params(params)
    adadelta_update(state, params, {"fwd_w": g})
    nonzero = g != 0
    assert np.all(np.sign(params.fwd_w[nonzero]) == -np.sign(g[nonzero]))
    assert np.all(params.fwd_w[~nonzero] == 0)


def test_returned_checkpoint_scores_the_recorded_maximum(small_corpus, small_model):
    train_set, dev, _, vocab = small_corpus
    cfg = replace(small_model, gamma_aes=1.0)
    best, record = train(cfg, TrainConfig(max_epochs=6, patience=3, batch_size=4), train_set, dev, vocab)
    rep = evaluate_corpus(best, cfg, dev, vocab=vocab)
    values = record.selection_values()
    assert rep.qwk == pytest.approx(max(v for v in values if not math.isnan(v)), abs=1e-12)
    assert values[record.best_epoch - 1] == pytest.approx(rep.qwk, abs=1e-12)
