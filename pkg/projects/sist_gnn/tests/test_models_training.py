import numpy as np
import pytest

import tensor_autodiff as ad
from data_io import EventStream, SyntheticSpec, discretize_events, generate_synthetic
from errors import ConfigError, ShapeError
from graph_core import empty_snapshot
from models import LinkPredictionModel, NodeClassificationModel, static_features
from schema import MetricsWriter, read_records
from training import (
    AdamState, EarlyStopping, ProtocolConfig, adam_step, nc_split_sizes, run_fixed_split, run_live_update,
    run_protocol, summarize, train_snapshot,
)


def _lp_model(num_nodes=10, d_h=4, seed=0):
    return LinkPredictionModel.create(num_nodes, d_h=d_h, num_layers=2, dropout=0.1, seed=seed)


def _fast_cfg(**kw):
    base = dict(mode="fixed_split", epochs=1, eval_negatives=20, lr=0.01, record_timing=False)
    base.update(kw)
    return ProtocolConfig(**base)


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([[1.0, -2.0]])}
    state = AdamState.create(params, lr=0.1, weight_decay=0.01)
    adam_step(state, params, {"w": np.array([[0.5, -0.1]])})
    # 첫 스텝: m̂/√v̂ = sign(g), 감쇠는 갱신 전 θ 기준
    assert params["w"] == pytest.approx(np.array([[1.0 - 0.1 - 0.001, -2.0 + 0.1 + 0.002]]), rel=1e-6)
    assert state.step == 1


def test_adam_missing_gradient_is_zero_and_unknown_is_rejected():
    params = {"a": np.ones((1, 2)), "b": np.ones((2, 2))}
    state = AdamState.create(params, lr=0.1, weight_decay=0.0)
    adam_step(state, params, {"a": np.ones((1, 2))})
    assert np.array_equal(params["b"], np.ones((2, 2)))
    with pytest.raises(ShapeError):
        adam_step(state, params, {"c": np.ones((1, 1))})
    with pytest.raises(ShapeError):
        adam_step(state, params, {"a": np.ones((2, 1))})


def test_protocol_config_normalizes_and_validates():
    assert ProtocolConfig(mode="live-update").mode == "live_update"
    with pytest.raises(ConfigError):
        ProtocolConfig(mode="rolling")
    with pytest.raises(ConfigError):
        ProtocolConfig(patience=0)
    with pytest.raises(ConfigError):
        ProtocolConfig(nc_fractions=(0.7, 0.2, 0.2))
    with pytest.raises(ConfigError):
        ProtocolConfig(train_fraction=0.0)


def test_early_stopping_counts_non_improving_epochs():
    stopper = EarlyStopping(patience=3)
    decisions = [stopper.update(e, s) for e, s in enumerate([0.5, 0.6, None, 0.55, 0.58, 0.59], start=1)]
    assert decisions == [False, False, False, False, False, True]
    assert (stopper.best_epoch, stopper.best_score) == (2, 0.6)


def test_nc_split_sizes():
    assert nc_split_sizes(121, (0.7, 0.15, 0.15)) == (84, 18, 19)
    assert nc_split_sizes(11, (0.7, 0.15, 0.15)) == (7, 1, 3)


def test_train_snapshot_skips_empty_targets(synthetic_sequence):
    model = _lp_model()
    before = model.checksum()
    opt = AdamState.create(model.parameters())
    loss, states = train_snapshot(model, synthetic_sequence[0], model.initial_states(), opt,
                                  np.random.default_rng(0), target=empty_snapshot(10))
    assert loss is None
    assert model.checksum() == before
    assert len(states) == 2


def test_train_snapshot_updates_parameters(synthetic_sequence):
    model = _lp_model()
    before = model.checksum()
    opt = AdamState.create(model.parameters(), lr=0.01)
    loss, _ = train_snapshot(model, synthetic_sequence[0], model.initial_states(), opt,
                             np.random.default_rng(0), target=synthetic_sequence[1])
    assert loss is not None and loss >= 0.0
    assert model.checksum() != before
    assert opt.step == 1


def test_fixed_split_needs_ten_snapshots(synthetic_sequence):
    short = synthetic_sequence.with_snapshots(synthetic_sequence.snapshots[:9])
    with pytest.raises(ConfigError):
        run_fixed_split(_lp_model(), short, _fast_cfg())


def test_fixed_split_evaluates_held_out_tail(synthetic_sequence):
    records = run_fixed_split(_lp_model(), synthetic_sequence, _fast_cfg())
    evals = [r for r in records if r.record == "snapshot"]
    assert [r.snapshot for r in evals] == [10, 11]
    assert all(0.0 < r.mrr <= 1.0 for r in evals)
    assert [r.split for r in records if r.record == "epoch"] == ["train"]


def test_live_update_predicts_before_training(synthetic_sequence):
    seq = synthetic_sequence.with_snapshots(synthetic_sequence.snapshots[:4])
    trace = []
    records = run_live_update(_lp_model(), seq, _fast_cfg(mode="live_update", inner_epochs=2), trace=trace)
    assert trace == [("eval", 1), ("train", 1), ("train", 1),
                     ("eval", 2), ("train", 2), ("train", 2),
                     ("eval", 3), ("train", 3), ("train", 3)]
    assert [r.snapshot for r in records] == [1, 2, 3]


def test_live_update_without_inner_epochs_keeps_parameters(synthetic_sequence):
    model = _lp_model()
    before = model.checksum()
    records = run_live_update(model, synthetic_sequence, _fast_cfg(mode="live_update", inner_epochs=0))
    assert model.checksum() == before
    assert len(records) == len(synthetic_sequence) - 1
    assert all(r.loss is None for r in records)


def test_runs_are_deterministic(synthetic_sequence):
    a, b = _lp_model(seed=5), _lp_model(seed=5)
    ra = run_fixed_split(a, synthetic_sequence, _fast_cfg(seed=9))
    rb = run_fixed_split(b, synthetic_sequence, _fast_cfg(seed=9))
    assert [r.mrr for r in ra] == [r.mrr for r in rb]
    assert a.checksum() == b.checksum()


def test_run_protocol_checks_model_task(synthetic_sequence, rng):
    with pytest.raises(ConfigError):
        run_protocol(_lp_model(), synthetic_sequence, _fast_cfg(mode="nc_split"))
    nc = NodeClassificationModel.create(10, edge_dim=0, d_h=4)
    with pytest.raises(ConfigError):
        run_protocol(nc, synthetic_sequence, _fast_cfg())


def test_summary_and_writer(tmp_path, synthetic_sequence):
    model = _lp_model()
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path) as writer:
        records = run_protocol(model, synthetic_sequence, _fast_cfg(), writer)
        summary = summarize(records, "fixed_split", "lp", model)
        writer.write(summary)
    rows = read_records(path)
    assert len(rows) == len(records) + 1
    assert rows[-1]["record"] == "summary"
    assert summary.snapshots_evaluated == 2 and summary.epochs_run == 1
    assert summary.mean_mrr == pytest.approx(np.mean([r.mrr for r in records if r.record == "snapshot"]))
    assert summary.checksum == model.checksum()


def test_restore_params_and_checksum():
    model = _lp_model()
    snap = model.snapshot_params()
    original = model.checksum()
    model.parameters()["encoder.P"][0, 0] += 1.0
    assert model.checksum() != original
    model.restore_params(snap)
    assert model.checksum() == original
    with pytest.raises(ShapeError):
        model.restore_params({"encoder.P": np.zeros((1, 1))})


def test_static_features_mark_roles():
    F = static_features(4, np.array([0, 0, 1, 1]))
    assert F.tolist() == [[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]
    assert static_features(3).shape == (3, 1)
    with pytest.raises(ShapeError):
        static_features(3, np.array([0, 1]))


def _nc_sequence(rng):
    n_events, users, items = 300, 12, 5
    stream = EventStream(
        src=rng.integers(0, users, size=n_events),
        dst=users + rng.integers(0, items, size=n_events),
        timestamps=np.sort(rng.uniform(0, 12 * 3600.0, size=n_events)),
        labels=(rng.random(n_events) < 0.3).astype(np.int64),
        edge_features=rng.normal(size=(n_events, 2)),
        num_users=users,
        num_items=items,
    )
    return discretize_events(stream, 1.0)


def test_node_classification_split_run(rng):
    seq = _nc_sequence(rng)
    assert len(seq) == 12
    model = NodeClassificationModel.create(seq.num_nodes, edge_dim=seq.edge_dim, d_h=4, roles=seq.roles,
                                           weighting="balanced")
    cfg = ProtocolConfig(mode="nc_split", epochs=2, patience=1, lr=0.01, record_timing=False)
    records = run_protocol(model, seq, cfg)
    tests = [r for r in records if r.record == "snapshot"]
    assert [r.snapshot for r in tests] == [9, 10, 11]
    assert all(r.split == "test" for r in tests)
    assert records[-1].record == "epoch" and records[-1].split == "test"
    vals = [r for r in records if r.record == "epoch" and r.split == "val"]
    assert 1 <= len(vals) <= 2
    summary = summarize(records, "nc_split", "nc", model)
    assert summary.test_auc == records[-1].auc
    assert summary.epochs_run == len(vals)


@pytest.mark.slow
def test_periodic_pattern_is_learned():
    seq = generate_synthetic(SyntheticSpec(num_nodes=20, period=2, edges_per_snapshot=20, num_snapshots=40, seed=1))
    model = LinkPredictionModel.create(20, d_h=16, seed=1)
    records = run_fixed_split(model, seq, ProtocolConfig(epochs=30, eval_negatives=100, lr=0.01, record_timing=False))
    summary = summarize(records, "fixed_split", "lp", model)
    assert summary.mean_mrr > 0.2


def test_live_update_metrics_ignore_future_snapshots(synthetic_sequence):
    cut = 5
    noise = generate_synthetic(SyntheticSpec(num_nodes=10, period=3, edges_per_snapshot=15, num_snapshots=12, seed=99))
    altered = synthetic_sequence.with_snapshots(
        list(synthetic_sequence.snapshots[:cut + 1]) + list(noise.snapshots[cut + 1:])
    )
    cfg = _fast_cfg(mode="live_update", inner_epochs=2)
    base = run_live_update(_lp_model(seed=4), synthetic_sequence, cfg)
    other = run_live_update(_lp_model(seed=4), altered, cfg)
    upto = [(r.snapshot, r.mrr, r.loss) for r in base if r.snapshot <= cut]
    assert upto == [(r.snapshot, r.mrr, r.loss) for r in other if r.snapshot <= cut]
    assert len(upto) == cut
    assert [r.mrr for r in base if r.snapshot > cut] != [r.mrr for r in other if r.snapshot > cut]


def test_tape_size_does_not_grow_with_history():
    seq = generate_synthetic(SyntheticSpec(num_nodes=10, period=2, edges_per_snapshot=12, num_snapshots=40, seed=3))
    model = _lp_model()
    opt = AdamState.create(model.parameters(), lr=0.01)
    tape = ad.Tape()
    states = model.initial_states()
    sizes = []
    for t in range(len(seq) - 1):
        _, states = train_snapshot(model, seq[t], states, opt, np.random.default_rng(t), target=seq[t + 1], tape=tape)
        sizes.append(len(tape))
    assert len(set(sizes)) == 1
    assert sizes[0] > 0
