import numpy as np
import pytest

import tensor_autodiff as ad
from errors import ConfigError, DataFormatError, DomainError, ShapeError
from graph_core import EdgeTypeGates, random_snapshot
from nn_layers import (
    BACKBONES, BackboneParams, LSTMCellParams, LayerState, bind, encoder_forward, init_encoder, init_layer,
    initial_states, load_checkpoint, lstm_step, save_checkpoint, sist_layer_forward,
)


@pytest.mark.parametrize("kind", BACKBONES)
def test_zero_input_and_state_stay_zero(rng, kind):
    layer = init_layer(rng, 3, 4, kind)
    g = random_snapshot(rng, 5, 8)
    Z, state = sist_layer_forward(layer, np.zeros((5, 3)), g, LayerState.zeros(5, 4), EdgeTypeGates())
    assert np.allclose(Z.values, 0.0)
    assert np.allclose(ad.as_array(state.H), 0.0)
    assert np.allclose(ad.as_array(state.C), 0.0)


@pytest.mark.parametrize("kind", BACKBONES)
def test_layer_output_shapes(rng, kind):
    layer = init_layer(rng, 3, 6, kind)
    g = random_snapshot(rng, 7, 15)
    state = LayerState(rng.normal(size=(7, 6)), rng.normal(size=(7, 6)))
    Z, new = sist_layer_forward(layer, rng.normal(size=(7, 3)), g, state, EdgeTypeGates())
    assert Z.shape == (7, 6)
    assert ad.as_array(new.H).shape == (7, 6)
    assert ad.as_array(new.C).shape == (7, 6)


def test_forget_gate_bias_starts_at_one(rng):
    b = init_layer(rng, 2, 3).lstm.b
    assert b[0, 3:6].tolist() == [1.0, 1.0, 1.0]
    assert np.count_nonzero(b) == 3


@pytest.mark.parametrize("kind", ["gcn_mean", "gat_single_head"])
def test_all_gates_closed_leaves_self_transform(rng, kind):
    layer = init_layer(rng, 3, 4, kind)
    layer.backbone.bias[:] = rng.normal(size=(1, 4))
    X = rng.normal(size=(6, 3))
    g = random_snapshot(rng, 6, 10)
    state = LayerState(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    Z, _ = sist_layer_forward(layer, X, g, state, EdgeTypeGates(0.0, 0.0, 0.0))
    expected = np.maximum(X @ layer.W_p @ layer.backbone.W_self + layer.backbone.bias, 0.0)
    assert Z.values == pytest.approx(expected, abs=1e-12)


def test_sage_rows_are_unit_length(rng):
    layer = init_layer(rng, 3, 4, "sage", sigma="identity")
    g = random_snapshot(rng, 6, 12)
    state = LayerState(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    Z, _ = sist_layer_forward(layer, rng.normal(size=(6, 3)), g, state, EdgeTypeGates())
    assert np.linalg.norm(Z.values, axis=1) == pytest.approx(np.ones(6))


def test_gat_rejects_negative_gate(rng):
    layer = init_layer(rng, 2, 2, "gat_single_head")
    g = random_snapshot(rng, 4, 5)
    with pytest.raises(DomainError):
        sist_layer_forward(layer, np.ones((4, 2)), g, LayerState.zeros(4, 2), EdgeTypeGates(-1.0, 1.0, 1.0))


def test_lstm_step_checks_shapes(rng):
    cell = init_layer(rng, 3, 4).lstm
    with pytest.raises(ShapeError):
        lstm_step(cell, np.zeros((5, 2)), LayerState.zeros(5, 4))
    with pytest.raises(ShapeError):
        lstm_step(cell, np.zeros((5, 3)), LayerState.zeros(4, 4))


def test_layer_rejects_row_count_mismatch(rng):
    layer = init_layer(rng, 3, 4)
    with pytest.raises(ShapeError):
        sist_layer_forward(layer, np.zeros((4, 3)), random_snapshot(rng, 5, 3), LayerState.zeros(5, 4),
                           EdgeTypeGates())


def test_encoder_configuration_errors(rng):
    with pytest.raises(ConfigError):
        init_encoder(rng, 5, 4, num_layers=0)
    with pytest.raises(ConfigError):
        init_encoder(rng, 5, 4, dropout_rate=1.0)
    with pytest.raises(ConfigError):
        init_encoder(rng, 5, 4, num_layers=2, gates=[EdgeTypeGates()])
    with pytest.raises(ConfigError):
        init_layer(rng, 2, 2, "gin")
    with pytest.raises(ConfigError):
        init_layer(rng, 2, 2, sigma="tanh")
    with pytest.raises(ConfigError):
        BackboneParams("gat_single_head", np.eye(2), np.eye(2), np.zeros((1, 2)))

    enc = init_encoder(rng, 5, 4)
    g = random_snapshot(rng, 5, 6)
    states = initial_states(enc)
    with pytest.raises(ConfigError):
        encoder_forward(enc, g, states[:1])
    with pytest.raises(ConfigError):
        encoder_forward(enc, g, states, mode="predict")
    with pytest.raises(ConfigError):
        encoder_forward(enc, g, states, mode="train")


def test_encoder_last_layer_is_linear(rng):
    enc = init_encoder(rng, 5, 4, num_layers=3)
    assert [layer.sigma for layer in enc.layers] == ["relu", "relu", "identity"]
    assert enc.num_nodes == 5 and enc.hidden_dim == 4


def test_eval_forward_is_deterministic(rng):
    enc = init_encoder(rng, 6, 4, dropout_rate=0.5)
    g = random_snapshot(rng, 6, 9)
    Z1, s1 = encoder_forward(enc, g, initial_states(enc), "eval")
    Z2, s2 = encoder_forward(enc, g, initial_states(enc), "eval")
    assert np.array_equal(Z1.values, Z2.values)
    assert len(s1) == len(s2) == 2


def test_param_names_and_bind(rng):
    enc = init_encoder(rng, 5, 4, num_layers=2, kind="gcn_mean")
    names = enc.named()
    assert len(names) == 15
    assert {"P", "layers.0.lstm.W_ih", "layers.1.backbone.W_msg", "layers.1.W_p"} <= set(names)
    assert "layers.0.backbone.att" not in names
    assert len(init_encoder(rng, 5, 4, kind="gat_single_head").named()) == 17

    tape = ad.Tape()
    bound = bind(enc, tape)
    assert tape.num_parameters == 15
    Z, _ = encoder_forward(bound, random_snapshot(rng, 5, 7), initial_states(enc), "eval")
    grads = tape.named_grads(tape.backward(ad.sum_all(Z)))
    assert set(grads) == set(names)
    assert np.any(grads["P"] != 0)


def test_checkpoint_round_trip(tmp_path, rng):
    named = init_encoder(rng, 3, 2, num_layers=1).named()
    path = save_checkpoint(tmp_path / "model.sistckp", named)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(named)
    for k, v in named.items():
        assert np.array_equal(loaded[k], v)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path, rng):
    bad = tmp_path / "bad.sistckp"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 8)
    with pytest.raises(DataFormatError):
        load_checkpoint(bad)

    good = save_checkpoint(tmp_path / "good.sistckp", {"W": rng.normal(size=(3, 3))})
    cut = tmp_path / "cut.sistckp"
    cut.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(DataFormatError):
        load_checkpoint(cut)


def test_saturated_gates_preserve_cell_state(rng):
    d_in, d_h, n = 3, 4, 6
    cell = init_layer(rng, d_in, d_h).lstm
    b = np.zeros((1, 4 * d_h))
    b[0, :d_h] = -20.0
    b[0, d_h:2 * d_h] = 20.0
    cell = LSTMCellParams(W_ih=0.1 * cell.W_ih, W_hh=0.1 * cell.W_hh, b=b)
    C0 = rng.normal(size=(n, d_h))
    state = LayerState(rng.normal(size=(n, d_h)), C0)
    for _ in range(20):
        state = lstm_step(cell, rng.normal(size=(n, d_in)), state)
    assert np.max(np.abs(ad.as_array(state.C) - C0)) <= 1e-6
