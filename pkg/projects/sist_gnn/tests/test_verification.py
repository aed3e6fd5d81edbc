import numpy as np
import pytest
from dataclasses import replace

from errors import ConfigError
from graph_core import EdgeTypeGates
from verification import (
    build_spatial_first_stack, build_temporal_first_layer, check_equivariance, check_gradients,
    check_message_diversity, check_spatial_first_reduction, check_strictness_witness, check_temporal_first_reduction,
    message_counts, path_graph, run_suite, witness_output,
)


def test_equivariance_holds_for_every_backbone():
    report = check_equivariance(trials=9, seed=2)
    assert report.passed, report.deviation
    assert report.trials == 9


def test_identity_permutation_has_zero_deviation():
    assert check_equivariance(trials=3, identity=True).deviation == 0.0


def test_index_dependent_layer_breaks_equivariance():
    report = check_equivariance(trials=5, mutate=True)
    assert not report.passed
    assert report.deviation > 1e-3


def test_spatial_first_reduction():
    report = check_spatial_first_reduction(T_steps=4)
    assert report.passed, report.deviation
    assert not check_spatial_first_reduction(T_steps=4, mutate=True).passed


def test_spatial_first_rejects_wrong_stack(rng):
    stack = build_spatial_first_stack(rng, 5, 3, 4)
    with pytest.raises(ConfigError):
        check_spatial_first_reduction(stack=replace(stack, gates=[EdgeTypeGates(), EdgeTypeGates(0.0, 0.0, 1.0)]))


def test_temporal_first_reduction():
    report = check_temporal_first_reduction(T_steps=4)
    assert report.passed, report.deviation
    assert not check_temporal_first_reduction(T_steps=4, mutate=True).passed


def test_temporal_first_rejects_wrong_configuration(rng):
    layer = build_temporal_first_layer(rng, 3, 4)
    with pytest.raises(ConfigError):
        check_temporal_first_reduction(layer=layer, gates=EdgeTypeGates(1.0, 1.0, 1.0))
    with pytest.raises(ConfigError):
        check_temporal_first_reduction(layer=replace(layer, sigma="relu"))


def test_witness_output_values():
    assert witness_output(1.0, 2.0).tolist() == [3.0, 5.0]
    assert witness_output(-2.0, 0.5).tolist() == pytest.approx([0.5 + 4.0, -2.0 + 0.25])


def test_strictness_witness():
    report = check_strictness_witness()
    assert report.passed
    assert report.deviation <= 1e-12
    assert report.details["temporal_first_rms"] > 0.1
    assert report.trials == 100


def test_path_graph_message_counts():
    got, expected = message_counts(path_graph(3))
    assert got.tolist() == [3, 5, 3]
    assert expected.tolist() == [3, 5, 3]


def test_message_diversity():
    report = check_message_diversity(trials=10)
    assert report.passed
    assert report.conditions == {"projected_equal": True, "temporal_differs": True, "messages_distinct": True}


def test_gradient_check_covers_all_backbones():
    report = check_gradients()
    assert report.passed, report.details
    assert report.trials == 3


def test_run_suite_selection():
    names = [r.name for r in run_suite("reductions")]
    assert names == ["spatial_first_reduction", "temporal_first_reduction"]
    mutated = run_suite("reductions", mutate=True)
    assert all(not r.passed for r in mutated)
    with pytest.raises(ConfigError):
        run_suite("bogus")
