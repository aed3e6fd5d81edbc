# tests/conftest.py
import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from data_io import SyntheticSpec, generate_synthetic  # noqa: E402
from graph_core import SnapshotGraph  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """설정/로그/출력 디렉터리를 tmp로 돌린다"""
    monkeypatch.setenv("SIST_CONFIG_DIR", str(tmp_path / "configs"))
    monkeypatch.setenv("SIST_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("SIST_OUTPUT_DIR", str(tmp_path / "runs"))
    return tmp_path


@pytest.fixture
def small_graph():
    return SnapshotGraph.from_edges(4, [(0, 1), (1, 2), (2, 0), (3, 1)])


@pytest.fixture
def synthetic_sequence():
    """N=10, 주기 2, T=12 (fixed split: 학습 10 / 평가 2)"""
    return generate_synthetic(SyntheticSpec(num_nodes=10, period=2, edges_per_snapshot=12, num_snapshots=12, seed=3))


TINY_YAML = """task: lp
d_h: 8
num_layers: 2
epochs: 1
eval_negatives: 20
lr: 0.01
synthetic:
  enabled: true
  num_nodes: 10
  period: 2
  edges_per_snapshot: 12
  num_snapshots: 12
"""


@pytest.fixture
def tiny_config(isolated_env):
    path = isolated_env / "tiny.yaml"
    path.write_text(TINY_YAML, encoding="utf-8")
    return path
