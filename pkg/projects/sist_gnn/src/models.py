# src/models.py
"""
태스크별 모델 래퍼
- LinkPredictionModel: X_t = P, margin ranking loss (양성마다 음성 tail 1개)
- NodeClassificationModel: X_t = F·W_f + P (F = 상수 열 + bipartite 역할 표시), MLP readout, weighted BCE

두 모델 공통 인터페이스 (training.py가 사용):
    parameters() -> {이름: ndarray}     # 옵티마이저가 제자리 갱신하는 저장소
    bind(tape) -> ModelParams            # tape leaf로 묶인 사본
    embed(g, states, mode, rng, params) -> (Z, new_states)
    snapshot_loss(params, Z, g, target, rng) -> TapeMatrix | None
    snapshot_params() / restore_params() / checksum()
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import hashlib
import logging

import numpy as np

from data_io import NodeLabels
from errors import ConfigError, ShapeError
from graph_core import EdgeTypeGates, SnapshotGraph
from heads_metrics import (
    NCReadoutParams, init_nc_readout, last_edge_features, margin_loss, mrr,
    nc_readout, sample_negatives, weighted_bce,
)
from nn_layers import (
    EncoderParams, LayerState, ParamTree, bind, encoder_forward, init_encoder, initial_states,
)
import tensor_autodiff as ad
from tensor_autodiff import Mat, TapeMatrix

logger = logging.getLogger(__name__)


@dataclass
class ModelParams(ParamTree):
    encoder: EncoderParams
    readout: Optional[NCReadoutParams] = None
    W_f: Optional[Mat] = None   # [d_f × d_h], 노드 분류 정적 특징 투영


class _SnapshotModel:
    task = ""

    def __init__(self, params: ModelParams):
        self.params = params

    # ---- 파라미터 ----
    def parameters(self) -> Dict[str, np.ndarray]:
        return self.params.named()

    def bind(self, tape: ad.Tape) -> ModelParams:
        return bind(self.params, tape)

    def snapshot_params(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def restore_params(self, snapshot: Dict[str, np.ndarray]) -> None:
        """값 복사로 복원 (옵티마이저가 들고 있는 배열 참조 유지)"""
        for name, arr in self.parameters().items():
            if name not in snapshot or snapshot[name].shape != arr.shape:
                raise ShapeError(f"복원할 파라미터가 맞지 않습니다: {name}")
            np.copyto(arr, snapshot[name])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameters().items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # ---- 순전파 ----
    @property
    def num_nodes(self) -> int:
        return self.params.encoder.num_nodes

    def initial_states(self) -> List[LayerState]:
        return initial_states(self.params.encoder)

    def node_features(self, params: ModelParams) -> Optional[TapeMatrix]:
        return None

    def embed(self, g: SnapshotGraph, states: Sequence[LayerState], mode: str = "eval",
              rng: Optional[np.random.Generator] = None,
              params: Optional[ModelParams] = None) -> Tuple[TapeMatrix, List[LayerState]]:
        p = params if params is not None else self.params
        return encoder_forward(p.encoder, g, states, mode, X=self.node_features(p), rng=rng)

    def default_target(self, g: SnapshotGraph):
        raise NotImplementedError

    def snapshot_loss(self, params: ModelParams, Z: TapeMatrix, g: SnapshotGraph, target,
                      rng: np.random.Generator) -> Optional[TapeMatrix]:
        raise NotImplementedError


class LinkPredictionModel(_SnapshotModel):
    task = "lp"

    @classmethod
    def create(cls, num_nodes: int, d_h: int = 128, num_layers: int = 2, backbone: str = "gcn_mean",
               dropout: float = 0.1, seed: int = 0, gates: Optional[Sequence[EdgeTypeGates]] = None,
               aggr: str = "mean") -> "LinkPredictionModel":
        rng = np.random.default_rng(seed)
        enc = init_encoder(rng, num_nodes, d_h, num_layers, backbone, dropout, gates, aggr)
        return cls(ModelParams(encoder=enc))

    def default_target(self, g: SnapshotGraph) -> SnapshotGraph:
        return g

    def snapshot_loss(self, params, Z, g, target: SnapshotGraph, rng):
        pos = target.edge_array()
        if pos.shape[0] == 0:
            return None
        neg = sample_negatives(pos, self.num_nodes, 1, rng)[:, 0]
        return margin_loss(Z, pos, neg)

    def evaluate(self, Z: Mat, target: SnapshotGraph, k: int, rng: np.random.Generator) -> Optional[float]:
        pos = target.edge_array()
        if pos.shape[0] == 0:
            return None
        return mrr(Z, pos, sample_negatives(pos, self.num_nodes, k, rng))


def static_features(num_nodes: int, roles: Optional[np.ndarray] = None) -> np.ndarray:
    """상수 1 열 (+ 역할 표시 열: source=0, destination=1)"""
    cols = [np.ones((num_nodes, 1))]
    if roles is not None:
        r = np.asarray(roles, dtype=np.float64).reshape(-1, 1)
        if r.shape[0] != num_nodes:
            raise ShapeError(f"역할 벡터 길이 {r.shape[0]} ≠ N {num_nodes}")
        cols.append(r)
    return np.hstack(cols)


class NodeClassificationModel(_SnapshotModel):
    task = "nc"

    def __init__(self, params: ModelParams, features: np.ndarray, weighting: str = "balanced"):
        super().__init__(params)
        if params.readout is None or params.W_f is None:
            raise ConfigError("노드 분류 모델에는 readout과 W_f가 필요합니다.")
        self.features = np.asarray(features, dtype=np.float64)
        self.weighting = weighting

    @classmethod
    def create(cls, num_nodes: int, edge_dim: int, d_h: int = 256, num_layers: int = 2,
               backbone: str = "gcn_mean", dropout: float = 0.1, seed: int = 0,
               roles: Optional[np.ndarray] = None, weighting: str = "balanced",
               gates: Optional[Sequence[EdgeTypeGates]] = None, aggr: str = "mean") -> "NodeClassificationModel":
        rng = np.random.default_rng(seed)
        enc = init_encoder(rng, num_nodes, d_h, num_layers, backbone, dropout, gates, aggr)
        F = static_features(num_nodes, roles)
        params = ModelParams(
            encoder=enc,
            readout=init_nc_readout(rng, d_h, edge_dim),
            W_f=ad.glorot_uniform(rng, F.shape[1], d_h),
        )
        return cls(params, F, weighting)

    def node_features(self, params: ModelParams) -> TapeMatrix:
        return ad.add(ad.matmul(self.features, params.W_f), params.encoder.P)

    def default_target(self, g: SnapshotGraph):
        raise ConfigError("노드 분류 학습에는 스냅샷 라벨(target)이 필요합니다.")

    def snapshot_loss(self, params, Z, g, target: NodeLabels, rng):
        if target is None or target.nodes.size == 0:
            return None
        logits = self.logits(Z, g, target.nodes, params)
        return weighted_bce(logits, target.labels, self.weighting)

    def logits(self, Z: Mat, g: SnapshotGraph, nodes, params: Optional[ModelParams] = None) -> TapeMatrix:
        p = params if params is not None else self.params
        feats = last_edge_features(g, nodes, p.readout.edge_dim)
        return nc_readout(p.readout, Z, nodes, feats)
