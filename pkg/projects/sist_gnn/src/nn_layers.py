# src/nn_layers.py
"""
SiST-GNN 레이어 / 인코더
- lstm_step: 노드별 LSTM 셀 (gate 순서 i, f, g, o). 파라미터는 모든 노드가 공유
- message_pass: 확장 그래프 위 gated 집계. backbone = gcn_mean | sage | gat_single_head
- sist_layer_forward: LSTM → 투영 X·W_p → [X_proj; H] → augment → message_pass → σ → 위쪽 N행
- encoder_forward: L층 스택. 층마다 자기 LayerState를 가진다
- save_checkpoint / load_checkpoint: 이름 붙은 파라미터 행렬의 이진 저장 (SISTCKP1)

파라미터 트리(LSTMCellParams 등)는 값으로 np.ndarray(저장/옵티마이저용) 또는
TapeMatrix(bind 후 forward용)를 담는다. named()/map()으로 평탄화·변환한다.
"""

from __future__ import annotations
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging
import struct

import numpy as np

from errors import ConfigError, DataFormatError, DomainError, ShapeError
from graph_core import (
    AugmentedGraph, EdgeTypeGates, SnapshotGraph, augment, gated_adjacency,
)
import tensor_autodiff as ad
from tensor_autodiff import Mat, TapeMatrix

logger = logging.getLogger(__name__)

BACKBONES = ("gcn_mean", "sage", "gat_single_head")
AGGREGATIONS = ("mean", "sum")
NONLINEARITIES = ("relu", "identity")
GAT_SLOPE = 0.2
FORGET_BIAS = 1.0

CHECKPOINT_MAGIC = b"SISTCKP1"


# =========================
# 파라미터 트리
# =========================
class ParamTree:
    """dataclass 필드 중 행렬/하위 트리/트리 리스트를 순회"""

    def named(self, prefix: str = "") -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(v, ParamTree):
                out.update(v.named(key + "."))
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    if isinstance(item, ParamTree):
                        out.update(item.named(f"{key}.{i}."))
            elif isinstance(v, (np.ndarray, TapeMatrix)):
                out[key] = v
        return out

    def map(self, fn: Callable[[str, Any], Any], prefix: str = ""):
        changes: Dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(v, ParamTree):
                changes[f.name] = v.map(fn, key + ".")
            elif isinstance(v, list) and v and isinstance(v[0], ParamTree):
                changes[f.name] = [item.map(fn, f"{key}.{i}.") for i, item in enumerate(v)]
            elif isinstance(v, (np.ndarray, TapeMatrix)):
                changes[f.name] = fn(key, v)
        return replace(self, **changes)


@dataclass
class LSTMCellParams(ParamTree):
    W_ih: Mat   # [d_in × 4d_h]
    W_hh: Mat   # [d_h × 4d_h]
    b: Mat      # [1 × 4d_h]

    @property
    def hidden_dim(self) -> int:
        return int(ad.as_array(self.W_hh).shape[0])


@dataclass
class BackboneParams(ParamTree):
    kind: str
    W_msg: Mat          # [d_h × d_h]
    W_self: Mat         # [d_h × d_h]
    bias: Mat           # [1 × d_h]
    att: Optional[Mat] = None   # [2d_h × 1], gat 전용 (위 d_h: source, 아래 d_h: target)
    aggr: str = "mean"

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ConfigError(f"지원하지 않는 backbone: {self.kind} (가능: {', '.join(BACKBONES)})")
        if self.aggr not in AGGREGATIONS:
            raise ConfigError(f"지원하지 않는 집계: {self.aggr}")
        if self.kind == "gat_single_head" and self.att is None:
            raise ConfigError("gat_single_head에는 attention 벡터가 필요합니다.")


@dataclass
class SiSTLayerParams(ParamTree):
    lstm: LSTMCellParams
    W_p: Mat            # [d_in × d_h]
    backbone: BackboneParams
    sigma: str = "relu"

    def __post_init__(self):
        if self.sigma not in NONLINEARITIES:
            raise ConfigError(f"지원하지 않는 σ: {self.sigma}")
        if ad.as_array(self.W_p).shape[1] != self.lstm.hidden_dim:
            raise ShapeError("W_p 출력 차원은 LSTM hidden 차원과 같아야 합니다.")


@dataclass
class EncoderParams(ParamTree):
    layers: List[SiSTLayerParams]
    P: Mat                          # [N × d_h] 학습되는 노드 임베딩
    dropout_rate: float = 0.1
    gates: List[EdgeTypeGates] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate는 [0, 1) 이어야 합니다: {self.dropout_rate}")
        if not self.gates:
            self.gates = [EdgeTypeGates() for _ in self.layers]
        if len(self.gates) != len(self.layers):
            raise ConfigError("층 수와 gate 수가 다릅니다.")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].lstm.hidden_dim

    @property
    def num_nodes(self) -> int:
        return int(ad.as_array(self.P).shape[0])


@dataclass
class LayerState:
    H: Mat   # [N × d_h]
    C: Mat   # [N × d_h]

    @classmethod
    def zeros(cls, num_nodes: int, hidden_dim: int) -> "LayerState":
        return cls(TapeMatrix(ad.zeros(num_nodes, hidden_dim)), TapeMatrix(ad.zeros(num_nodes, hidden_dim)))


def initial_states(enc: EncoderParams) -> List[LayerState]:
    return [LayerState.zeros(enc.num_nodes, layer.lstm.hidden_dim) for layer in enc.layers]


# =========================
# 초기화
# =========================
def init_lstm(rng: np.random.Generator, d_in: int, d_h: int) -> LSTMCellParams:
    b = ad.zeros(1, 4 * d_h)
    b[0, d_h:2 * d_h] = FORGET_BIAS
    return LSTMCellParams(
        W_ih=ad.glorot_uniform(rng, d_in, 4 * d_h),
        W_hh=ad.glorot_uniform(rng, d_h, 4 * d_h),
        b=b,
    )


def init_backbone(rng: np.random.Generator, kind: str, d_h: int, aggr: str = "mean") -> BackboneParams:
    att = ad.glorot_uniform(rng, 2 * d_h, 1) if kind == "gat_single_head" else None
    return BackboneParams(
        kind=kind,
        W_msg=ad.glorot_uniform(rng, d_h, d_h),
        W_self=ad.glorot_uniform(rng, d_h, d_h),
        bias=ad.zeros(1, d_h),
        att=att,
        aggr=aggr,
    )


def init_layer(rng: np.random.Generator, d_in: int, d_h: int, kind: str = "gcn_mean",
               sigma: str = "relu", aggr: str = "mean") -> SiSTLayerParams:
    return SiSTLayerParams(
        lstm=init_lstm(rng, d_in, d_h),
        W_p=ad.glorot_uniform(rng, d_in, d_h),
        backbone=init_backbone(rng, kind, d_h, aggr),
        sigma=sigma,
    )


def init_encoder(rng: np.random.Generator, num_nodes: int, d_h: int, num_layers: int = 2,
                 kind: str = "gcn_mean", dropout_rate: float = 0.1,
                 gates: Optional[Sequence[EdgeTypeGates]] = None, aggr: str = "mean") -> EncoderParams:
    """안쪽 층 σ=relu, 마지막 층 σ=identity (내적 decoder가 음수 점수도 낼 수 있게)"""
    if num_layers < 1:
        raise ConfigError("층 수 L은 1 이상이어야 합니다.")
    layers = [
        init_layer(rng, d_h, d_h, kind, "relu" if i < num_layers - 1 else "identity", aggr)
        for i in range(num_layers)
    ]
    # 임베딩은 행 수(N)와 무관한 스케일로 초기화
    limit = np.sqrt(3.0 / d_h)
    P = rng.uniform(-limit, limit, size=(num_nodes, d_h))
    return EncoderParams(layers=layers, P=P, dropout_rate=dropout_rate, gates=list(gates or []))


# =========================
# 연산
# =========================
def lstm_step(params: LSTMCellParams, X: Mat, state: LayerState) -> LayerState:
    X = ad.as_matrix(X)
    d = params.hidden_dim
    H, C = ad.as_matrix(state.H), ad.as_matrix(state.C)
    if X.cols != ad.as_array(params.W_ih).shape[0]:
        raise ShapeError(f"lstm_step: 입력 {X.shape}, W_ih {ad.as_array(params.W_ih).shape}")
    if H.shape != (X.rows, d) or C.shape != (X.rows, d):
        raise ShapeError(f"lstm_step: 상태 shape {H.shape}/{C.shape}, 기대 {(X.rows, d)}")
    pre = ad.add_row(ad.add(ad.matmul(X, params.W_ih), ad.matmul(H, params.W_hh)), params.b)
    i = ad.sigmoid(ad.slice_cols(pre, 0, d))
    f = ad.sigmoid(ad.slice_cols(pre, d, 2 * d))
    g = ad.tanh(ad.slice_cols(pre, 2 * d, 3 * d))
    o = ad.sigmoid(ad.slice_cols(pre, 3 * d, 4 * d))
    C_new = ad.add(ad.mul(f, C), ad.mul(i, g))
    H_new = ad.mul(o, ad.tanh(C_new))
    return LayerState(H_new, C_new)


def _gat_aggregate(bb: BackboneParams, gates: EdgeTypeGates, h: TapeMatrix, ag: AugmentedGraph) -> TapeMatrix:
    w = gates.per_edge(ag.etype)
    if np.any(w < 0):
        raise DomainError("gat_single_head에서는 gate가 음수일 수 없습니다 (log gate offset).")
    keep = w > 0
    if not keep.any():
        return TapeMatrix(ad.zeros(ag.num_nodes, h.cols))
    src, dst = ag.src[keep], ag.dst[keep]
    d = h.cols
    a_src = ad.slice_rows(bb.att, 0, d)
    a_dst = ad.slice_rows(bb.att, d, 2 * d)
    logits = ad.add(ad.gather_rows(ad.matmul(h, a_src), src), ad.gather_rows(ad.matmul(h, a_dst), dst))
    logits = ad.add(ad.leaky_relu(logits, GAT_SLOPE), np.log(w[keep])[:, None])
    alpha = ad.segment_softmax(logits, dst, ag.num_nodes)
    msgs = ad.mul_col(ad.gather_rows(h, src), alpha)
    return ad.scatter_add_rows(msgs, dst, ag.num_nodes)


def message_pass(backbone: BackboneParams, gates: EdgeTypeGates, X_aug: Mat, ag: AugmentedGraph) -> TapeMatrix:
    """out_v = x_v·W_self + Σ gate(τ)·x_u·W_msg / deg_gated(v) + bias  (gat: softmax attention)"""
    X_aug = ad.as_matrix(X_aug)
    if X_aug.rows != ag.num_nodes:
        raise ShapeError(f"message_pass: 입력 행 수 {X_aug.rows} ≠ 정점 수 {ag.num_nodes}")
    h = ad.matmul(X_aug, backbone.W_msg)
    if backbone.kind == "gat_single_head":
        agg = _gat_aggregate(backbone, gates, h, ag)
    else:
        adj = gated_adjacency(ag, gates, normalize=backbone.aggr == "mean")
        agg = ad.spmm(adj, h)
    out = ad.add_row(ad.add(ad.matmul(X_aug, backbone.W_self), agg), backbone.bias)
    if backbone.kind == "sage":
        out = ad.l2_normalize_rows(out)
    return out


TemporalFn = Callable[[Mat, LayerState], LayerState]


def sist_layer_forward(params: SiSTLayerParams, X: Mat, g: SnapshotGraph, state: LayerState,
                       gates: EdgeTypeGates, f_temp: Optional[TemporalFn] = None,
                       ag: Optional[AugmentedGraph] = None) -> Tuple[TapeMatrix, LayerState]:
    """
    한 스냅샷, 한 층.
    f_temp를 주면 LSTM 대신 사용한다 (검증용 temporal operator).
    """
    X = ad.as_matrix(X)
    n = g.num_nodes
    if X.rows != n:
        raise ShapeError(f"sist_layer_forward: 입력 행 {X.rows} ≠ N {n}")
    new_state = lstm_step(params.lstm, X, state) if f_temp is None else f_temp(X, state)
    X_proj = ad.matmul(X, params.W_p)
    X_aug = ad.stack_rows(X_proj, new_state.H)
    out = message_pass(params.backbone, gates, X_aug, ag if ag is not None else augment(g))
    out = ad.activation(params.sigma, out)
    return ad.slice_rows(out, 0, n), new_state


def encoder_forward(enc: EncoderParams, g: SnapshotGraph, states: Sequence[LayerState], mode: str = "eval",
                    X: Optional[Mat] = None, rng: Optional[np.random.Generator] = None) -> Tuple[TapeMatrix, List[LayerState]]:
    """
    X 기본값은 P (링크 예측). 노드 분류는 호출부가 융합 특징을 넘긴다.
    층 사이 dropout은 train 모드에서만. cross-time 간선은 모든 깊이에서 다시 쓰인다.
    """
    if len(states) != enc.num_layers:
        raise ConfigError(f"상태 수 {len(states)} ≠ 층 수 {enc.num_layers}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode는 train|eval 이어야 합니다: {mode}")
    use_dropout = mode == "train" and enc.dropout_rate > 0 and enc.num_layers > 1
    if use_dropout and rng is None:
        raise ConfigError("train 모드 dropout에는 rng가 필요합니다.")
    ag = augment(g)
    h = enc.P if X is None else X
    new_states: List[LayerState] = []
    Z: Optional[TapeMatrix] = None
    for i, (layer, state, gates) in enumerate(zip(enc.layers, states, enc.gates)):
        Z, s = sist_layer_forward(layer, h, g, state, gates, ag=ag)
        new_states.append(s)
        h = ad.dropout(Z, enc.dropout_rate, rng) if use_dropout and i < enc.num_layers - 1 else Z
    return Z, new_states


def detach_states(states: Sequence[LayerState]) -> List[LayerState]:
    return [LayerState(ad.detach(s.H), ad.detach(s.C)) for s in states]


def bind(tree: ParamTree, tape: ad.Tape, prefix: str = ""):
    """ndarray 파라미터를 tape leaf로 등록한 같은 모양의 트리 반환"""
    return tree.map(lambda name, v: tape.parameter(ad.as_array(v), name), prefix)


# =========================
# 체크포인트
# =========================
def save_checkpoint(path: Union[str, Path], named: Dict[str, Mat]) -> Path:
    """
    SISTCKP1 | u64 개수 | (u32 이름 길이, UTF-8 이름, u64 rows, u64 cols, f64 LE 값들)*
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(named)))
        for name, value in named.items():
            arr = np.atleast_2d(ad.as_array(value))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    logger.info(f"[ckpt] 저장: {path} ({len(named)}개 행렬)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"체크포인트 magic이 다릅니다: {path}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError(f"체크포인트가 잘렸습니다: {path}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<QQ", take(16))
        vals = np.frombuffer(take(8 * rows * cols), dtype="<f8").astype(np.float64)
        out[name] = vals.reshape(rows, cols)
    return out
