# src/graph_core.py
"""
스냅샷 그래프 표현 + 시간 확장(augmented) 그래프
- SnapshotGraph: 전역 노드 수 N 고정, 방향 COO 간선 (src, dst)
- augment(): 정점 2N개. 위쪽 절반 = 현재 특징, 아래쪽 절반 = 시간 요약(temporal summary)
    intra          : E_t 그대로
    cross_neighbor : (u+N, v)  for (u, v) ∈ E_t
    cross_self     : (u+N, u)  for u ∈ V_t
  → |간선| = 2|E_t| + N
- EdgeTypeGates: 간선 종류별 스칼라 gate. 0이면 해당 종류가 완전히 빠진다.

공개 함수:
    augment(g) -> AugmentedGraph
    in_degree_augmented(ag, gates) -> np.ndarray[2N]
    incoming_message_count(ag, u) -> int
    gated_adjacency(ag, gates, normalize=True) -> scipy CSR
    symmetrize / add_self_loops / intra_only / permute_graph / permute_rows / random_snapshot
"""

from __future__ import annotations
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, List, Optional, Sequence, Tuple
import math

import numpy as np
import scipy.sparse as sp

from errors import BoundsError, DomainError, ShapeError


class EdgeType(IntEnum):
    INTRA = 0
    CROSS_NEIGHBOR = 1
    CROSS_SELF = 2


def _frozen_index(a, name: str) -> np.ndarray:
    raw = np.asarray(a).reshape(-1)
    if raw.size and not np.issubdtype(raw.dtype, np.integer):
        try:
            as_float = raw.astype(np.float64)
        except (TypeError, ValueError) as e:
            raise DomainError(f"{name}: 정수 노드 인덱스가 아닙니다: {e}") from e
        if not np.all(np.isfinite(as_float) & (as_float == np.floor(as_float))):
            raise DomainError(f"{name}: 정수가 아닌 노드 인덱스가 있습니다.")
    arr = np.array(raw, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def _frozen_float(a, name: str) -> Optional[np.ndarray]:
    if a is None:
        return None
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# =========================
# 타입
# =========================
@dataclass(frozen=True)
class SnapshotGraph:
    """하나의 스냅샷. 해당 시점에 없는 노드는 간선이 없을 뿐 id는 유지된다."""
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    index: int = 0
    edge_features: Optional[np.ndarray] = None     # [|E| × d_e]
    edge_timestamps: Optional[np.ndarray] = None   # [|E|], 스냅샷 내부 시각
    weights: Optional[np.ndarray] = None           # 부호 있는 평점 등. 기본 모델은 사용하지 않음

    def __post_init__(self):
        src = _frozen_index(self.src, "src")
        dst = _frozen_index(self.dst, "dst")
        if src.size != dst.size:
            raise ShapeError(f"src/dst 길이 불일치: {src.size} vs {dst.size}")
        n = int(self.num_nodes)
        if n < 0:
            raise DomainError("num_nodes는 0 이상이어야 합니다.")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
            raise BoundsError(f"간선 끝점이 0..{n - 1} 범위를 벗어났습니다. (snapshot {self.index})")
        feats = _frozen_float(self.edge_features, "edge_features")
        if feats is not None:
            if feats.ndim != 2 or feats.shape[0] != src.size:
                raise ShapeError(f"edge_features shape {feats.shape}, 간선 수 {src.size}")
        for name in ("edge_timestamps", "weights"):
            arr = _frozen_float(getattr(self, name), name)
            if arr is not None and arr.shape != (src.size,):
                raise ShapeError(f"{name} 길이 {arr.shape}, 간선 수 {src.size}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "edge_features", feats)

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[Tuple[int, int]], index: int = 0, **extra) -> "SnapshotGraph":
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        return cls(num_nodes, pairs[:, 0], pairs[:, 1], index=index, **extra)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def edge_array(self) -> np.ndarray:
        """[|E| × 2] (src, dst)"""
        return np.stack([self.src, self.dst], axis=1) if self.num_edges else np.zeros((0, 2), dtype=np.int64)


@dataclass(frozen=True)
class AugmentedGraph:
    num_nodes: int      # 2N (intra_only 뷰에서는 N)
    base_nodes: int     # N
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> List[Tuple[int, int, EdgeType]]:
        return [(s, d, EdgeType(t)) for s, d, t in zip(self.src.tolist(), self.dst.tolist(), self.etype.tolist())]


@dataclass(frozen=True)
class EdgeTypeGates:
    alpha_intra: float = 1.0
    alpha_cross: float = 1.0
    alpha_self: float = 1.0

    def __post_init__(self):
        for name in ("alpha_intra", "alpha_cross", "alpha_self"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise DomainError(f"gate {name}는 유한한 실수여야 합니다: {v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_intra, self.alpha_cross, self.alpha_self])

    def per_edge(self, etype: np.ndarray) -> np.ndarray:
        return self.as_array()[etype]

    @classmethod
    def of(cls, intra: float, cross: float, self_: float) -> "EdgeTypeGates":
        return cls(intra, cross, self_)


# =========================
# 확장 그래프
# =========================
def augment(g: SnapshotGraph) -> AugmentedGraph:
    """intra 블록 → cross_neighbor 블록(입력 간선 순서) → cross_self 블록(노드 순서)"""
    n = g.num_nodes
    nodes = np.arange(n, dtype=np.int64)
    src = np.concatenate([g.src, g.src + n, nodes + n])
    dst = np.concatenate([g.dst, g.dst, nodes])
    etype = np.concatenate([
        np.full(g.num_edges, EdgeType.INTRA, dtype=np.int64),
        np.full(g.num_edges, EdgeType.CROSS_NEIGHBOR, dtype=np.int64),
        np.full(n, EdgeType.CROSS_SELF, dtype=np.int64),
    ])
    for a in (src, dst, etype):
        a.setflags(write=False)
    return AugmentedGraph(2 * n, n, src, dst, etype)


def intra_only(g: SnapshotGraph) -> AugmentedGraph:
    """스냅샷 자체를 intra 간선만 가진 typed graph로 본다 (정점 N개)"""
    etype = np.full(g.num_edges, EdgeType.INTRA, dtype=np.int64)
    return AugmentedGraph(g.num_nodes, g.num_nodes, g.src, g.dst, etype)


def in_degree_augmented(ag: AugmentedGraph, gates: EdgeTypeGates) -> np.ndarray:
    """gate 가중 in-degree. 아래쪽 절반(≥N)은 들어오는 간선이 없으므로 0"""
    return np.bincount(ag.dst, weights=gates.per_edge(ag.etype), minlength=ag.num_nodes).astype(np.float64)


def incoming_message_count(ag: AugmentedGraph, u: int) -> int:
    if not 0 <= u < ag.base_nodes:
        raise DomainError(f"노드 {u}는 위쪽 절반(0..{ag.base_nodes - 1})이 아닙니다.")
    return int(np.count_nonzero(ag.dst == u))


def gated_adjacency(ag: AugmentedGraph, gates: EdgeTypeGates, normalize: bool = True) -> sp.csr_matrix:
    """
    A[dst, src] = Σ gate(τ). 평행 간선은 합산(다중도만큼 가중).
    normalize=True면 gate 가중 in-degree로 행 정규화, degree 0인 행은 그대로 둔다.
    """
    w = gates.per_edge(ag.etype)
    if normalize:
        deg = in_degree_augmented(ag, gates)
        d = deg[ag.dst]
        w = np.divide(w, d, out=np.zeros_like(w), where=d != 0)
    adj = sp.csr_matrix((w, (ag.dst, ag.src)), shape=(ag.num_nodes, ag.num_nodes))
    adj.sum_duplicates()
    adj.eliminate_zeros()
    return adj


# =========================
# 전처리/변환
# =========================
def symmetrize(g: SnapshotGraph) -> SnapshotGraph:
    """무방향 이웃 N(u)로 변환: 중복 제거 후 양방향으로 방출. self-loop는 한 번만."""
    if g.num_edges == 0:
        return SnapshotGraph(g.num_nodes, g.src, g.dst, index=g.index)
    lo = np.minimum(g.src, g.dst)
    hi = np.maximum(g.src, g.dst)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    off = pairs[pairs[:, 0] != pairs[:, 1]]
    loops = pairs[pairs[:, 0] == pairs[:, 1]]
    src = np.concatenate([off[:, 0], off[:, 1], loops[:, 0]])
    dst = np.concatenate([off[:, 1], off[:, 0], loops[:, 1]])
    return SnapshotGraph(g.num_nodes, src, dst, index=g.index)


def add_self_loops(g: SnapshotGraph) -> SnapshotGraph:
    nodes = np.arange(g.num_nodes, dtype=np.int64)
    return SnapshotGraph(g.num_nodes, np.concatenate([g.src, nodes]), np.concatenate([g.dst, nodes]), index=g.index)


def neighbors(g: SnapshotGraph, u: int) -> np.ndarray:
    """무방향 이웃 집합 (self 제외)"""
    mask_out = (g.src == u) & (g.dst != u)
    mask_in = (g.dst == u) & (g.src != u)
    return np.unique(np.concatenate([g.dst[mask_out], g.src[mask_in]]))


def check_permutation(perm: Sequence[int], n: int) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64).reshape(-1)
    if p.size != n or not np.array_equal(np.sort(p), np.arange(n)):
        raise DomainError(f"길이 {n}의 순열이 아닙니다.")
    return p


def permute_graph(g: SnapshotGraph, perm: Sequence[int]) -> SnapshotGraph:
    """노드 i → perm[i]. 간선 순서와 간선 속성은 유지"""
    p = check_permutation(perm, g.num_nodes)
    return SnapshotGraph(
        g.num_nodes, p[g.src], p[g.dst], index=g.index,
        edge_features=g.edge_features, edge_timestamps=g.edge_timestamps, weights=g.weights,
    )


def permute_rows(x, perm: Sequence[int]) -> np.ndarray:
    """out[perm[i]] = x[i]"""
    x = np.asarray(x)
    p = check_permutation(perm, x.shape[0])
    out = np.empty_like(x)
    out[p] = x
    return out


def random_snapshot(rng: np.random.Generator, num_nodes: int, num_edges: int, index: int = 0,
                    self_loops: bool = False) -> SnapshotGraph:
    """균일 무작위 방향 간선 (중복 허용). 테스트/검증용"""
    src = rng.integers(0, num_nodes, size=num_edges)
    dst = rng.integers(0, num_nodes, size=num_edges)
    if not self_loops and num_nodes > 1:
        clash = src == dst
        dst[clash] = (dst[clash] + rng.integers(1, num_nodes, size=int(clash.sum()))) % num_nodes
    return SnapshotGraph(num_nodes, src, dst, index=index)


def empty_snapshot(num_nodes: int, index: int = 0) -> SnapshotGraph:
    return SnapshotGraph(num_nodes, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), index=index)
