# src/heads_metrics.py
"""
태스크 head + 지표
- 링크 예측: 파라미터 없는 내적 decoder, margin ranking loss, 음성 tail 샘플링, MRR
- 노드 분류: 2층 MLP readout (+ 최근 간선 특징 residual 융합), weighted BCE, AUC

공개 함수:
    score_edges(Z, pairs) -> np.ndarray
    score_pairs(Z, heads, tails) -> TapeMatrix[E×1]        # tape 위 점수 (학습용)
    margin_loss(Z, positives, neg_tails) -> TapeMatrix[1×1]
    sample_negatives(positives, N, k, rng) -> np.ndarray[E×k]
    mrr(Z, positives, neg_tails) -> Optional[float]
    nc_readout(params, Z, source_nodes, last_edge_features) -> TapeMatrix[S×1]
    weighted_bce(logits, labels, weighting) -> TapeMatrix[1×1]
    auc(scores, labels) -> Optional[float]
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import List, Optional
import logging
import warnings

import numpy as np
from scipy.stats import rankdata

from errors import ClassWeightFallbackWarning, DomainError, EmptyBatchWarning, ShapeError
from graph_core import SnapshotGraph
from nn_layers import ParamTree
import tensor_autodiff as ad
from tensor_autodiff import Mat, TapeMatrix

logger = logging.getLogger(__name__)

NEGATIVE_RESAMPLE_ROUNDS = 10
WEIGHTINGS = ("none", "sqrt", "balanced")
# MRR 청크 크기 상한 (einsum 임시 배열 원소 수)
_SCORE_CHUNK_ELEMS = 4_000_000


# ---- 내부 유틸 ----
def _pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return arr.reshape(-1, 2)


def _check_nodes(idx: np.ndarray, n: int, what: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DomainError(f"{what}: 노드 인덱스가 0..{n - 1} 범위를 벗어났습니다.")


# =========================
# 링크 예측
# =========================
@dataclass(frozen=True)
class LinkScore:
    u: int
    v: int
    score: float


def score_edges(Z: Mat, pairs) -> np.ndarray:
    z = ad.as_array(Z)
    p = _pairs(pairs)
    _check_nodes(p, z.shape[0], "score_edges")
    return np.einsum("ij,ij->i", z[p[:, 0]], z[p[:, 1]])


def link_scores(Z: Mat, pairs) -> List[LinkScore]:
    p = _pairs(pairs)
    return [LinkScore(int(u), int(v), float(s)) for (u, v), s in zip(p, score_edges(Z, p))]


def score_pairs(Z: Mat, heads, tails) -> TapeMatrix:
    Z = ad.as_matrix(Z)
    heads = np.asarray(heads, dtype=np.int64).reshape(-1)
    tails = np.asarray(tails, dtype=np.int64).reshape(-1)
    _check_nodes(heads, Z.rows, "score_pairs")
    _check_nodes(tails, Z.rows, "score_pairs")
    return ad.row_sum(ad.mul(ad.gather_rows(Z, heads), ad.gather_rows(Z, tails)))


def margin_loss(Z: Mat, positives, neg_tails) -> TapeMatrix:
    """mean(max(0, 1 − s(u,v) + s(u,v⁻))). 양성 간선이 없으면 0 + EmptyBatchWarning"""
    pos = _pairs(positives)
    neg = np.asarray(neg_tails, dtype=np.int64).reshape(-1)
    if pos.shape[0] == 0:
        warnings.warn("margin_loss: 양성 간선이 없어 loss를 0으로 둡니다.", EmptyBatchWarning, stacklevel=2)
        return ad.constant(np.zeros((1, 1)))
    if neg.size != pos.shape[0]:
        raise ShapeError(f"margin_loss: 음성 {neg.size}개 ≠ 양성 {pos.shape[0]}개")
    s_pos = score_pairs(Z, pos[:, 0], pos[:, 1])
    s_neg = score_pairs(Z, pos[:, 0], neg)
    ones = np.ones((pos.shape[0], 1))
    return ad.mean_all(ad.relu(ad.add(ad.sub(ones, s_pos), s_neg)))


def sample_negatives(positives, num_nodes: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """
    양성 (u, v)마다 Uniform(V)에서 tail k개.
    진짜 tail과 겹치면 최대 10회 다시 뽑고, 그래도 겹치면 그대로 둔다.
    """
    if num_nodes < 2:
        raise DomainError("음성 샘플링에는 노드가 2개 이상 필요합니다.")
    if k < 1:
        raise DomainError(f"k는 1 이상이어야 합니다: {k}")
    pos = _pairs(positives)
    tails = pos[:, 1][:, None]
    draws = rng.integers(0, num_nodes, size=(pos.shape[0], k))
    for _ in range(NEGATIVE_RESAMPLE_ROUNDS):
        clash = draws == tails
        n_clash = int(clash.sum())
        if n_clash == 0:
            break
        draws[clash] = rng.integers(0, num_nodes, size=n_clash)
    return draws


def _per_positive(neg, num_pos: int, dtype, what: str) -> np.ndarray:
    """음성 배열 → [양성 수 × k]. 양성마다 같은 개수여야 한다"""
    arr = np.asarray(neg, dtype=dtype)
    if arr.size % num_pos:
        raise ShapeError(f"{what}: 음성 {arr.size}개를 양성 {num_pos}개에 고르게 나눌 수 없습니다. shape={arr.shape}")
    return arr.reshape(num_pos, -1)


def reciprocal_ranks(pos_scores: np.ndarray, neg_scores: np.ndarray) -> np.ndarray:
    """rank = 1 + #(음성 > 양성) + ½·#(동점)"""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1, 1)
    neg = _per_positive(neg_scores, max(1, pos.shape[0]), np.float64, "reciprocal_ranks")
    greater = (neg > pos).sum(axis=1)
    ties = (neg == pos).sum(axis=1)
    return 1.0 / (1.0 + greater + 0.5 * ties)


def mrr_from_scores(pos_scores, neg_scores) -> Optional[float]:
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0:
        return None
    return float(reciprocal_ranks(pos, neg_scores).mean())


def mrr(Z: Mat, positives, neg_tails) -> Optional[float]:
    """양성은 자기 음성들과만 비교. 양성이 없으면 None"""
    z = ad.as_array(Z)
    pos = _pairs(positives)
    if pos.shape[0] == 0:
        return None
    neg = _per_positive(neg_tails, pos.shape[0], np.int64, "mrr")
    _check_nodes(pos, z.shape[0], "mrr")
    _check_nodes(neg, z.shape[0], "mrr")
    k, d = neg.shape[1], z.shape[1]
    chunk = max(1, _SCORE_CHUNK_ELEMS // max(1, k * d))
    rr = np.empty(pos.shape[0])
    for lo in range(0, pos.shape[0], chunk):
        hi = min(lo + chunk, pos.shape[0])
        zu = z[pos[lo:hi, 0]]
        s_pos = np.einsum("cd,cd->c", zu, z[pos[lo:hi, 1]])
        s_neg = np.einsum("cd,ckd->ck", zu, z[neg[lo:hi]])
        rr[lo:hi] = reciprocal_ranks(s_pos, s_neg)
    return float(rr.mean())


# =========================
# 노드 분류 readout
# =========================
@dataclass
class NCReadoutParams(ParamTree):
    W1: Mat       # [d_h × d_h]
    b1: Mat       # [1 × d_h]
    W2: Mat       # [d_h × 1]
    b2: Mat       # [1 × 1]
    E1: Mat       # [d_e × d_h]
    eb1: Mat      # [1 × d_h]
    E2: Mat       # [d_h × d_h]
    eb2: Mat      # [1 × d_h]
    fusion: Mat   # [1 × 1] residual 융합 가중치

    @property
    def edge_dim(self) -> int:
        return int(ad.as_array(self.E1).shape[0])


def init_nc_readout(rng: np.random.Generator, d_h: int, d_e: int) -> NCReadoutParams:
    return NCReadoutParams(
        W1=ad.glorot_uniform(rng, d_h, d_h), b1=ad.zeros(1, d_h),
        W2=ad.glorot_uniform(rng, d_h, 1), b2=ad.zeros(1, 1),
        E1=ad.glorot_uniform(rng, d_e, d_h), eb1=ad.zeros(1, d_h),
        E2=ad.glorot_uniform(rng, d_h, d_h), eb2=ad.zeros(1, d_h),
        fusion=np.ones((1, 1)),
    )


def last_edge_features(g: SnapshotGraph, source_nodes, edge_dim: int) -> np.ndarray:
    """
    source별 스냅샷 내 가장 늦은 간선의 특징. 동시각이면 입력 순서상 뒤의 행.
    간선이 없는 source는 0 벡터.
    """
    nodes = np.asarray(source_nodes, dtype=np.int64).reshape(-1)
    out = np.zeros((nodes.size, edge_dim))
    if g.num_edges == 0 or g.edge_features is None or edge_dim == 0:
        return out
    if g.edge_features.shape[1] != edge_dim:
        raise ShapeError(f"간선 특징 차원 {g.edge_features.shape[1]} ≠ {edge_dim}")
    order = np.arange(g.num_edges)
    if g.edge_timestamps is not None:
        order = np.lexsort((order, g.edge_timestamps))
    rev = order[::-1]
    srcs, first = np.unique(g.src[rev], return_index=True)
    chosen = rev[first]
    pos = np.searchsorted(srcs, nodes)
    hit = (pos < srcs.size) & (srcs[np.minimum(pos, srcs.size - 1)] == nodes)
    out[hit] = g.edge_features[chosen[pos[hit]]]
    return out


def nc_readout(params: NCReadoutParams, Z: Mat, source_nodes, last_edge_feats) -> TapeMatrix:
    """logit_v = mlp(z_v + fusion · edge_encoder(e_v))"""
    Z = ad.as_matrix(Z)
    nodes = np.asarray(source_nodes, dtype=np.int64).reshape(-1)
    _check_nodes(nodes, Z.rows, "nc_readout")
    e = ad.as_matrix(last_edge_feats)
    if e.rows != nodes.size or e.cols != params.edge_dim:
        raise ShapeError(f"nc_readout: 간선 특징 {e.shape}, 기대 {(nodes.size, params.edge_dim)}")
    z = ad.gather_rows(Z, nodes)
    enc = ad.add_row(ad.matmul(ad.relu(ad.add_row(ad.matmul(e, params.E1), params.eb1)), params.E2), params.eb2)
    z = ad.add(z, ad.mul_scalar(enc, params.fusion))
    hidden = ad.relu(ad.add_row(ad.matmul(z, params.W1), params.b1))
    return ad.add_row(ad.matmul(hidden, params.W2), params.b2)


# =========================
# BCE / AUC
# =========================
def positive_weight(labels, weighting: str) -> float:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if weighting not in WEIGHTINGS:
        raise DomainError(f"지원하지 않는 weighting: {weighting}")
    if weighting == "none":
        return 1.0
    n_pos = float(y.sum())
    n_neg = float(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        warnings.warn(f"{weighting} 가중치: 한 클래스뿐이라 w⁺=1로 둡니다.", ClassWeightFallbackWarning, stacklevel=3)
        return 1.0
    ratio = n_neg / n_pos
    return ratio if weighting == "balanced" else float(np.sqrt(ratio))


def weighted_bce(logits: Mat, labels, weighting: str = "balanced") -> TapeMatrix:
    """−mean(w⁺·y·log σ(x) + (1−y)·log(1−σ(x))), softplus로 로그 공간에서 계산"""
    x = ad.as_matrix(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.size == 0:
        raise DomainError("weighted_bce: 샘플이 없습니다.")
    if x.shape != y.shape:
        raise ShapeError(f"weighted_bce: logits {x.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("weighted_bce: 라벨은 0/1 이어야 합니다.")
    w_pos = positive_weight(y, weighting)
    pos_term = ad.mul(ad.softplus(ad.scale(x, -1.0)), w_pos * y)
    neg_term = ad.mul(ad.softplus(x), 1.0 - y)
    return ad.mean_all(ad.add(pos_term, neg_term))


def auc(scores, labels) -> Optional[float]:
    """Mann–Whitney U / (n⁺·n⁻), 동점은 midrank. 한 클래스뿐이면 None"""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
