# src/training.py
"""
학습 루프 / 평가 프로토콜
- AdamState + adam_step: decoupled weight decay (θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ)
- train_snapshot: forward → loss → backward → adam_step → detach (truncated BPTT)
- run_fixed_split: 앞 90% 스냅샷 학습, 나머지 스냅샷별 MRR
- run_live_update: t마다 먼저 예측(이전 파라미터/상태), 그 다음 K 에폭 학습
- run_nc: 70/15/15 시간순 분할, 검증 AUC early stopping, 최적 체크포인트로 test AUC

링크 예측 시간 정렬: 스냅샷 t 예측은 G_{t−1}에서 계산한 Z_{t−1} (상태는 t−2까지) 사용.
그래서 학습 쌍은 (구조 G_t → 정답 E_{t+1}).
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np

from data_io import SnapshotSequence
from errors import ConfigError, ShapeError
from graph_core import SnapshotGraph
from heads_metrics import auc
from models import LinkPredictionModel, NodeClassificationModel, _SnapshotModel
from nn_layers import LayerState, detach_states
from schema import MetricsRecord, MetricsWriter, SummaryRecord
import tensor_autodiff as ad

logger = logging.getLogger(__name__)

PROTOCOLS = ("fixed_split", "live_update", "nc_split")


# =========================
# 옵티마이저
# =========================
@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], lr: float = 1e-3, weight_decay: float = 1e-5) -> "AdamState":
        return cls(
            lr=lr, weight_decay=weight_decay,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """params를 제자리 갱신. gradient가 없는 파라미터는 0 gradient로 본다."""
    unknown = set(grads) - set(params)
    if unknown:
        raise ShapeError(f"파라미터에 없는 gradient: {sorted(unknown)[:3]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient {g.shape} ≠ 파라미터 {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        decay = state.lr * state.weight_decay * theta
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= decay
    return params


# =========================
# 프로토콜 설정
# =========================
@dataclass
class ProtocolConfig:
    mode: str = "fixed_split"
    train_fraction: float = 0.9
    inner_epochs: int = 10
    nc_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    epochs: int = 100
    patience: int = 5
    eval_negatives: int = 1000
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    record_timing: bool = True

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_")
        if self.mode not in PROTOCOLS:
            raise ConfigError(f"지원하지 않는 protocol: {self.mode} (가능: {', '.join(PROTOCOLS)})")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction은 (0, 1] 이어야 합니다.")
        if len(self.nc_fractions) != 3 or min(self.nc_fractions) < 0 or sum(self.nc_fractions) > 1.0 + 1e-9:
            raise ConfigError(f"nc_fractions 합은 1 이하여야 합니다: {self.nc_fractions}")
        if self.inner_epochs < 0 or self.epochs < 0 or self.patience < 1 or self.eval_negatives < 1:
            raise ConfigError("inner_epochs/epochs ≥ 0, patience ≥ 1, eval_negatives ≥ 1 이어야 합니다.")


@dataclass
class EarlyStopping:
    """점수가 patience 에폭 연속 개선되지 않으면 중단. None 점수는 세지 않는다."""
    patience: int = 5
    best_score: Optional[float] = None
    best_epoch: Optional[int] = None
    bad_epochs: int = 0

    def update(self, epoch: int, score: Optional[float]) -> bool:
        """개선되면 best 갱신. 반환값: 중단 여부"""
        if score is None:
            return False
        if self.best_score is None or score > self.best_score:
            self.best_score, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---- 내부 유틸 ----
class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self._t0 = time.perf_counter()

    def ms(self) -> float:
        if not self.enabled:
            return 0.0
        t1 = time.perf_counter()
        out, self._t0 = (t1 - self._t0) * 1000.0, t1
        return out


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _emit(records: List[MetricsRecord], writer: Optional[MetricsWriter], rec: MetricsRecord) -> None:
    records.append(rec)
    if writer is not None:
        writer.write(rec)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# =========================
# 한 스냅샷 학습
# =========================
def forward_states(model: _SnapshotModel, g: SnapshotGraph, states: Sequence[LayerState]):
    """파라미터 고정 eval forward. (Z, 다음 상태), tape를 쓰지 않는다."""
    Z, new_states = model.embed(g, states, "eval")
    return Z, detach_states(new_states)


def train_snapshot(model: _SnapshotModel, g: SnapshotGraph, states: Sequence[LayerState], opt: AdamState,
                   rng: np.random.Generator, target=None,
                   tape: Optional[ad.Tape] = None) -> Tuple[Optional[float], List[LayerState]]:
    """
    (a) forward (b) backward (c) adam_step → 상태 detach.
    양성이 없는 스냅샷은 갱신을 건너뛰고 loss=None.
    tape를 넘기면 reset 후 재사용 (크기 계측용).
    """
    if tape is None:
        tape = ad.Tape()
    else:
        tape.reset()
    bound = model.bind(tape)
    Z, new_states = model.embed(g, states, "train", rng, bound)
    if target is None:
        target = model.default_target(g)
    loss = model.snapshot_loss(bound, Z, g, target, rng)
    if loss is None:
        return None, detach_states(new_states)
    grads = tape.named_grads(tape.backward(loss))
    adam_step(opt, model.parameters(), grads)
    return float(loss.values[0, 0]), detach_states(new_states)


def _make_optimizer(model: _SnapshotModel, cfg: ProtocolConfig) -> AdamState:
    return AdamState.create(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _eval_lp(model: LinkPredictionModel, Z, target: SnapshotGraph, t: int, cfg: ProtocolConfig) -> Optional[float]:
    # 스냅샷별 고정 seed → 반복 평가가 동일
    return model.evaluate(Z, target, cfg.eval_negatives, _rng(cfg.seed, 1, t))


# =========================
# Fixed split (LP)
# =========================
def run_fixed_split(model: LinkPredictionModel, snapshots: SnapshotSequence, cfg: ProtocolConfig,
                    writer: Optional[MetricsWriter] = None) -> List[MetricsRecord]:
    """
    에폭마다 상태를 0으로 리셋하고 학습 구간을 시간순으로 재생.
    평가: 파라미터 고정 후 전체 시퀀스를 다시 흘려 상태를 만들고, t ≥ n_train 스냅샷마다 MRR.
    """
    T = len(snapshots)
    if T < 10:
        raise ConfigError(f"fixed split에는 스냅샷이 10개 이상 필요합니다 (T={T}).")
    n_train = int(math.floor(cfg.train_fraction * T))
    if n_train >= T:
        raise ConfigError(f"평가 스냅샷이 없습니다 (T={T}, n_train={n_train}).")
    logger.info(f"[train] fixed split: T={T}, 학습 {n_train}, 평가 {T - n_train}, epochs={cfg.epochs}")
    opt = _make_optimizer(model, cfg)
    records: List[MetricsRecord] = []
    clock = _Clock(cfg.record_timing)

    for epoch in range(1, cfg.epochs + 1):
        states = model.initial_states()
        losses = []
        # 정답 E_{t+1}도 학습 구간 안에서만
        for t in range(n_train - 1):
            loss, states = train_snapshot(model, snapshots[t], states, opt, _rng(cfg.seed, 0, epoch, t),
                                          target=snapshots[t + 1])
            losses.append(loss)
        _emit(records, writer, MetricsRecord(
            record="epoch", protocol="fixed_split", split="train", epoch=epoch, loss=_mean(losses),
            positives=sum(snapshots[t + 1].num_edges for t in range(n_train - 1)), wall_ms=clock.ms(),
        ))
        logger.info(f"[train] epoch {epoch}/{cfg.epochs} loss={_mean(losses)}")

    states = model.initial_states()
    Z_prev = None
    for t in range(T):
        if t >= n_train:
            score = _eval_lp(model, Z_prev, snapshots[t], t, cfg)
            _emit(records, writer, MetricsRecord(
                protocol="fixed_split", split="eval", snapshot=t, mrr=score,
                positives=snapshots[t].num_edges, wall_ms=clock.ms(),
            ))
        if t < T - 1:
            Z_prev, states = forward_states(model, snapshots[t], states)
    return records


# =========================
# Live update (LP)
# =========================
def run_live_update(model: LinkPredictionModel, snapshots: SnapshotSequence, cfg: ProtocolConfig,
                    writer: Optional[MetricsWriter] = None,
                    trace: Optional[List[Tuple[str, int]]] = None) -> List[MetricsRecord]:
    """
    t = 1..T−1: E_t를 Z_{t−1}(갱신 전 파라미터/상태)로 먼저 평가 → (G_{t−1} → E_t)로 K 에폭 학습
    → 갱신된 파라미터로 상태 전진. trace가 있으면 ("eval", t)/("train", t) 순서를 기록한다.
    """
    T = len(snapshots)
    if T < 2:
        raise ConfigError(f"live update에는 스냅샷이 2개 이상 필요합니다 (T={T}).")
    opt = _make_optimizer(model, cfg)
    records: List[MetricsRecord] = []
    clock = _Clock(cfg.record_timing)
    states = model.initial_states()
    logger.info(f"[train] live update: T={T}, K={cfg.inner_epochs}")

    for t in range(1, T):
        prev, target = snapshots[t - 1], snapshots[t]
        Z_prev, next_states = forward_states(model, prev, states)
        score = _eval_lp(model, Z_prev, target, t, cfg)
        if trace is not None:
            trace.append(("eval", t))

        losses = []
        for k in range(cfg.inner_epochs):
            if trace is not None:
                trace.append(("train", t))
            loss, _ = train_snapshot(model, prev, states, opt, _rng(cfg.seed, 2, t, k), target=target)
            losses.append(loss)
        if cfg.inner_epochs > 0:
            _, next_states = forward_states(model, prev, states)
        states = next_states
        _emit(records, writer, MetricsRecord(
            protocol="live_update", split="eval", snapshot=t, mrr=score, loss=_mean(losses),
            positives=target.num_edges, wall_ms=clock.ms(),
        ))
    return records


# =========================
# Node classification split
# =========================
def nc_split_sizes(T: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_tr = int(math.floor(fractions[0] * T))
    n_va = int(math.floor(fractions[1] * T))
    return n_tr, n_va, T - n_tr - n_va


def _window_scores(model: NodeClassificationModel, snapshots: SnapshotSequence, states, lo: int, hi: int):
    """[lo, hi) 스냅샷을 고정 파라미터로 흘리며 라벨 대상 노드의 logit 수집"""
    per_snapshot = []
    for t in range(lo, hi):
        g, lab = snapshots[t], snapshots.labels[t]
        Z, states = forward_states(model, g, states)
        scores = model.logits(Z, g, lab.nodes).values[:, 0] if lab.nodes.size else np.zeros(0)
        per_snapshot.append((t, scores, np.asarray(lab.labels)))
    return per_snapshot, states


def _replay(model: _SnapshotModel, snapshots: SnapshotSequence, hi: int):
    states = model.initial_states()
    for t in range(hi):
        _, states = forward_states(model, snapshots[t], states)
    return states


def _pooled_auc(window) -> Optional[float]:
    if not window:
        return None
    scores = np.concatenate([s for _, s, _ in window])
    labels = np.concatenate([y for _, _, y in window])
    return auc(scores, labels)


def run_nc(model: NodeClassificationModel, snapshots: SnapshotSequence, cfg: ProtocolConfig,
           writer: Optional[MetricsWriter] = None) -> List[MetricsRecord]:
    """
    앞 70% 학습(상태 carry, detach), 에폭마다 가운데 15%에서 pooled 검증 AUC.
    검증 AUC가 patience 에폭 연속 개선되지 않으면 중단. test는 최적 에폭 파라미터로.
    """
    if snapshots.labels is None:
        raise ConfigError("노드 분류에는 스냅샷 라벨이 필요합니다.")
    T = len(snapshots)
    n_tr, n_va, n_te = nc_split_sizes(T, cfg.nc_fractions)
    if min(n_tr, n_va, n_te) < 1:
        raise ConfigError(f"분할이 비어 있습니다: T={T} → {n_tr}/{n_va}/{n_te}")
    logger.info(f"[train] nc split: T={T} → {n_tr}/{n_va}/{n_te}, patience={cfg.patience}")
    opt = _make_optimizer(model, cfg)
    stopper = EarlyStopping(cfg.patience)
    best_params: Optional[Dict[str, np.ndarray]] = None
    records: List[MetricsRecord] = []
    clock = _Clock(cfg.record_timing)

    for epoch in range(1, cfg.epochs + 1):
        states = model.initial_states()
        losses = []
        for t in range(n_tr):
            loss, states = train_snapshot(model, snapshots[t], states, opt, _rng(cfg.seed, 3, epoch, t),
                                          target=snapshots.labels[t])
            losses.append(loss)
        window, _ = _window_scores(model, snapshots, _replay(model, snapshots, n_tr), n_tr, n_tr + n_va)
        val_auc = _pooled_auc(window)
        _emit(records, writer, MetricsRecord(
            record="epoch", protocol="nc_split", split="val", epoch=epoch, loss=_mean(losses), auc=val_auc,
            positives=sum(s.size for _, s, _ in window), wall_ms=clock.ms(),
        ))
        stop = stopper.update(epoch, val_auc)
        if stopper.best_epoch == epoch:
            best_params = model.snapshot_params()
        logger.info(f"[train] epoch {epoch} loss={_mean(losses)} val_auc={val_auc} best={stopper.best_epoch}")
        if stop:
            logger.info(f"[train] early stop: epoch {epoch}, best epoch {stopper.best_epoch}")
            break

    if best_params is not None:
        model.restore_params(best_params)
    window, _ = _window_scores(model, snapshots, _replay(model, snapshots, n_tr + n_va), n_tr + n_va, T)
    for t, scores, labels in window:
        _emit(records, writer, MetricsRecord(
            protocol="nc_split", split="test", snapshot=t, auc=auc(scores, labels),
            positives=int(scores.size), wall_ms=clock.ms(),
        ))
    records.append(MetricsRecord(record="epoch", protocol="nc_split", split="test",
                                 epoch=stopper.best_epoch, auc=_pooled_auc(window),
                                 positives=sum(s.size for _, s, _ in window)))
    if writer is not None:
        writer.write(records[-1])
    return records


# =========================
# 요약
# =========================
def summarize(records: Sequence[MetricsRecord], protocol: str, task: str, model: Optional[_SnapshotModel] = None,
              config: Optional[Dict] = None) -> SummaryRecord:
    evals = [r for r in records if r.record == "snapshot"]
    epochs = [r for r in records if r.record == "epoch" and r.split in ("train", "val")]
    summary = SummaryRecord(
        protocol=protocol, task=task, epochs_run=len(epochs),
        snapshots_evaluated=len(evals), config=config or {},
        checksum=model.checksum() if model is not None else None,
    )
    if task == "lp":
        summary.mean_mrr = _mean([r.mrr for r in evals])
    else:
        vals = [r for r in epochs if r.auc is not None]
        if vals:
            best = max(vals, key=lambda r: r.auc)
            summary.best_val_auc, summary.best_epoch = best.auc, best.epoch
        pooled = [r for r in records if r.record == "epoch" and r.split == "test"]
        summary.test_auc = pooled[-1].auc if pooled else None
    return summary


def run_protocol(model: _SnapshotModel, snapshots: SnapshotSequence, cfg: ProtocolConfig,
                 writer: Optional[MetricsWriter] = None) -> List[MetricsRecord]:
    runners: Dict[str, Callable] = {
        "fixed_split": run_fixed_split,
        "live_update": run_live_update,
        "nc_split": run_nc,
    }
    if cfg.mode == "nc_split" and not isinstance(model, NodeClassificationModel):
        raise ConfigError("nc_split에는 노드 분류 모델이 필요합니다.")
    if cfg.mode != "nc_split" and not isinstance(model, LinkPredictionModel):
        raise ConfigError(f"{cfg.mode}에는 링크 예측 모델이 필요합니다.")
    return runners[cfg.mode](model, snapshots, cfg, writer)
