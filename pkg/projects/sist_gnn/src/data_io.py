# src/data_io.py
"""
데이터 입출력 / 스냅샷 이산화 / 합성 그래프
- ingest_edgelist: CSV/TSV 간선 목록 → 주/일 단위(또는 고정 개수) 스냅샷
- load_event_stream + discretize_events: JODIE 형식 이벤트 스트림 → Δ시간 창 스냅샷 + 노드 라벨
- generate_synthetic: 주기 k로 반복되는 base 간선 + 잡음 간선 (데스크 규모 검증용)
- save_sequence / load_sequence: SISTSEQ1 캐시

버킷 규칙: bucket = floor((ts − ts₀)/w), ts₀ = 가장 이른 timestamp.
창은 스트림 시작 기준 [kw, (k+1)w). 중간의 빈 창도 빈 스냅샷으로 남긴다.

필요 패키지:
  pip install pandas numpy
"""

from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging
import struct

import numpy as np

try:
    import pandas as pd
except ModuleNotFoundError as e:
    raise ModuleNotFoundError(
        "pandas가 필요합니다. 가상환경 활성화 후 `pip install pandas`를 실행하세요."
    ) from e

from errors import ConfigError, DataFormatError, DomainError
from graph_core import SnapshotGraph

logger = logging.getLogger(__name__)

WEEK_SECONDS = 7 * 86400
DAY_SECONDS = 86400
SNAPSHOT_RULES = ("weekly", "daily", "fixed_count")
SEQUENCE_MAGIC = b"SISTSEQ1"

# 헤더 별칭 (Bitcoin trust 파일의 source/target/rating/time 포함)
_ALIASES = {
    "src": {"src", "source", "u", "from", "user_id", "sender"},
    "dst": {"dst", "target", "v", "to", "item_id", "receiver"},
    "timestamp": {"timestamp", "time", "ts", "t", "unix_time"},
    "weight": {"weight", "rating", "w", "sign"},
}
_DEFAULT_COLUMNS = ("src", "dst", "timestamp", "weight")


# =========================
# 타입
# =========================
@dataclass(frozen=True)
class NodeLabels:
    """스냅샷 t의 라벨 대상 S_t와 라벨 y"""
    nodes: np.ndarray
    labels: np.ndarray

    @property
    def positives(self) -> int:
        return int(np.asarray(self.labels).sum())


@dataclass
class EventStream:
    src: np.ndarray              # 사용자 인덱스 0..U−1
    dst: np.ndarray              # 아이템 인덱스 U..U+I−1
    timestamps: np.ndarray       # 초, 비감소
    labels: np.ndarray           # state_label ∈ {0,1}
    edge_features: np.ndarray    # [M × d_e]
    num_users: int
    num_items: int
    node_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=object))
    source_hash: str = ""

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_events(self) -> int:
        return int(self.src.size)

    @property
    def roles(self) -> np.ndarray:
        """0 = source(사용자), 1 = destination(아이템)"""
        return np.concatenate([np.zeros(self.num_users), np.ones(self.num_items)])

    @property
    def positive_rate(self) -> float:
        return float(self.labels.mean()) if self.labels.size else 0.0


@dataclass
class SnapshotSequence:
    snapshots: List[SnapshotGraph]
    num_nodes: int
    labels: Optional[List[NodeLabels]] = None
    roles: Optional[np.ndarray] = None
    node_ids: Optional[np.ndarray] = None         # node_ids[i] = 원래 식별자
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[SnapshotGraph]:
        return iter(self.snapshots)

    def __getitem__(self, t: int) -> SnapshotGraph:
        return self.snapshots[t]

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    @property
    def total_edges(self) -> int:
        return sum(g.num_edges for g in self.snapshots)

    @property
    def edge_dim(self) -> int:
        for g in self.snapshots:
            if g.edge_features is not None:
                return int(g.edge_features.shape[1])
        return int(self.metadata.get("edge_dim", 0))

    def with_snapshots(self, snapshots: List[SnapshotGraph]) -> "SnapshotSequence":
        return SnapshotSequence(snapshots, self.num_nodes, self.labels, self.roles, self.node_ids, dict(self.metadata))


@dataclass
class SyntheticSpec:
    num_nodes: int = 50
    period: int = 2
    edges_per_snapshot: int = 100
    recurrence_prob: float = 1.0
    noise_rate: float = 0.0          # 스냅샷당 잡음 간선 = round(noise_rate × edges_per_snapshot)
    num_snapshots: int = 200
    seed: int = 0


@dataclass(frozen=True)
class SequenceStats:
    num_nodes: int
    total_edges: int
    num_snapshots: int
    window_positive_rate: Optional[float] = None   # 라벨 대상 (노드, 스냅샷) 중 양성 비율
    event_positive_rate: Optional[float] = None    # 원 이벤트 중 state_label=1 비율


# =========================
# 내부 유틸
# =========================
def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _first_line(path: Path) -> Tuple[Optional[str], int]:
    with path.open("r", encoding="utf-8-sig") as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                return line.rstrip("\r\n"), i
    return None, 0


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _detect_layout(path: Path) -> Tuple[str, bool, int]:
    """(구분자, 헤더 여부, 첫 데이터 줄 번호). 빈 파일이면 DataFormatError"""
    line, lineno = _first_line(path)
    if line is None:
        raise DataFormatError(f"빈 파일입니다: {path}")
    delim = "\t" if "\t" in line else ","
    tokens = [t.strip() for t in line.split(delim)]
    has_header = not all(_is_number(t) for t in tokens if t)
    return delim, has_header, lineno + (1 if has_header else 0)


def _resolve_columns(header: Optional[List[str]], columns: Optional[Sequence[str]], width: int) -> Dict[str, int]:
    if columns:
        names = [c.strip().lower() for c in columns]
    elif header is not None:
        names = []
        for h in header:
            key = h.strip().lower()
            names.append(next((canon for canon, al in _ALIASES.items() if key in al), key))
    else:
        names = list(_DEFAULT_COLUMNS[:width])
    pos = {name: i for i, name in enumerate(names)}
    missing = [c for c in ("src", "dst", "timestamp") if c not in pos]
    if missing:
        raise ConfigError(f"필수 열이 없습니다: {missing} (열: {names})")
    return pos


def _numeric_column(df: "pd.DataFrame", col: int, name: str, first_line: int) -> np.ndarray:
    vals = pd.to_numeric(df[col], errors="coerce")
    bad = vals.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataFormatError(f"{name} 값이 숫자가 아닙니다: {df[col].iloc[row]!r}", line=first_line + row)
    return vals.to_numpy(dtype=np.float64)


def _read_table(path: Path) -> Tuple["pd.DataFrame", Optional[List[str]], int]:
    delim, has_header, first_data = _detect_layout(path)
    try:
        df = pd.read_csv(
            path, sep=delim, header=None, skiprows=first_data - 1, dtype=str,
            keep_default_na=False, skip_blank_lines=True, engine="python",
        )
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"데이터 행이 없습니다: {path}") from e
    except pd.errors.ParserError as e:
        raise DataFormatError(f"CSV 파싱 실패: {e}") from e
    if df.empty:
        raise DataFormatError(f"데이터 행이 없습니다: {path}")
    # 열이 모자란 행은 빈 문자열 → 숫자 변환 단계에서 줄 번호와 함께 걸러진다
    df = df.fillna("").apply(lambda s: s.str.strip())
    header = None
    if has_header:
        line, _ = _first_line(path)
        header = [h.strip() for h in line.split(delim)]
    return df, header, first_data


def bucket_index(timestamps: np.ndarray, width: float) -> np.ndarray:
    """floor((ts − ts₀)/w). 스트림 시작 기준 반구간 [kw, (k+1)w)"""
    if width <= 0:
        raise DomainError(f"창 폭은 양수여야 합니다: {width}")
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.floor((ts - ts.min()) / width).astype(np.int64)


def _relabel(tokens: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """등장 순서대로 0..N−1. (인덱스, node_ids)"""
    ids = pd.unique(tokens)
    index = pd.Index(ids).get_indexer(tokens)
    return index.astype(np.int64), np.asarray(ids, dtype=object)


def _split_buckets(bucket: np.ndarray, num_buckets: int) -> List[np.ndarray]:
    """bucket별 행 위치 (입력 순서 유지)"""
    order = np.argsort(bucket, kind="stable")
    bounds = np.searchsorted(bucket[order], np.arange(num_buckets + 1))
    return [order[bounds[t]:bounds[t + 1]] for t in range(num_buckets)]


# =========================
# 간선 목록
# =========================
def ingest_edgelist(path: Union[str, Path], snapshot_rule: str = "weekly",
                    columns: Optional[Sequence[str]] = None, fixed_count: int = 1000) -> SnapshotSequence:
    """
    src,dst,timestamp[,weight] (쉼표/탭 자동 판별, 헤더 선택).
    헤더 없는 Bitcoin 원본(SOURCE,TARGET,RATING,TIME)은 columns=("src","dst","weight","timestamp").
    """
    path = Path(path)
    if snapshot_rule not in SNAPSHOT_RULES:
        raise ConfigError(f"지원하지 않는 snapshot_rule: {snapshot_rule} (가능: {', '.join(SNAPSHOT_RULES)})")
    df, header, first_data = _read_table(path)
    pos = _resolve_columns(header, columns, df.shape[1])
    for name in ("src", "dst"):
        empty = (df[pos[name]] == "").to_numpy()
        if empty.any():
            raise DataFormatError(f"{name} 값이 비어 있습니다", line=first_data + int(np.flatnonzero(empty)[0]))
    ts = _numeric_column(df, pos["timestamp"], "timestamp", first_data)
    weights = _numeric_column(df, pos["weight"], "weight", first_data) if "weight" in pos and pos["weight"] < df.shape[1] else None

    order = np.argsort(ts, kind="stable")
    src_tok = df[pos["src"]].to_numpy()[order]
    dst_tok = df[pos["dst"]].to_numpy()[order]
    ts = ts[order]
    weights = weights[order] if weights is not None else None

    idx, node_ids = _relabel(np.column_stack([src_tok, dst_tok]).ravel())
    src, dst = idx[0::2], idx[1::2]
    n = int(node_ids.size)

    if snapshot_rule == "fixed_count":
        if fixed_count < 1:
            raise ConfigError("fixed_count는 1 이상이어야 합니다.")
        bucket = np.arange(ts.size, dtype=np.int64) // fixed_count
        width = None
    else:
        width = WEEK_SECONDS if snapshot_rule == "weekly" else DAY_SECONDS
        bucket = bucket_index(ts, width)
    num_buckets = int(bucket.max()) + 1

    snapshots = []
    for t, rows in enumerate(_split_buckets(bucket, num_buckets)):
        snapshots.append(SnapshotGraph(
            n, src[rows], dst[rows], index=t, edge_timestamps=ts[rows],
            weights=weights[rows] if weights is not None else None,
        ))
    seq = SnapshotSequence(snapshots, n, node_ids=node_ids, metadata={
        "source": str(path), "source_hash": _file_hash(path), "snapshot_rule": snapshot_rule,
        "bucket_seconds": width, "rows": int(ts.size),
    })
    logger.info(f"[data] {path.name}: N={n}, |E|={ts.size}, T={num_buckets} ({snapshot_rule})")
    return seq


# =========================
# 이벤트 스트림
# =========================
def load_event_stream(path: Union[str, Path]) -> EventStream:
    """JODIE 형식: user_id,item_id,timestamp,state_label,feature_0..feature_{d_e−1}"""
    path = Path(path)
    df, _header, first_data = _read_table(path)
    if df.shape[1] < 4:
        raise DataFormatError(f"이벤트 스트림은 최소 4열이 필요합니다 (현재 {df.shape[1]}열)")
    ts = _numeric_column(df, 2, "timestamp", first_data)
    labels = _numeric_column(df, 3, "state_label", first_data)
    bad = ~np.isin(labels, (0.0, 1.0))
    if bad.any():
        raise DataFormatError("state_label은 0/1 이어야 합니다", line=first_data + int(np.flatnonzero(bad)[0]))
    feats = np.column_stack([_numeric_column(df, c, f"feature_{c - 4}", first_data)
                             for c in range(4, df.shape[1])]) if df.shape[1] > 4 else np.zeros((ts.size, 0))

    order = np.argsort(ts, kind="stable")
    users, user_ids = _relabel(df[0].to_numpy()[order])
    items, item_ids = _relabel(df[1].to_numpy()[order])
    u = int(user_ids.size)
    node_ids = np.concatenate([
        np.array([f"u:{x}" for x in user_ids], dtype=object),
        np.array([f"i:{x}" for x in item_ids], dtype=object),
    ])
    stream = EventStream(
        src=users, dst=items + u, timestamps=ts[order], labels=labels[order].astype(np.int64),
        edge_features=feats[order], num_users=u, num_items=int(item_ids.size),
        node_ids=node_ids, source_hash=_file_hash(path),
    )
    logger.info(f"[data] {path.name}: 사용자 {u}, 아이템 {stream.num_items}, 이벤트 {stream.num_events}, "
                f"d_e={feats.shape[1]}, 양성 비율 {stream.positive_rate:.4%}")
    return stream


def discretize_events(stream: EventStream, delta_hours: float) -> SnapshotSequence:
    """Δ시간 창으로 묶기. S_t = 창 안에서 이벤트를 낸 source, y = 창 안 라벨의 OR"""
    if not delta_hours > 0:
        raise DomainError(f"Δ는 양수여야 합니다: {delta_hours}")
    width = float(delta_hours) * 3600.0
    n = stream.num_nodes
    bucket = bucket_index(stream.timestamps, width)
    num_buckets = int(bucket.max()) + 1 if bucket.size else 0
    snapshots: List[SnapshotGraph] = []
    labels: List[NodeLabels] = []
    for t, rows in enumerate(_split_buckets(bucket, num_buckets)):
        src = stream.src[rows]
        snapshots.append(SnapshotGraph(
            n, src, stream.dst[rows], index=t,
            edge_features=stream.edge_features[rows], edge_timestamps=stream.timestamps[rows],
        ))
        nodes, inv = np.unique(src, return_inverse=True)
        y = np.zeros(nodes.size, dtype=np.int64)
        np.maximum.at(y, inv, stream.labels[rows])
        labels.append(NodeLabels(nodes, y))
    logger.info(f"[data] Δ={delta_hours}h → T={num_buckets}")
    return SnapshotSequence(snapshots, n, labels=labels, roles=stream.roles, node_ids=stream.node_ids, metadata={
        "delta_hours": float(delta_hours), "source_hash": stream.source_hash,
        "edge_dim": int(stream.edge_features.shape[1]), "event_positive_rate": stream.positive_rate,
        "events": stream.num_events,
    })


# =========================
# 합성 데이터
# =========================
def _sample_pairs(rng: np.random.Generator, num_nodes: int, count: int, replace: bool) -> np.ndarray:
    """self-loop 없는 방향 쌍. 쌍 id c ∈ [0, N(N−1)) → (u, v)"""
    total = num_nodes * (num_nodes - 1)
    codes = rng.choice(total, size=count, replace=replace) if count else np.zeros(0, dtype=np.int64)
    u = codes // (num_nodes - 1)
    r = codes % (num_nodes - 1)
    v = r + (r >= u)
    return np.stack([u, v], axis=1).astype(np.int64)


def generate_synthetic(spec: SyntheticSpec) -> SnapshotSequence:
    """
    위상 t mod k마다 고정 base 간선 집합. 각 base 간선은 recurrence_prob로 등장,
    잡음 간선은 균일 무작위. metadata["base_sets"], ["included"]에 정답 일정을 남긴다.
    """
    n, k = spec.num_nodes, spec.period
    if n < 2 or k < 1 or spec.num_snapshots < 1:
        raise DomainError("num_nodes ≥ 2, period ≥ 1, num_snapshots ≥ 1 이어야 합니다.")
    if spec.edges_per_snapshot > n * (n - 1):
        raise DomainError(f"간선 수 {spec.edges_per_snapshot}가 가능한 최대 {n * (n - 1)}를 넘습니다.")
    if not (0.0 <= spec.recurrence_prob <= 1.0) or spec.noise_rate < 0:
        raise DomainError("recurrence_prob ∈ [0,1], noise_rate ≥ 0 이어야 합니다.")
    rng = np.random.default_rng(spec.seed)
    base_sets = [_sample_pairs(rng, n, spec.edges_per_snapshot, replace=False) for _ in range(k)]
    n_noise = int(round(spec.noise_rate * spec.edges_per_snapshot))
    snapshots, included = [], []
    for t in range(spec.num_snapshots):
        base = base_sets[t % k]
        keep = rng.random(base.shape[0]) < spec.recurrence_prob
        noise = _sample_pairs(rng, n, n_noise, replace=True)
        edges = np.vstack([base[keep], noise])
        snapshots.append(SnapshotGraph(n, edges[:, 0], edges[:, 1], index=t))
        included.append(keep)
    return SnapshotSequence(snapshots, n, metadata={
        "synthetic": True, "period": k, "seed": spec.seed,
        "base_sets": base_sets, "included": included,
    })


# =========================
# 통계
# =========================
def sequence_stats(seq: SnapshotSequence) -> SequenceStats:
    window_rate = None
    if seq.labels:
        total = sum(int(l.nodes.size) for l in seq.labels)
        pos = sum(l.positives for l in seq.labels)
        window_rate = pos / total if total else None
    return SequenceStats(
        num_nodes=seq.num_nodes, total_edges=seq.total_edges, num_snapshots=seq.num_snapshots,
        window_positive_rate=window_rate, event_positive_rate=seq.metadata.get("event_positive_rate"),
    )


# =========================
# SISTSEQ1 캐시
# =========================
# 레이아웃 (모두 little-endian):
#   "SISTSEQ1" | u64 N | u64 T | u64 d_e
#   스냅샷마다: u64 |E| | u8 flags(1=timestamps, 2=weights, 4=features)
#               i64 src[|E|] | i64 dst[|E|] | [f64 ts[|E|]] | [f64 w[|E|]] | [f64 feat[|E|×d_e]]
#   u8 has_labels | (스냅샷마다 u64 |S| | i64 nodes[|S|] | i64 y[|S|])
#   u64 메타데이터 길이 | UTF-8 JSON (Δ, 원본 해시, 역할, node_ids 등)
_FLAG_TS, _FLAG_W, _FLAG_FEAT = 1, 2, 4


def save_sequence(seq: SnapshotSequence, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d_e = seq.edge_dim
    with path.open("wb") as fh:
        fh.write(SEQUENCE_MAGIC)
        fh.write(struct.pack("<QQQ", seq.num_nodes, seq.num_snapshots, d_e))
        for g in seq.snapshots:
            flags = ((_FLAG_TS if g.edge_timestamps is not None else 0)
                     | (_FLAG_W if g.weights is not None else 0)
                     | (_FLAG_FEAT if g.edge_features is not None else 0))
            fh.write(struct.pack("<QB", g.num_edges, flags))
            fh.write(g.src.astype("<i8").tobytes())
            fh.write(g.dst.astype("<i8").tobytes())
            for arr in (g.edge_timestamps, g.weights, g.edge_features):
                if arr is not None:
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<B", 1 if seq.labels is not None else 0))
        for lab in seq.labels or []:
            fh.write(struct.pack("<Q", lab.nodes.size))
            fh.write(np.asarray(lab.nodes, dtype="<i8").tobytes())
            fh.write(np.asarray(lab.labels, dtype="<i8").tobytes())
        meta = {k: v for k, v in seq.metadata.items() if k not in ("base_sets", "included")}
        meta["roles"] = None if seq.roles is None else np.asarray(seq.roles).tolist()
        meta["node_ids"] = None if seq.node_ids is None else [str(x) for x in seq.node_ids]
        blob = json.dumps(meta, ensure_ascii=False).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    logger.info(f"[data] 캐시 저장: {path}")
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(f"시퀀스 캐시가 잘렸습니다: {self.path}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=dtype).copy()


def load_sequence(path: Union[str, Path]) -> SnapshotSequence:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(8) != SEQUENCE_MAGIC:
        raise DataFormatError(f"SISTSEQ1 파일이 아닙니다: {path}")
    n, t_count, d_e = r.unpack("<QQQ")
    snapshots = []
    for t in range(t_count):
        e, flags = r.unpack("<QB")
        src = r.array("<i8", e)
        dst = r.array("<i8", e)
        ts = r.array("<f8", e) if flags & _FLAG_TS else None
        w = r.array("<f8", e) if flags & _FLAG_W else None
        feats = r.array("<f8", e * d_e).reshape(e, d_e) if flags & _FLAG_FEAT else None
        snapshots.append(SnapshotGraph(int(n), src, dst, index=t, edge_features=feats, edge_timestamps=ts, weights=w))
    (has_labels,) = r.unpack("<B")
    labels = None
    if has_labels:
        labels = []
        for _ in range(t_count):
            (s,) = r.unpack("<Q")
            labels.append(NodeLabels(r.array("<i8", s), r.array("<i8", s)))
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    roles = meta.pop("roles", None)
    node_ids = meta.pop("node_ids", None)
    return SnapshotSequence(
        snapshots, int(n), labels=labels,
        roles=None if roles is None else np.asarray(roles, dtype=np.float64),
        node_ids=None if node_ids is None else np.asarray(node_ids, dtype=object),
        metadata=meta,
    )
