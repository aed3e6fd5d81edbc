# src/schema.py
"""
출력 레코드 스키마 (JSON-lines)
- MetricsRecord: 스냅샷별 평가 / 에폭별 학습 loss
- SummaryRecord: 실행 요약 (항상 파일 마지막 줄)
- CheckReport: 검증 스위트 결과. passed ⇔ deviation ≤ tolerance 이고 conditions 모두 참
- MetricsWriter: append-only 기록기 (중단된 실행도 그때까지의 레코드가 남는다)

사용 예시는 파일 하단의 __main__ 스니펫 참조.
"""

from __future__ import annotations
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union
import json
import math

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ---------------------------
# 지표 레코드
# ---------------------------
class MetricsRecord(BaseModel):
    """스냅샷 1개(또는 에폭 1개)의 결과"""
    model_config = ConfigDict(extra="forbid")

    record: Literal["snapshot", "epoch"] = "snapshot"
    protocol: str = Field(description="fixed_split | live_update | nc_split")
    split: Optional[str] = Field(default=None, description="train | val | test | eval")
    snapshot: Optional[int] = Field(default=None, ge=0, description="0-based 스냅샷 인덱스")
    epoch: Optional[int] = Field(default=None, ge=0)
    mrr: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    auc: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    loss: Optional[float] = None
    positives: int = Field(default=0, ge=0, description="양성 간선 수(LP) 또는 라벨 대상 노드 수(NC)")
    wall_ms: float = Field(default=0.0, ge=0.0)

    @field_validator("loss")
    @classmethod
    def _finite_loss(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not math.isfinite(v):
            raise ValueError(f"loss가 유한하지 않습니다: {v}")
        return v


class SummaryRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record: Literal["summary"] = "summary"
    protocol: str
    task: str
    mean_mrr: Optional[float] = None
    test_auc: Optional[float] = None
    best_val_auc: Optional[float] = None
    best_epoch: Optional[int] = None
    epochs_run: int = 0
    snapshots_evaluated: int = 0
    checksum: Optional[str] = Field(default=None, description="평가에 쓰인 파라미터의 sha256")
    config: Dict[str, Any] = Field(default_factory=dict)


# ---------------------------
# 검증 리포트
# ---------------------------
class CheckReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record: Literal["check"] = "check"
    name: str
    deviation: float = Field(description="최대 절대 편차 (또는 상대 오차)")
    tolerance: float = Field(ge=0.0)
    passed: bool
    trials: int = Field(default=1, ge=0)
    seed: Optional[int] = None
    conditions: Dict[str, bool] = Field(default_factory=dict, description="편차 외 통과 조건")
    details: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _passed_matches(self) -> "CheckReport":
        expected = (self.deviation <= self.tolerance) and all(self.conditions.values())
        if self.passed != expected:
            raise ValueError(f"passed={self.passed} 이지만 편차/조건으로는 {expected} 입니다.")
        return self

    @classmethod
    def build(cls, name: str, deviation: float, tolerance: float, **kw) -> "CheckReport":
        """passed를 편차/조건에서 계산. NaN 편차는 실패로 본다."""
        deviation = float(deviation)
        if math.isnan(deviation):
            deviation = math.inf
        conditions = {k: bool(v) for k, v in kw.pop("conditions", {}).items()}
        passed = deviation <= tolerance and all(conditions.values())
        return cls(name=name, deviation=deviation, tolerance=tolerance, passed=passed, conditions=conditions, **kw)


Record = Union[MetricsRecord, SummaryRecord, CheckReport]


# ---------------------------
# 기록기
# ---------------------------
class MetricsWriter:
    """JSON-lines append 기록기. 한 줄 = 한 레코드, 매 줄 flush"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a", encoding="utf-8")

    def write(self, record: Record) -> None:
        self._fh.write(record.model_dump_json(exclude_none=True) + "\n")
        self._fh.flush()

    def write_all(self, records: Iterable[Record]) -> None:
        for r in records:
            self.write(r)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: Union[str, Path]) -> List[Dict[str, Any]]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


# ---- 스모크 테스트 ----
if __name__ == "__main__":
    r = MetricsRecord(protocol="fixed_split", split="eval", snapshot=27, mrr=0.5, positives=10, wall_ms=1.5)
    print(r.model_dump_json(exclude_none=True))
    rep = CheckReport.build("witness", deviation=0.0, tolerance=1e-12, conditions={"fit_residual_gt_0.1": True})
    assert rep.passed
    try:
        CheckReport(name="bad", deviation=1.0, tolerance=0.1, passed=True)
    except ValueError as e:
        print("검증 오류(예상):", e.__class__.__name__)
    print("schema.py smoke test OK ✔")
