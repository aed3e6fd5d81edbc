# src/errors.py
"""
공통 예외/경고 정의
- 모든 예외는 SistError를 상속하고, 동시에 표준 예외(ValueError 등)도 상속한다.
  (호출부에서 except ValueError 로 잡아도 동작하도록)
"""

from __future__ import annotations
from typing import Optional


class SistError(Exception):
    """패키지 공통 예외"""


class ShapeError(SistError, ValueError):
    """행렬 shape 불일치"""


class BoundsError(SistError, IndexError):
    """인덱스/슬라이스 범위 초과"""


class DomainError(SistError, ValueError):
    """정의역 밖의 입력 (노드 번호, Δ ≤ 0, N < 2 등)"""


class ConfigError(SistError, ValueError):
    """설정/프로토콜 구성 오류 (CLI에서 exit 2)"""


class TapeError(SistError, RuntimeError):
    """gradient tape 사용 규약 위반 (중복 backward, tape 혼용 등)"""


class DataFormatError(SistError, ValueError):
    """입력 파일 파싱 실패. line은 1부터 시작하는 파일 행 번호"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class EmptyBatchWarning(UserWarning):
    """positive가 없는 배치 → loss 0으로 정의"""


class ClassWeightFallbackWarning(UserWarning):
    """단일 클래스 배치에서 w⁺ = 1 로 대체"""
