# src/logging_util.py
# 일자별 로깅 설정/회전 (logs/log_YYYYMMDD.txt)

from __future__ import annotations
from datetime import datetime
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Optional, Union
import logging
import os
import sys

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_MARK = "_sist_handler"


class _ConsoleHandler(logging.StreamHandler):
    """emit 시점의 sys.stderr로 출력 (테스트 러너가 stderr를 바꿔 끼워도 동작)"""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value):
        pass


def _log_dir(log_dir: Optional[Union[str, Path]]) -> Path:
    if log_dir:
        return Path(log_dir)
    env = os.getenv("SIST_LOG_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[1] / "logs"


def setup_logging(log_dir: Optional[Union[str, Path]] = None, level: str = "INFO") -> Path:
    """콘솔(stderr) + 자정 회전 파일 핸들러. 여러 번 불러도 핸들러는 한 벌만 남는다."""
    root = logging.getLogger()
    root.setLevel(level.upper())
    directory = _log_dir(log_dir)
    path = directory / f"log_{datetime.now():%Y%m%d}.txt"
    for h in list(root.handlers):
        if getattr(h, _MARK, False):
            root.removeHandler(h)
            h.close()

    directory.mkdir(parents=True, exist_ok=True)
    fmt = logging.Formatter(_FORMAT)
    console = _ConsoleHandler()
    file_handler = TimedRotatingFileHandler(path, when="midnight", encoding="utf-8")
    for h in (console, file_handler):
        h.setFormatter(fmt)
        setattr(h, _MARK, True)
        root.addHandler(h)
    return path
