# src/config.py
"""
실행 설정 (단일 소스)
- configs/run_config.yaml 이 없으면 '프로젝트 루트/configs'에 템플릿 자동 생성
- 우선순위: CLI 플래그 > YAML 설정 파일 > dataclass 기본값
- 태스크별 기본값(d_h, weighting, protocol)은 RunConfig.resolved()에서 채운다
- dump_config(): 완전히 해석된 설정을 YAML로 기록 (그 파일로 같은 실행을 재현)

필요 패키지:
  pip install pyyaml
"""

from __future__ import annotations
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import logging
import os

# ---------- 의존성 ----------
try:
    import yaml
except ModuleNotFoundError as e:
    raise ModuleNotFoundError(
        "PyYAML이 필요합니다. 가상환경 활성화 후 `pip install pyyaml`을 실행하세요."
    ) from e

from data_io import SNAPSHOT_RULES, SyntheticSpec
from errors import ConfigError, DomainError
from graph_core import EdgeTypeGates
from heads_metrics import WEIGHTINGS
from nn_layers import AGGREGATIONS, BACKBONES
from training import PROTOCOLS, ProtocolConfig

logger = logging.getLogger(__name__)

COMMANDS = ("train", "verify", "sweep", "ingest")
TASKS = ("lp", "nc")
TASK_DEFAULTS = {
    "lp": {"d_h": 128, "protocol": "fixed_split", "weighting": "none"},
    "nc": {"d_h": 256, "protocol": "nc_split", "weighting": "balanced"},
}


# =========================
# 경로 유틸
# =========================
def _project_root() -> Path:
    """프로젝트 루트: src/ 의 부모 디렉터리"""
    return Path(__file__).resolve().parents[1]


def default_config_path(yaml_path: Optional[Union[str, Path]] = None) -> Path:
    """
    우선순위:
      1) 함수 인자 yaml_path (--config)
      2) SIST_CONFIG_DIR 환경변수 + 'run_config.yaml'
      3) 프로젝트 루트/configs/run_config.yaml
    """
    if yaml_path:
        return Path(yaml_path)
    env_dir = os.getenv("SIST_CONFIG_DIR")
    if env_dir:
        return Path(env_dir) / "run_config.yaml"
    return _project_root() / "configs" / "run_config.yaml"


# =========================
# 설정 데이터클래스
# =========================
@dataclass
class GateConfig:
    """모든 층에 같은 edge-type gate를 쓴다"""
    alpha_intra: float = 1.0
    alpha_cross: float = 1.0
    alpha_self: float = 1.0

    def gates(self) -> EdgeTypeGates:
        return EdgeTypeGates(self.alpha_intra, self.alpha_cross, self.alpha_self)


@dataclass
class SyntheticConfig:
    enabled: bool = False
    num_nodes: int = 50
    period: int = 2
    edges_per_snapshot: int = 100
    recurrence_prob: float = 1.0
    noise_rate: float = 0.0
    num_snapshots: int = 200

    def spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.num_nodes, self.period, self.edges_per_snapshot,
                             self.recurrence_prob, self.noise_rate, self.num_snapshots, seed)


@dataclass
class RunConfig:
    command: str = "train"
    data: Optional[str] = None           # csv/tsv 간선 목록, JODIE 이벤트 파일 또는 .sistseq 캐시
    task: str = "lp"                     # lp | nc
    protocol: Optional[str] = None       # fixed_split | live_update | nc_split (None → 태스크 기본값)
    d_h: Optional[int] = None            # None → 128 (lp) / 256 (nc)
    num_layers: int = 2
    backbone: str = "gcn_mean"
    aggr: str = "mean"
    dropout: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 100
    delta_hours: float = 6.0
    weighting: Optional[str] = None      # None → balanced (nc)
    inner_epochs: int = 10
    seed: int = 0
    num_seeds: int = 1                   # >1 → seed, seed+1, … 반복 실행 후 mean±std
    out: Optional[str] = None
    snapshot_rule: str = "weekly"        # weekly | daily | fixed_count
    fixed_count: int = 1000
    columns: Optional[List[str]] = None  # 헤더 없는 파일의 열 순서
    symmetrize: bool = False
    eval_negatives: int = 1000
    patience: int = 5
    train_fraction: float = 0.9
    nc_fractions: List[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    record_timing: bool = True
    gates: GateConfig = field(default_factory=GateConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def resolved(self) -> "RunConfig":
        """태스크 기본값을 채운 사본"""
        if self.task not in TASKS:
            raise ConfigError(f"지원하지 않는 task: {self.task} (가능: {', '.join(TASKS)})")
        d = TASK_DEFAULTS[self.task]
        protocol = (self.protocol or d["protocol"]).replace("-", "_")
        return replace(
            self,
            protocol=protocol,
            d_h=self.d_h if self.d_h is not None else d["d_h"],
            weighting=self.weighting or d["weighting"],
            gates=replace(self.gates),
            synthetic=replace(self.synthetic),
            nc_fractions=list(self.nc_fractions),
            columns=list(self.columns) if self.columns else None,
        )

    def validate(self) -> "RunConfig":
        c = self.resolved()
        problems: List[str] = []
        if c.command not in COMMANDS:
            problems.append(f"command={c.command}")
        if c.protocol not in PROTOCOLS:
            problems.append(f"protocol={c.protocol}")
        elif (c.task == "nc") != (c.protocol == "nc_split"):
            problems.append(f"task={c.task}와 protocol={c.protocol} 조합")
        if c.backbone not in BACKBONES:
            problems.append(f"backbone={c.backbone}")
        if c.aggr not in AGGREGATIONS:
            problems.append(f"aggr={c.aggr}")
        if c.weighting not in WEIGHTINGS:
            problems.append(f"weighting={c.weighting}")
        if c.snapshot_rule not in SNAPSHOT_RULES:
            problems.append(f"snapshot_rule={c.snapshot_rule}")
        if c.d_h < 1 or c.num_layers < 1:
            problems.append("d_h/num_layers ≥ 1")
        if not 0.0 <= c.dropout < 1.0:
            problems.append(f"dropout={c.dropout}")
        if c.lr <= 0 or c.weight_decay < 0:
            problems.append("lr > 0, weight_decay ≥ 0")
        if c.delta_hours <= 0:
            problems.append(f"delta_hours={c.delta_hours}")
        if c.num_seeds < 1:
            problems.append(f"num_seeds={c.num_seeds}")
        if c.epochs < 0 or c.inner_epochs < 0 or c.fixed_count < 1:
            problems.append("epochs/inner_epochs ≥ 0, fixed_count ≥ 1")
        if c.command in ("train", "sweep", "ingest") and not c.data and not c.synthetic.enabled:
            problems.append("data 경로 또는 synthetic.enabled 필요")
        if c.symmetrize and c.task == "nc":
            problems.append("symmetrize는 간선 특징을 버리므로 task=lp에서만 쓸 수 있습니다")
        if c.synthetic.enabled and c.task == "nc":
            problems.append("synthetic 시퀀스에는 노드 라벨이 없습니다 (task=lp만 가능)")
        if problems:
            raise ConfigError("잘못된 설정: " + "; ".join(problems))
        try:
            c.gates.gates()
        except DomainError as e:
            raise ConfigError(str(e)) from e
        c.protocol_config()      # 범위 검사 (ConfigError)
        return c

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(
            mode=self.protocol or TASK_DEFAULTS[self.task]["protocol"],
            train_fraction=self.train_fraction,
            inner_epochs=self.inner_epochs,
            nc_fractions=tuple(self.nc_fractions),
            epochs=self.epochs,
            patience=self.patience,
            eval_negatives=self.eval_negatives,
            seed=self.seed,
            lr=self.lr,
            weight_decay=self.weight_decay,
            record_timing=self.record_timing,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# =========================
# YAML 템플릿/로드
# =========================
_DEFAULT_YAML = """# configs/run_config.yaml (자동 생성 템플릿)
# CLI 플래그가 이 파일보다 우선합니다. null = 태스크 기본값
task: lp                  # lp | nc
protocol: null            # fixed_split | live_update | nc_split (lp → fixed_split, nc → nc_split)
d_h: null                 # lp 128, nc 256
num_layers: 2
backbone: gcn_mean        # gcn_mean | sage | gat_single_head
aggr: mean                # mean | sum
dropout: 0.1
lr: 0.001
weight_decay: 0.00001
epochs: 100
delta_hours: 6.0          # 이벤트 스트림 이산화 간격 (노드 분류)
weighting: null           # none | sqrt | balanced (nc 기본 balanced)
inner_epochs: 10          # live_update의 스냅샷당 학습 횟수 K
seed: 0
num_seeds: 1              # >1 → 시드마다 실행, seed_aggregate.csv에 mean±std
snapshot_rule: weekly     # weekly | daily | fixed_count (간선 목록)
fixed_count: 1000
columns: null             # 헤더 없는 파일 열 순서, 예: [src, dst, weight, timestamp]
symmetrize: false
eval_negatives: 1000
patience: 5
train_fraction: 0.9
nc_fractions: [0.7, 0.15, 0.15]
record_timing: true       # false → wall_ms=0 (바이트 단위 재현)

gates:
  alpha_intra: 1.0
  alpha_cross: 1.0
  alpha_self: 1.0

synthetic:
  enabled: false
  num_nodes: 50
  period: 2
  edges_per_snapshot: 100
  recurrence_prob: 1.0
  noise_rate: 0.0
  num_snapshots: 200
"""


def ensure_default_yaml(path: Path) -> Path:
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_DEFAULT_YAML, encoding="utf-8")
        logger.info(f"[config] 기본 템플릿 생성: {path}")
    return path


def _load_yaml(path: Path, create: bool) -> Dict[str, Any]:
    if create:
        ensure_default_yaml(path)
    elif not path.exists():
        raise ConfigError(f"설정 파일이 없습니다: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML 파싱 실패: {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"설정 파일 최상위는 mapping이어야 합니다: {path}")
    return raw


def _build(cls, raw: Dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"알 수 없는 설정 키 ({where}): {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"설정 형식 오류 ({where}): {e}") from e


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    gates = _build(GateConfig, raw.pop("gates", None) or {}, "gates")
    synthetic = _build(SyntheticConfig, raw.pop("synthetic", None) or {}, "synthetic")
    return _build(RunConfig, {**raw, "gates": gates, "synthetic": synthetic}, "run")


def load_run_config(yaml_path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    YAML → RunConfig. overrides의 None이 아닌 값이 파일보다 우선한다.
    중첩 키는 "gates.alpha_self" 처럼 점으로 지정한다.
    """
    path = default_config_path(yaml_path)
    raw = _load_yaml(path, create=not yaml_path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            head, sub = key.split(".", 1)
            raw.setdefault(head, {})
            if raw[head] is None:
                raw[head] = {}
            raw[head][sub] = value
        else:
            raw[key] = value
    cfg = config_from_dict(raw)
    logger.info(f"[config] using config: {path}")
    return cfg


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """해석된 설정을 YAML로 기록. load_run_config(path)로 같은 RunConfig가 복원된다."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.resolved().to_dict(), f, allow_unicode=True, sort_keys=False)
    return path


def output_dir(cfg: RunConfig) -> Path:
    """--out > SIST_OUTPUT_DIR/<command> > ./runs/<command>"""
    if cfg.out:
        return Path(cfg.out)
    env = os.getenv("SIST_OUTPUT_DIR")
    if env:
        return Path(env) / cfg.command
    return Path("runs") / cfg.command


# ---- 스모크 테스트 ----
if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    print("Config path ->", default_config_path())
    cfg = load_run_config(overrides={"synthetic.enabled": True}).validate()
    print(cfg)
    print("config.py smoke test OK ✔")
