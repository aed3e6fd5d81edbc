# src/cli.py
"""
명령행 진입점 (typer 앱 `sist`)
- train  : 데이터 적재 → 프로토콜 실행 → metrics.jsonl + checkpoint.sistckp + config.yaml
- verify : 검증 스위트 실행, 실패한 CheckReport는 stderr로
- sweep  : 축 하나(d_h | L | backbone | delta | weighting)만 바꿔 반복 학습, 요약 CSV
- ingest : 원본 파일 → 스냅샷 시퀀스 캐시(.sistseq) + 통계 출력

종료 코드: 0 성공 / 1 실행 실패(검증 실패 포함) / 2 설정·사용법 오류
"""

from __future__ import annotations
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple
import json
import logging

try:
    import typer
except ModuleNotFoundError as e:
    raise ModuleNotFoundError("typer가 필요합니다. `pip install typer`를 실행하세요.") from e
import pandas as pd

from config import RunConfig, config_from_dict, dump_config, load_run_config, output_dir
from data_io import (
    SnapshotSequence, discretize_events, generate_synthetic, ingest_edgelist, load_event_stream,
    load_sequence, save_sequence, sequence_stats,
)
from errors import ConfigError
from graph_core import symmetrize
from logging_util import setup_logging
from models import LinkPredictionModel, NodeClassificationModel
from nn_layers import save_checkpoint
from schema import MetricsWriter, SummaryRecord
from training import run_protocol, summarize
from verification import SUITES, run_suite

logger = logging.getLogger(__name__)

app = typer.Typer(name="sist", help="SiST-GNN 학습/평가/검증", add_completion=False, no_args_is_help=True)

SWEEP_AXES: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "d_h": ("d_h", int),
    "L": ("num_layers", int),
    "backbone": ("backbone", str),
    "delta": ("delta_hours", float),
    "weighting": ("weighting", str),
}
SEQUENCE_SUFFIX = ".sistseq"
SEED_METRICS = ("mean_mrr", "test_auc", "best_val_auc")


# =========================
# 실행 파이프라인
# =========================
def load_dataset(cfg: RunConfig) -> SnapshotSequence:
    if cfg.synthetic.enabled:
        seq = generate_synthetic(cfg.synthetic.spec(cfg.seed))
    else:
        path = Path(cfg.data)
        if path.suffix == SEQUENCE_SUFFIX:
            seq = load_sequence(path)
        elif cfg.task == "nc":
            seq = discretize_events(load_event_stream(path), cfg.delta_hours)
        else:
            seq = ingest_edgelist(path, cfg.snapshot_rule, cfg.columns, cfg.fixed_count)
    if cfg.symmetrize:
        seq = seq.with_snapshots([symmetrize(g) for g in seq])
    stats = sequence_stats(seq)
    logger.info(f"[data] N={stats.num_nodes} |E|={stats.total_edges} T={stats.num_snapshots}")
    return seq


def build_model(cfg: RunConfig, seq: SnapshotSequence):
    gates = [cfg.gates.gates() for _ in range(cfg.num_layers)]
    if cfg.task == "lp":
        return LinkPredictionModel.create(seq.num_nodes, cfg.d_h, cfg.num_layers, cfg.backbone,
                                          cfg.dropout, cfg.seed, gates, cfg.aggr)
    if not seq.labels:
        raise ConfigError("노드 분류에는 라벨이 있는 시퀀스(이벤트 스트림)가 필요합니다.")
    return NodeClassificationModel.create(seq.num_nodes, seq.edge_dim, cfg.d_h, cfg.num_layers, cfg.backbone,
                                          cfg.dropout, cfg.seed, seq.roles, cfg.weighting, gates, cfg.aggr)


def run_training(cfg: RunConfig) -> SummaryRecord:
    """설정 하나를 끝까지 실행. 요약 레코드는 항상 metrics.jsonl 마지막 줄"""
    cfg = cfg.validate()
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        logger.warning(f"[cli] 기존 metrics 파일을 새로 씁니다: {metrics_path}")
        metrics_path.unlink()
    dump_config(cfg, out / "config.yaml")

    seq = load_dataset(cfg)
    model = build_model(cfg, seq)
    logger.info(f"[cli] train task={cfg.task} protocol={cfg.protocol} d_h={cfg.d_h} L={cfg.num_layers} "
                f"backbone={cfg.backbone} seed={cfg.seed} → {out}")
    with MetricsWriter(metrics_path) as writer:
        records = run_protocol(model, seq, cfg.protocol_config(), writer)
        save_checkpoint(out / "checkpoint.sistckp", model.parameters())
        summary = summarize(records, cfg.protocol, cfg.task, model, cfg.to_dict())
        writer.write(summary)
    logger.info(f"[cli] done: mean_mrr={summary.mean_mrr} test_auc={summary.test_auc}")
    return summary


def _sweep_job(raw: Dict[str, Any]) -> Dict[str, Any]:
    """프로세스 풀 작업 단위 (pickle 가능한 dict만 주고받는다)"""
    return run_training(config_from_dict(raw)).model_dump()


def _run_jobs(jobs: List[RunConfig], parallel: int) -> List[SummaryRecord]:
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return [SummaryRecord(**d) for d in pool.map(_sweep_job, [j.to_dict() for j in jobs])]
    return [run_training(j) for j in jobs]


def seed_list(cfg: RunConfig) -> List[int]:
    return [cfg.seed + i for i in range(cfg.num_seeds)]


def aggregate_seeds(table: pd.DataFrame, by: List[str]) -> pd.DataFrame:
    """
    실행별 요약 → 그룹별 seeds 수와 지표 mean/std.
    std는 표본 표준편차(ddof=1), 시드가 하나뿐이면 비어 있다.
    """
    metrics = [c for c in SEED_METRICS if c in table.columns and table[c].notna().any()]
    grouped = table.groupby(by, sort=False)
    out = grouped.size().rename("seeds").to_frame()
    if metrics:
        stats = grouped[metrics].agg(["mean", "std"])
        stats.columns = [f"{m}_{stat}" for m, stat in stats.columns]
        out = out.join(stats)
    return out.reset_index()


def run_seeds(cfg: RunConfig, parallel: int = 1) -> pd.DataFrame:
    """같은 설정을 시드마다 <out>/seed=<s>/ 에 실행. seed_summary.csv + seed_aggregate.csv"""
    cfg = cfg.validate()
    root = output_dir(cfg)
    jobs = [replace(cfg, seed=s, num_seeds=1, out=str(root / f"seed={s}")) for s in seed_list(cfg)]
    summaries = _run_jobs(jobs, parallel)
    table = pd.DataFrame([{"seed": j.seed, **s.model_dump(exclude={"config", "record"})}
                          for j, s in zip(jobs, summaries)])
    agg = aggregate_seeds(table, ["protocol"])
    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / "seed_summary.csv", index=False)
    agg.to_csv(root / "seed_aggregate.csv", index=False)
    logger.info(f"[cli] {len(jobs)}개 시드 완료 → {root / 'seed_aggregate.csv'}")
    return agg


# =========================
# 종료 코드
# =========================
@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except typer.Exit:
        raise
    except ConfigError as e:
        logger.error(f"[cli] 설정 오류: {e}")
        typer.echo(f"설정 오류: {e}", err=True)
        raise typer.Exit(code=2)
    except Exception as e:
        logger.exception(f"[cli] 실행 실패: {e}")
        typer.echo(f"실행 실패: {e.__class__.__name__}: {e}", err=True)
        raise typer.Exit(code=1)


def _overrides(command: str, **kw: Any) -> Dict[str, Any]:
    out: Dict[str, Any] = {"command": command}
    for key, value in kw.items():
        if isinstance(value, Path):
            value = str(value)
        out[key] = value
    if out.get("columns"):
        out["columns"] = [c.strip() for c in str(out["columns"]).split(",") if c.strip()]
    return out


# =========================
# 명령
# =========================
@app.callback()
def main_options(
    log_dir: Optional[Path] = typer.Option(None, "--log-dir", help="로그 디렉터리 (기본 SIST_LOG_DIR 또는 logs/)"),
    log_level: str = typer.Option("INFO", "--log-level"),
):
    setup_logging(log_dir, log_level)


@app.command()
def train(
    data: Optional[Path] = typer.Option(None, "--data", help="간선 목록 / 이벤트 파일 / .sistseq"),
    config: Optional[Path] = typer.Option(None, "--config", help="YAML 설정 파일"),
    task: Optional[str] = typer.Option(None, "--task", help="lp | nc"),
    protocol: Optional[str] = typer.Option(None, "--protocol", help="fixed-split | live-update | nc-split"),
    d_h: Optional[int] = typer.Option(None, "--d-h"),
    layers: Optional[int] = typer.Option(None, "--layers", "-L"),
    backbone: Optional[str] = typer.Option(None, "--backbone"),
    aggr: Optional[str] = typer.Option(None, "--aggr"),
    dropout: Optional[float] = typer.Option(None, "--dropout"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    weight_decay: Optional[float] = typer.Option(None, "--weight-decay"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    delta: Optional[float] = typer.Option(None, "--delta", help="이산화 간격 Δ (시간)"),
    weighting: Optional[str] = typer.Option(None, "--weighting", help="none | sqrt | balanced"),
    inner_epochs: Optional[int] = typer.Option(None, "--inner-epochs", "-K"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    seeds: Optional[int] = typer.Option(None, "--seeds", help="seed부터 시드 N개 반복, mean±std 요약"),
    out: Optional[Path] = typer.Option(None, "--out"),
    snapshot_rule: Optional[str] = typer.Option(None, "--snapshot-rule"),
    columns: Optional[str] = typer.Option(None, "--columns", help="예: src,dst,weight,timestamp"),
    symmetrize_edges: Optional[bool] = typer.Option(None, "--symmetrize/--no-symmetrize"),
    eval_negatives: Optional[int] = typer.Option(None, "--eval-negatives"),
    patience: Optional[int] = typer.Option(None, "--patience"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--no-synthetic"),
    no_timing: bool = typer.Option(False, "--no-timing", help="wall_ms=0 기록 (재현 비교용)"),
    dump_config_path: Optional[Path] = typer.Option(None, "--dump-config", help="해석된 설정을 이 경로에 기록"),
    parallel: int = typer.Option(1, "--parallel", min=1, help="--seeds 실행의 독립 프로세스 수"),
):
    """설정된 프로토콜로 학습/평가"""
    with _exit_codes():
        overrides = _overrides(
            "train", data=data, task=task, protocol=protocol, d_h=d_h, num_layers=layers, backbone=backbone,
            aggr=aggr, dropout=dropout, lr=lr, weight_decay=weight_decay, epochs=epochs, delta_hours=delta,
            weighting=weighting, inner_epochs=inner_epochs, seed=seed, num_seeds=seeds, out=out,
            snapshot_rule=snapshot_rule, columns=columns, symmetrize=symmetrize_edges, eval_negatives=eval_negatives,
            patience=patience, record_timing=False if no_timing else None,
        )
        overrides["synthetic.enabled"] = synthetic
        cfg = load_run_config(config, overrides).validate()
        if dump_config_path is not None:
            dump_config(cfg, dump_config_path)
            logger.info(f"[cli] 설정 기록: {dump_config_path}")
        if cfg.num_seeds > 1:
            agg = run_seeds(cfg, parallel)
            typer.echo(agg.to_json(orient="records", lines=True).strip())
            return
        summary = run_training(cfg)
        typer.echo(summary.model_dump_json(exclude_none=True, exclude={"config"}))


@app.command()
def verify(
    suite: str = typer.Argument("all", help=" | ".join(SUITES)),
    mutate: bool = typer.Option(False, "--mutate", help="일부러 망가뜨린 설정으로 실행 (실패해야 정상)"),
    seed: int = typer.Option(0, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out", help="checks.jsonl을 쓸 디렉터리"),
):
    """검증 스위트. 모두 통과하면 exit 0"""
    with _exit_codes():
        if suite not in SUITES:
            raise ConfigError(f"알 수 없는 스위트: {suite} (가능: {', '.join(SUITES)})")
        reports = run_suite(suite, mutate=mutate, seed=seed)
        if out is not None:
            with MetricsWriter(Path(out) / "checks.jsonl") as writer:
                writer.write_all(reports)
        failed = 0
        for r in reports:
            line = r.model_dump_json()
            typer.echo(line)
            if not r.passed:
                failed += 1
                typer.echo(line, err=True)
        logger.info(f"[cli] verify {suite}: {len(reports) - failed}/{len(reports)} 통과")
        if failed:
            raise typer.Exit(code=1)


@app.command()
def sweep(
    axis: str = typer.Argument(..., help=" | ".join(SWEEP_AXES)),
    values: List[str] = typer.Argument(..., help="축 값들, 예: 1 3 6 12 24"),
    data: Optional[Path] = typer.Option(None, "--data"),
    config: Optional[Path] = typer.Option(None, "--config"),
    task: Optional[str] = typer.Option(None, "--task"),
    protocol: Optional[str] = typer.Option(None, "--protocol"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    seeds: Optional[int] = typer.Option(None, "--seeds", help="seed부터 시드 N개 반복, mean±std 요약"),
    out: Optional[Path] = typer.Option(None, "--out"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--no-synthetic"),
    no_timing: bool = typer.Option(False, "--no-timing"),
    parallel: int = typer.Option(1, "--parallel", min=1, help="독립 프로세스 수 (기본 직렬)"),
):
    """축 하나를 바꿔 가며 학습, 값마다 요약 한 줄"""
    with _exit_codes():
        if axis not in SWEEP_AXES:
            raise ConfigError(f"알 수 없는 sweep 축: {axis} (가능: {', '.join(SWEEP_AXES)})")
        field_name, parse = SWEEP_AXES[axis]
        overrides = _overrides("sweep", data=data, task=task, protocol=protocol, epochs=epochs, seed=seed,
                               num_seeds=seeds, out=out, record_timing=False if no_timing else None)
        overrides["synthetic.enabled"] = synthetic
        base = load_run_config(config, overrides).validate()
        root = output_dir(base)
        seed_values = seed_list(base)

        jobs: List[RunConfig] = []
        labels: List[Tuple[str, int]] = []
        for v in values:
            try:
                parsed = parse(v)
            except ValueError as e:
                raise ConfigError(f"{axis} 값으로 해석할 수 없습니다: {v}") from e
            for s in seed_values:
                run_dir = root / f"{axis}={v}"
                if len(seed_values) > 1:
                    run_dir = run_dir / f"seed={s}"
                jobs.append(replace(base, command="train", seed=s, num_seeds=1, out=str(run_dir),
                                    **{field_name: parsed}))
                labels.append((v, s))
        for job in jobs:
            job.validate()

        summaries = _run_jobs(jobs, parallel)
        rows = [{"axis": axis, "value": v, "seed": s, **r.model_dump(exclude={"config", "record"})}
                for (v, s), r in zip(labels, summaries)]
        table = pd.DataFrame(rows)
        agg = aggregate_seeds(table, ["axis", "value"])
        root.mkdir(parents=True, exist_ok=True)
        table.to_csv(root / "sweep_summary.csv", index=False)
        agg.to_csv(root / "sweep_aggregate.csv", index=False)
        typer.echo(agg.to_string(index=False))


@app.command()
def ingest(
    data: Path = typer.Option(..., "--data"),
    config: Optional[Path] = typer.Option(None, "--config"),
    task: Optional[str] = typer.Option(None, "--task", help="lp: 간선 목록, nc: 이벤트 스트림"),
    delta: Optional[float] = typer.Option(None, "--delta"),
    snapshot_rule: Optional[str] = typer.Option(None, "--snapshot-rule"),
    columns: Optional[str] = typer.Option(None, "--columns"),
    cache: Optional[Path] = typer.Option(None, "--cache", help="캐시 경로 (기본 <out>/<이름>.sistseq)"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """적재 + 캐시 + 통계"""
    with _exit_codes():
        overrides = _overrides("ingest", data=data, task=task, delta_hours=delta, snapshot_rule=snapshot_rule,
                               columns=columns, out=out)
        cfg = load_run_config(config, overrides).validate()
        seq = load_dataset(cfg)
        path = cache or output_dir(cfg) / (Path(data).stem + SEQUENCE_SUFFIX)
        save_sequence(seq, path)
        stats = sequence_stats(seq)
        typer.echo(json.dumps({**asdict(stats), "cache": str(path)}, ensure_ascii=False))


def main() -> None:
    app()


if __name__ == "__main__":
    main()
