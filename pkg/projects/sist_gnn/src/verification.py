# src/verification.py
"""
이론적 성질의 실행 가능한 검증
- check_gradients: 2층 스택 전체 파라미터의 autodiff vs 중앙 유한차분
- check_equivariance: 노드 순열 π에 대해 f(πx) = π f(x)  (Z, H', C')
- check_spatial_first_reduction / check_temporal_first_reduction: gate 설정으로 순차 패러다임 복원
- check_strictness_witness: N=2 witness가 [x₂+x₁², x₁+x₂²]를 정확히 계산하는지 + 순차 모델 최소제곱 적합 잔차
- check_message_diversity: 노드 u가 받는 메시지 수 2|N(u)|+1, 이력 차이가 temporal 메시지에만 드러나는지
- run_suite(name, mutate=False): CLI용 묶음 실행

mutate=True는 일부러 망가뜨린 설정으로 실행한다 (검사가 실패해야 정상).
"""

from __future__ import annotations
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg, optimize

from errors import ConfigError
from graph_core import (
    EdgeTypeGates, SnapshotGraph, add_self_loops, augment, incoming_message_count, intra_only,
    neighbors, permute_graph, permute_rows, random_snapshot, symmetrize,
)
from nn_layers import (
    BACKBONES, BackboneParams, EncoderParams, LayerState, LSTMCellParams, SiSTLayerParams,
    encoder_forward, init_encoder, init_layer, init_lstm, lstm_step, message_pass, sist_layer_forward,
)
from schema import CheckReport
import tensor_autodiff as ad
from tensor_autodiff import Mat, TapeMatrix

logger = logging.getLogger(__name__)

SUITES = ("all", "equivariance", "reductions", "witness", "diversity", "gradients")
FD_STEP = 1e-5


# =========================
# 유한차분
# =========================
def numeric_gradient(f: Callable[[], float], param: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """중앙 차분. param을 제자리에서 흔들었다가 원복한다."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = param[i]
        param[i] = old + eps
        up = f()
        param[i] = old - eps
        down = f()
        param[i] = old
        grad[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)"""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def gradient_check(loss_fn: Callable[[Dict[str, Mat]], TapeMatrix], params: Dict[str, np.ndarray],
                   eps: float = FD_STEP) -> Dict[str, float]:
    """
    loss_fn(값 dict) → 1×1. autodiff gradient와 유한차분의 파라미터별 상대 오차.
    loss_fn은 ndarray를 받으면 상수 경로로 계산되어야 한다.
    """
    tape = ad.Tape()
    bound = {k: tape.parameter(v, k) for k, v in params.items()}
    grads = tape.named_grads(tape.backward(loss_fn(bound)))

    def value() -> float:
        return float(ad.as_array(loss_fn(params))[0, 0])

    return {k: relative_error(grads[k], numeric_gradient(value, params[k], eps)) for k in params}


def check_gradients(seed: int = 0, num_nodes: int = 6, d_h: int = 5, backbones: Sequence[str] = BACKBONES) -> CheckReport:
    """2층 스택(N=6, d_h=5)의 모든 파라미터. backbone마다 한 번씩"""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for kind in backbones:
        enc = init_encoder(rng, num_nodes, d_h, num_layers=2, kind=kind, dropout_rate=0.0)
        g = random_snapshot(rng, num_nodes, 2 * num_nodes)
        states = [LayerState(rng.normal(size=(num_nodes, d_h)), rng.normal(size=(num_nodes, d_h))) for _ in range(2)]
        weights = rng.normal(size=(num_nodes, d_h))
        template = enc
        params = enc.named()

        def loss_fn(values: Dict[str, Mat], template=template, g=g, states=states, weights=weights) -> TapeMatrix:
            tree = template.map(lambda name, _v: values[name])
            Z, _ = encoder_forward(tree, g, states, "eval")
            return ad.sum_all(ad.mul(Z, weights))

        for name, err in gradient_check(loss_fn, params).items():
            worst[f"{kind}:{name}"] = err
    dev = max(worst.values())
    logger.info(f"[verify] gradients: 최대 상대 오차 {dev:.3e} ({len(worst)}개 파라미터)")
    return CheckReport.build("gradients", dev, 1e-5, trials=len(backbones), seed=seed,
                             details={"worst_parameter": max(worst, key=worst.get), "parameters": len(worst)})


# =========================
# 순열 등변성
# =========================
LayerFn = Callable[[SiSTLayerParams, Mat, SnapshotGraph, LayerState, EdgeTypeGates], Tuple[TapeMatrix, LayerState]]


def _index_biased_layer(params, X, g, state, gates):
    """노드 인덱스에 의존하는 bias를 더한 망가진 레이어"""
    Z, s = sist_layer_forward(params, X, g, state, gates)
    return ad.add(Z, 0.01 * np.arange(g.num_nodes, dtype=np.float64)[:, None] * np.ones(Z.shape)), s


def check_equivariance(params: Optional[SiSTLayerParams] = None, trials: int = 20, seed: int = 0,
                       mutate: bool = False, gates: Optional[EdgeTypeGates] = None,
                       identity: bool = False) -> CheckReport:
    """
    trial마다 무작위 그래프/특징/상태/순열. deviation = max |f(πx) − π f(x)| (Z, H', C').
    params가 없으면 trial마다 backbone을 바꿔 가며 새로 만든다. identity=True면 항등 순열.
    """
    rng = np.random.default_rng(seed)
    layer_fn: LayerFn = _index_biased_layer if mutate else sist_layer_forward
    gates = gates or EdgeTypeGates()
    dev = 0.0
    for trial in range(trials):
        n = int(rng.integers(3, 13))
        p = params
        if p is None:
            p = init_layer(rng, 4, 4, BACKBONES[trial % len(BACKBONES)], sigma="relu")
        d_in = ad.as_array(p.W_p).shape[0]
        d_h = p.lstm.hidden_dim
        X = rng.normal(size=(n, d_in))
        g = random_snapshot(rng, n, int(rng.integers(0, 3 * n + 1)))
        state = LayerState(rng.normal(size=(n, d_h)), rng.normal(size=(n, d_h)))
        perm = np.arange(n) if identity else rng.permutation(n)

        Z, s = layer_fn(p, X, g, state, gates)
        state_p = LayerState(permute_rows(state.H, perm), permute_rows(state.C, perm))
        Zp, sp_ = layer_fn(p, permute_rows(X, perm), permute_graph(g, perm), state_p, gates)
        for a, b in ((Zp, Z), (sp_.H, s.H), (sp_.C, s.C)):
            dev = max(dev, float(np.abs(ad.as_array(a) - permute_rows(ad.as_array(b), perm)).max()))
    name = "equivariance" + (" (mutated)" if mutate else "")
    logger.info(f"[verify] {name}: deviation {dev:.3e} over {trials} trials")
    return CheckReport.build(name, dev, 1e-10, trials=trials, seed=seed)


# =========================
# 순차 패러다임 참조 모델
# =========================
@dataclass
class ReferenceModel:
    """
    spatial_first: f_temp(GNN(X_t, E_t), H_{t−1})
    temporal_first: GNN(f_temp(X_t, H_{t−1}), E_t)
    backbone/f_temp 파라미터는 검사 대상 스택과 같은 배열을 공유한다.
    """
    kind: str
    backbone: BackboneParams
    lstm: LSTMCellParams
    W_p: Optional[Mat] = None     # spatial_first: GNN 입력 투영

    def forward(self, X: Mat, g: SnapshotGraph, state: LayerState) -> Tuple[TapeMatrix, LayerState]:
        if self.kind == "spatial_first":
            spatial = message_pass(self.backbone, EdgeTypeGates(1.0, 0.0, 0.0), ad.matmul(X, self.W_p), intra_only(g))
            new_state = lstm_step(self.lstm, spatial, state)
            return ad.as_matrix(new_state.H), new_state
        if self.kind == "temporal_first":
            new_state = lstm_step(self.lstm, X, state)
            out = message_pass(self.backbone, EdgeTypeGates(1.0, 0.0, 0.0), new_state.H, intra_only(add_self_loops(g)))
            return out, new_state
        raise ConfigError(f"알 수 없는 참조 모델: {self.kind}")


def _gates_equal(g: EdgeTypeGates, target: Tuple[float, float, float]) -> bool:
    return tuple(g.as_array().tolist()) == tuple(float(x) for x in target)


def build_spatial_first_stack(rng: np.random.Generator, num_nodes: int, d_in: int, d_h: int) -> EncoderParams:
    """
    1층: gates (1,0,0), σ=identity → 투영 특징 위 backbone 합성곱
    2층: gates (0,0,1), W_self=0, W_msg=I, bias=0, W_p=I, σ=identity → cross_self로 f_temp 출력만 통과
    """
    l1 = init_layer(rng, d_in, d_h, "gcn_mean", sigma="identity")
    l2 = init_layer(rng, d_h, d_h, "gcn_mean", sigma="identity")
    eye = np.eye(d_h)
    l2 = replace(l2, W_p=eye.copy(), backbone=replace(l2.backbone, W_msg=eye.copy(), W_self=np.zeros((d_h, d_h)),
                                                      bias=np.zeros((1, d_h))))
    gates = [EdgeTypeGates(1.0, 0.0, 0.0), EdgeTypeGates(0.0, 0.0, 1.0)]
    return EncoderParams(layers=[l1, l2], P=np.zeros((num_nodes, d_h)), dropout_rate=0.0, gates=gates)


def _validate_spatial_first(stack: EncoderParams) -> None:
    if stack.num_layers != 2:
        raise ConfigError("spatial-first 복원에는 2층 스택이 필요합니다.")
    l1, l2 = stack.layers
    d_h = l2.lstm.hidden_dim
    bb = l2.backbone
    ok = (
        _gates_equal(stack.gates[0], (1, 0, 0)) and _gates_equal(stack.gates[1], (0, 0, 1))
        and l1.sigma == "identity" and l2.sigma == "identity" and bb.kind == "gcn_mean"
        and np.array_equal(ad.as_array(bb.W_self), np.zeros((d_h, d_h)))
        and np.array_equal(ad.as_array(bb.W_msg), np.eye(d_h))
        and not ad.as_array(bb.bias).any()
    )
    if not ok:
        raise ConfigError("spatial-first 스택 설정이 복원 조건과 다릅니다 (gates/σ/2층 가중치).")


def _random_inputs(rng: np.random.Generator, num_nodes: int, d_in: int, steps: int):
    for t in range(steps):
        yield t, rng.normal(size=(num_nodes, d_in)), random_snapshot(rng, num_nodes, 2 * num_nodes, index=t)


def check_spatial_first_reduction(stack: Optional[EncoderParams] = None, T_steps: int = 5, seed: int = 0,
                                  mutate: bool = False, num_nodes: int = 8, d_in: int = 3, d_h: int = 4) -> CheckReport:
    rng = np.random.default_rng(seed)
    if stack is None:
        stack = build_spatial_first_stack(rng, num_nodes, d_in, d_h)
    _validate_spatial_first(stack)
    if mutate:
        stack = replace(stack, gates=[stack.gates[0], EdgeTypeGates(0.5, 0.0, 1.0)])
    n = stack.num_nodes
    d_in = ad.as_array(stack.layers[0].W_p).shape[0]
    ref = ReferenceModel("spatial_first", stack.layers[0].backbone, stack.layers[1].lstm, stack.layers[0].W_p)

    states = [LayerState.zeros(n, layer.lstm.hidden_dim) for layer in stack.layers]
    ref_state = LayerState.zeros(n, stack.layers[1].lstm.hidden_dim)
    dev = 0.0
    for t, X, g in _random_inputs(rng, n, d_in, T_steps):
        Z, states = encoder_forward(stack, g, states, "eval", X=X)
        Y, ref_state = ref.forward(X, g, ref_state)
        dev = max(dev, float(np.abs(ad.as_array(Z) - ad.as_array(Y)).max()))
    name = "spatial_first_reduction" + (" (mutated)" if mutate else "")
    logger.info(f"[verify] {name}: deviation {dev:.3e} over {T_steps} snapshots")
    return CheckReport.build(name, dev, 1e-8, trials=T_steps, seed=seed)


def build_temporal_first_layer(rng: np.random.Generator, d_in: int, d_h: int) -> SiSTLayerParams:
    """gates (0,1,1), W_self=0, σ=identity"""
    layer = init_layer(rng, d_in, d_h, "gcn_mean", sigma="identity")
    return replace(layer, backbone=replace(layer.backbone, W_self=np.zeros((d_h, d_h))))


def _validate_temporal_first(layer: SiSTLayerParams, gates: EdgeTypeGates) -> None:
    d_h = layer.lstm.hidden_dim
    bb = layer.backbone
    ok = (
        _gates_equal(gates, (0, 1, 1)) and layer.sigma == "identity"
        and bb.kind == "gcn_mean" and bb.aggr == "mean"
        and np.array_equal(ad.as_array(bb.W_self), np.zeros((d_h, d_h)))
    )
    if not ok:
        raise ConfigError("temporal-first 레이어 설정이 복원 조건과 다릅니다 (gates (0,1,1), W_self=0, σ=identity).")


def check_temporal_first_reduction(layer: Optional[SiSTLayerParams] = None, T_steps: int = 5, seed: int = 0,
                                   mutate: bool = False, gates: Optional[EdgeTypeGates] = None,
                                   num_nodes: int = 8, d_in: int = 3, d_h: int = 4) -> CheckReport:
    """
    cross_neighbor (u+N → v)가 이웃 u의 temporal 요약을, cross_self가 자기 요약을 나른다.
    참조: E_t + self-loop 위 mean 집계 (root 가중치 0) of f_temp(X_t, H_{t−1}).
    """
    rng = np.random.default_rng(seed)
    if layer is None:
        layer = build_temporal_first_layer(rng, d_in, d_h)
    gates = gates or EdgeTypeGates(0.0, 1.0, 1.0)
    _validate_temporal_first(layer, gates)
    if mutate:
        gates = EdgeTypeGates(0.5, 1.0, 1.0)
    d_in = ad.as_array(layer.W_p).shape[0]
    hidden = layer.lstm.hidden_dim
    ref = ReferenceModel("temporal_first", layer.backbone, layer.lstm)

    state = LayerState.zeros(num_nodes, hidden)
    ref_state = LayerState.zeros(num_nodes, hidden)
    dev = 0.0
    for t, X, g in _random_inputs(rng, num_nodes, d_in, T_steps):
        Z, state = sist_layer_forward(layer, X, g, state, gates)
        Y, ref_state = ref.forward(X, g, ref_state)
        dev = max(dev, float(np.abs(ad.as_array(Z) - ad.as_array(Y)).max()))
    name = "temporal_first_reduction" + (" (mutated)" if mutate else "")
    logger.info(f"[verify] {name}: residual {dev:.3e} over {T_steps} snapshots")
    return CheckReport.build(name, dev, 1e-8, trials=T_steps, seed=seed,
                             details={"edge_mapping": "lower-half temporal summaries feed cross edges; "
                                                      "reference aggregates over E_t plus self-loops"})


# =========================
# 엄격성 witness
# =========================
WITNESS_GRID = np.linspace(-2.0, 2.0, 10)


def _square_temporal(X: Mat, state: LayerState) -> LayerState:
    """검증 전용 temporal operator: x ↦ x²"""
    sq = ad.mul(X, X)
    return LayerState(sq, sq)


def witness_layer() -> Tuple[SiSTLayerParams, SnapshotGraph, EdgeTypeGates]:
    """N=2, d_h=1, W=[1], 합 집계. 같은 시점 인접 [[0,1],[1,0]], 시간 인접 I (cross_self만)"""
    one = np.ones((1, 1))
    layer = SiSTLayerParams(
        lstm=LSTMCellParams(np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4))),
        W_p=one.copy(),
        backbone=BackboneParams("gcn_mean", W_msg=one.copy(), W_self=np.zeros((1, 1)), bias=np.zeros((1, 1)), aggr="sum"),
        sigma="identity",
    )
    g = SnapshotGraph.from_edges(2, [(0, 1), (1, 0)])
    return layer, g, EdgeTypeGates(1.0, 0.0, 1.0)


def witness_output(x1: float, x2: float) -> np.ndarray:
    layer, g, gates = witness_layer()
    X = np.array([[x1], [x2]])
    Z, _ = sist_layer_forward(layer, X, g, LayerState.zeros(2, 1), gates, f_temp=_square_temporal)
    return ad.as_array(Z)[:, 0]


def _powers(x: np.ndarray, degree: int = 3) -> np.ndarray:
    return np.vander(x, degree + 1, increasing=True)


def _temporal_first_residual(x1, x2, y, theta) -> Tuple[float, np.ndarray]:
    """Y₁ = a·φ₁(x₁) + b·φ₂(x₂), Y₂ = c·φ₁(x₁) + d·φ₂(x₂), φ는 3차 다항식 (계수는 최소제곱)"""
    a, b, c, d = theta
    P1, P2 = _powers(x1), _powers(x2)
    design = np.vstack([np.hstack([a * P1, b * P2]), np.hstack([c * P1, d * P2])])
    target = np.concatenate([y[:, 0], y[:, 1]])
    coef, *_ = linalg.lstsq(design, target)
    resid = target - design @ coef
    return float(np.sqrt(np.mean(resid ** 2))), coef


def _spatial_first_residual(x1, x2, y, theta) -> float:
    """Yᵢ = ψᵢ(aᵢ x₁ + bᵢ x₂), ψ는 3차 다항식"""
    a, b, c, d = theta
    r = []
    for col, (p, q) in enumerate(((a, b), (c, d))):
        design = _powers(p * x1 + q * x2)
        coef, *_ = linalg.lstsq(design, y[:, col])
        r.append(y[:, col] - design @ coef)
    return float(np.sqrt(np.mean(np.concatenate(r) ** 2)))


def _best_fit(objective: Callable[[np.ndarray], float], rng: np.random.Generator, starts: int = 20) -> float:
    best = np.inf
    for _ in range(starts):
        res = optimize.minimize(objective, rng.normal(size=4), method="Nelder-Mead",
                                options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, float(res.fun))
    return best


def check_strictness_witness(seed: int = 0) -> CheckReport:
    """
    10×10 격자에서 Y(X) = [x₂+x₁², x₁+x₂²] 정확 일치 + temporal-first 최적 적합 잔차 > 0.1.
    적합은 3차 다항식 family에 한정된 부분 검사다.
    """
    x1, x2 = (m.ravel() for m in np.meshgrid(WITNESS_GRID, WITNESS_GRID, indexing="ij"))
    got = np.array([witness_output(a, b) for a, b in zip(x1, x2)])
    target = np.stack([x2 + x1 ** 2, x1 + x2 ** 2], axis=1)
    dev = float(np.abs(got - target).max())

    rng = np.random.default_rng(seed)
    tf = _best_fit(lambda th: _temporal_first_residual(x1, x2, target, th)[0], rng)
    sf = _best_fit(lambda th: _spatial_first_residual(x1, x2, target, th), rng)
    logger.info(f"[verify] witness: grid deviation {dev:.3e}, temporal-first RMS {tf:.4f}, spatial-first RMS {sf:.4f}")
    return CheckReport.build(
        "strictness_witness", dev, 1e-12, trials=int(x1.size), seed=seed,
        conditions={"temporal_first_fit_residual_gt_0.1": tf > 0.1},
        details={"temporal_first_rms": tf, "spatial_first_rms": sf,
                 "fit_family": "cubic polynomials, 20 Nelder-Mead starts (partial check)"},
    )


# =========================
# 메시지 다양성
# =========================
def path_graph(n: int = 3) -> SnapshotGraph:
    return SnapshotGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def _simple_symmetric(g: SnapshotGraph) -> SnapshotGraph:
    """self-loop 제거 후 대칭화. N(u)는 u 자신을 포함하지 않는다"""
    keep = g.src != g.dst
    return symmetrize(SnapshotGraph(g.num_nodes, g.src[keep], g.dst[keep], index=g.index))


def message_counts(g: SnapshotGraph) -> Tuple[np.ndarray, np.ndarray]:
    """(실제 incoming 수, 2|N(u)|+1)"""
    gs = _simple_symmetric(g)
    ag = augment(gs)
    got = np.array([incoming_message_count(ag, u) for u in range(gs.num_nodes)])
    expected = np.array([2 * neighbors(gs, u).size + 1 for u in range(gs.num_nodes)])
    return got, expected


def _history_divergence(rng: np.random.Generator, d: int = 3) -> Tuple[float, float]:
    """t에서 같고 t−1에서 다른 두 이력: (|Δprojected|, |Δtemporal|)"""
    lstm = init_lstm(rng, d, d)
    W_p = ad.glorot_uniform(rng, d, d)
    x_now = rng.normal(size=(1, d))
    states = []
    for _ in range(2):
        s = lstm_step(lstm, rng.normal(size=(1, d)), LayerState.zeros(1, d))
        states.append(lstm_step(lstm, x_now, s))
    proj = [ad.as_array(ad.matmul(x_now, W_p)) for _ in range(2)]
    d_proj = float(np.abs(proj[0] - proj[1]).max())
    d_temp = float(np.abs(ad.as_array(states[0].H) - ad.as_array(states[1].H)).max())
    return d_proj, d_temp


def _distinct_incoming(gs: SnapshotGraph, rng: np.random.Generator, d: int = 3) -> bool:
    """W_msg = I, 합 집계에서 u에 도착하는 메시지 벡터가 모두 서로 다른지"""
    ag = augment(gs)
    X_aug = rng.normal(size=(ag.num_nodes, d))
    for u in range(gs.num_nodes):
        msgs = X_aug[ag.src[ag.dst == u]]
        if np.unique(msgs, axis=0).shape[0] != msgs.shape[0]:
            return False
    return True


def check_message_diversity(g: Optional[SnapshotGraph] = None, seed: int = 0, trials: int = 50) -> CheckReport:
    """g가 없으면 경로 그래프 + 무작위 그래프 trials개"""
    rng = np.random.default_rng(seed)
    graphs = [g] if g is not None else [path_graph(3)] + [
        random_snapshot(rng, int(rng.integers(2, 16)), int(rng.integers(0, 40)), index=i) for i in range(trials)
    ]
    dev = 0.0
    distinct = True
    for graph in graphs:
        got, expected = message_counts(graph)
        dev = max(dev, float(np.abs(got - expected).max()) if got.size else 0.0)
        distinct = distinct and _distinct_incoming(_simple_symmetric(graph), rng)
    d_proj, d_temp = _history_divergence(rng)
    logger.info(f"[verify] diversity: count deviation {dev}, Δprojected={d_proj}, Δtemporal={d_temp:.3e}")
    return CheckReport.build(
        "message_diversity", dev, 0.0, trials=len(graphs), seed=seed,
        conditions={"projected_equal": d_proj == 0.0, "temporal_differs": d_temp > 1e-6,
                    "messages_distinct": distinct},
        details={"delta_projected": d_proj, "delta_temporal": d_temp},
    )


# =========================
# 스위트
# =========================
def run_suite(name: str = "all", mutate: bool = False, seed: int = 0) -> List[CheckReport]:
    if name not in SUITES:
        raise ConfigError(f"알 수 없는 검증 스위트: {name} (가능: {', '.join(SUITES)})")
    reports: List[CheckReport] = []
    if name in ("all", "equivariance"):
        reports.append(check_equivariance(seed=seed, mutate=mutate))
    if name in ("all", "reductions"):
        reports.append(check_spatial_first_reduction(seed=seed, mutate=mutate))
        reports.append(check_temporal_first_reduction(seed=seed, mutate=mutate))
    if name in ("all", "witness"):
        reports.append(check_strictness_witness(seed=seed))
    if name in ("all", "diversity"):
        reports.append(check_message_diversity(seed=seed))
    if name in ("all", "gradients"):
        reports.append(check_gradients(seed=seed))
    return reports
