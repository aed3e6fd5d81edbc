# src/tensor_autodiff.py
"""
최소 dense 선형대수 + reverse-mode 자동미분 (gradient tape)
- TapeMatrix: 모든 실수 행렬의 공통 운반체. node_id가 없으면 상수(gradient 0, backward edge 없음)
- Tape: 연산을 기록 순서(=위상 순서)대로 쌓고, backward()에서 역순으로 누적
- 모든 값은 float64. 희소 집계(spmm/scatter)는 scipy.sparse 사용
- 규약: 한 tape에서 backward는 1회만. 다시 학습하려면 reset() 또는 새 Tape()

사용 예:
    tape = Tape()
    W = tape.parameter(np.eye(2), "W")
    loss = sum_all(matmul(W, W))
    grads = tape.named_grads(tape.backward(loss))   # {"W": ...}
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

try:
    import scipy.sparse as sp
    from scipy.special import expit
except ModuleNotFoundError as e:
    raise ModuleNotFoundError(
        "scipy가 필요합니다. 가상환경 활성화 후 `pip install scipy`를 실행하세요."
    ) from e

from errors import BoundsError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# =========================
# 기본 타입
# =========================
class TapeMatrix:
    """dense 실수 행렬 (row-major). node_id/tape가 없으면 상수."""

    __slots__ = ("values", "node_id", "tape")

    def __init__(self, values, node_id: Optional[int] = None, tape: Optional["Tape"] = None):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"TapeMatrix는 2차원이어야 합니다: ndim={v.ndim}")
        self.values = v
        self.node_id = node_id
        self.tape = tape

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> Shape:
        return (self.rows, self.cols)

    @property
    def is_constant(self) -> bool:
        return self.node_id is None

    def __repr__(self) -> str:
        tag = "const" if self.node_id is None else f"#{self.node_id}"
        return f"<TapeMatrix {self.rows}x{self.cols} {tag}>"


Mat = Union[TapeMatrix, np.ndarray]


@dataclass
class _Op:
    name: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: BackwardFn


class Tape:
    """연산 기록. 입력은 항상 자신보다 먼저 기록되므로 리스트 순서가 곧 위상 순서."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self._ops: List[_Op] = []
        self._leaves: Dict[int, str] = {}
        self._shapes: Dict[int, Shape] = {}
        self._next_id = 0
        self._consumed = False

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def num_parameters(self) -> int:
        return len(self._leaves)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _new_id(self, shape: Shape) -> int:
        if self._consumed:
            raise TapeError("이미 backward가 끝난 tape입니다. reset() 후 사용하세요.")
        nid = self._next_id
        self._next_id += 1
        self._shapes[nid] = shape
        return nid

    def parameter(self, values, name: Optional[str] = None) -> TapeMatrix:
        """학습 파라미터(leaf) 등록. values는 복사하지 않는다."""
        m = TapeMatrix(values)
        nid = self._new_id(m.shape)
        self._leaves[nid] = name or f"param{nid}"
        m.node_id, m.tape = nid, self
        return m

    def record(self, name: str, inputs: Sequence[TapeMatrix], out: np.ndarray, backward: BackwardFn) -> TapeMatrix:
        res = TapeMatrix(out)
        nid = self._new_id(res.shape)
        ids = tuple(x.node_id if x.tape is self else None for x in inputs)
        self._ops.append(_Op(name, ids, nid, backward))
        res.node_id, res.tape = nid, self
        return res

    def backward(self, loss: TapeMatrix) -> Dict[int, np.ndarray]:
        """역전파. 반환: {parameter handle → gradient}. 두 번째 호출은 TapeError."""
        if self._consumed:
            raise TapeError("같은 tape에서 backward를 두 번 호출할 수 없습니다.")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss는 1x1 스칼라여야 합니다: {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss가 이 tape에 기록된 노드가 아닙니다.")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for op in reversed(self._ops):
            g = grads.get(op.output)
            if g is None:
                continue
            if op.output not in self._leaves:
                del grads[op.output]
            for nid, gi in zip(op.inputs, op.backward(g)):
                if nid is None or gi is None:
                    continue
                grads[nid] = grads[nid] + gi if nid in grads else gi
        self._consumed = True
        return {nid: grads.get(nid, np.zeros(self._shapes[nid])) for nid in self._leaves}

    def named_grads(self, grads: Dict[int, np.ndarray]) -> Dict[str, np.ndarray]:
        return {self._leaves[nid]: g for nid, g in grads.items()}


def backward(tape: Tape, loss: TapeMatrix) -> Dict[int, np.ndarray]:
    return tape.backward(loss)


# =========================
# 내부 유틸
# =========================
def _as(x: Mat) -> TapeMatrix:
    return x if isinstance(x, TapeMatrix) else TapeMatrix(x)


def _tape_of(*xs: TapeMatrix) -> Optional[Tape]:
    tape: Optional[Tape] = None
    for x in xs:
        if x.tape is None:
            continue
        if tape is not None and x.tape is not tape:
            raise TapeError("서로 다른 tape의 행렬을 한 연산에 섞을 수 없습니다. (detach 누락?)")
        tape = x.tape
    return tape


def _emit(name: str, inputs: Sequence[TapeMatrix], out: np.ndarray, backward_fn: BackwardFn) -> TapeMatrix:
    tape = _tape_of(*inputs)
    if tape is None:
        return TapeMatrix(out)
    return tape.record(name, inputs, out, backward_fn)


def _same_shape(op: str, a: TapeMatrix, b: TapeMatrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape 불일치 {a.shape} vs {b.shape}")


def _check_index(op: str, idx: np.ndarray, limit: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise BoundsError(f"{op}: 인덱스 범위 초과 (0 ≤ i < {limit})")
    return idx


def as_matrix(x: Mat) -> TapeMatrix:
    return _as(x)


def as_array(x: Mat) -> np.ndarray:
    return x.values if isinstance(x, TapeMatrix) else np.asarray(x, dtype=np.float64)


def constant(values) -> TapeMatrix:
    return TapeMatrix(values)


def detach(x: Mat) -> TapeMatrix:
    """값은 같고 tape handle이 없는 사본. gradient가 통과하지 않는다."""
    return TapeMatrix(as_array(x).copy())


# =========================
# 초기화
# =========================
def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


# =========================
# 선형대수
# =========================
def matmul(a: Mat, b: Mat) -> TapeMatrix:
    a, b = _as(a), _as(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: 내부 차원 불일치 {a.shape} @ {b.shape}")
    A, B = a.values, b.values

    def bw(g):
        return (g @ B.T if a.node_id is not None else None,
                A.T @ g if b.node_id is not None else None)

    return _emit("matmul", (a, b), A @ B, bw)


def spmm(adj: "sp.spmatrix", x: Mat) -> TapeMatrix:
    """상수 희소행렬 × 행렬. adj는 학습 대상이 아니다."""
    x = _as(x)
    if adj.shape[1] != x.rows:
        raise ShapeError(f"spmm: {adj.shape} @ {x.shape}")
    adj = sp.csr_matrix(adj)
    out = np.asarray(adj @ x.values)
    return _emit("spmm", (x,), out, lambda g: (np.asarray(adj.T @ g),))


# =========================
# 원소별 연산
# =========================
def add(a: Mat, b: Mat) -> TapeMatrix:
    a, b = _as(a), _as(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.values + b.values, lambda g: (g, g))


def sub(a: Mat, b: Mat) -> TapeMatrix:
    a, b = _as(a), _as(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Mat, b: Mat) -> TapeMatrix:
    a, b = _as(a), _as(b)
    _same_shape("mul", a, b)
    A, B = a.values, b.values
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(x: Mat, c: float) -> TapeMatrix:
    x = _as(x)
    c = float(c)
    return _emit("scale", (x,), x.values * c, lambda g: (g * c,))


def sigmoid(x: Mat) -> TapeMatrix:
    x = _as(x)
    out = expit(x.values)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Mat) -> TapeMatrix:
    x = _as(x)
    out = np.tanh(x.values)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: Mat) -> TapeMatrix:
    x = _as(x)
    pos = x.values > 0
    return _emit("relu", (x,), np.where(pos, x.values, 0.0), lambda g: (g * pos,))


def leaky_relu(x: Mat, slope: float = 0.2) -> TapeMatrix:
    x = _as(x)
    d = np.where(x.values > 0, 1.0, slope)
    return _emit("leaky_relu", (x,), x.values * d, lambda g: (g * d,))


def softplus(x: Mat) -> TapeMatrix:
    """log(1 + e^x), 큰 |x|에서도 안정적"""
    x = _as(x)
    v = x.values
    return _emit("softplus", (x,), np.logaddexp(0.0, v), lambda g: (g * expit(v),))


_UNARY: Dict[str, Callable[[Mat], TapeMatrix]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "identity": _as,
}


def elementwise(op: str, *args: Mat, scalar: Optional[float] = None) -> TapeMatrix:
    """op ∈ {add, mul, sigmoid, tanh, relu, scale}"""
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul(*args)
    if op == "scale":
        if scalar is None:
            raise ValueError("scale에는 scalar 값이 필요합니다.")
        return scale(args[0], scalar)
    if op in _UNARY:
        return _UNARY[op](args[0])
    raise ValueError(f"지원하지 않는 elementwise op: {op}")


def activation(name: str, x: Mat) -> TapeMatrix:
    if name not in _UNARY:
        raise ValueError(f"지원하지 않는 비선형 함수: {name}")
    return _UNARY[name](x)


# =========================
# broadcast가 필요한 최소 연산
# =========================
def add_row(x: Mat, b: Mat) -> TapeMatrix:
    """x[n×d] + b[1×d] (bias)"""
    x, b = _as(x), _as(b)
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"add_row: bias shape {b.shape}, 입력 {x.shape}")
    return _emit("add_row", (x, b), x.values + b.values, lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul_col(x: Mat, w: Mat) -> TapeMatrix:
    """x[n×d] * w[n×1] (행별 스칼라)"""
    x, w = _as(x), _as(w)
    if w.cols != 1 or w.rows != x.rows:
        raise ShapeError(f"mul_col: weight shape {w.shape}, 입력 {x.shape}")
    X, W = x.values, w.values
    return _emit("mul_col", (x, w), X * W, lambda g: (g * W, (g * X).sum(axis=1, keepdims=True)))


def mul_scalar(x: Mat, s: Mat) -> TapeMatrix:
    """x * s, s는 1×1 (학습 가능한 스칼라 가중치)"""
    x, s = _as(x), _as(s)
    if s.shape != (1, 1):
        raise ShapeError(f"mul_scalar: 스칼라는 1x1이어야 합니다: {s.shape}")
    X, c = x.values, float(s.values[0, 0])
    return _emit("mul_scalar", (x, s), X * c, lambda g: (g * c, np.array([[float((g * X).sum())]])))


def dropout(x: Mat, rate: float, rng: np.random.Generator) -> TapeMatrix:
    """inverted dropout. rate=0이면 그대로."""
    x = _as(x)
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate는 [0, 1) 이어야 합니다.")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask)


# =========================
# 행/열 조작
# =========================
def stack_rows(top: Mat, bottom: Mat) -> TapeMatrix:
    top, bottom = _as(top), _as(bottom)
    if top.cols != bottom.cols:
        raise ShapeError(f"stack_rows: 열 수 불일치 {top.shape} / {bottom.shape}")
    n = top.rows
    return _emit("stack_rows", (top, bottom), np.vstack([top.values, bottom.values]),
                 lambda g: (g[:n], g[n:]))


def slice_rows(x: Mat, lo: int, hi: int) -> TapeMatrix:
    """[lo, hi) 행. backward는 잘린 구간에만 gradient를 채운다."""
    x = _as(x)
    if not (0 <= lo < hi <= x.rows):
        raise BoundsError(f"slice_rows: [{lo}, {hi}) 가 0..{x.rows} 범위를 벗어났습니다.")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return (full,)

    return _emit("slice_rows", (x,), x.values[lo:hi], bw)


def slice_cols(x: Mat, lo: int, hi: int) -> TapeMatrix:
    x = _as(x)
    if not (0 <= lo < hi <= x.cols):
        raise BoundsError(f"slice_cols: [{lo}, {hi}) 가 0..{x.cols} 범위를 벗어났습니다.")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, lo:hi] = g
        return (full,)

    return _emit("slice_cols", (x,), x.values[:, lo:hi], bw)


def _selector(idx: np.ndarray, n: int) -> "sp.csr_matrix":
    """S[idx[e], e] = 1 인 n×E 희소행렬 (scatter용)"""
    e = idx.size
    return sp.csr_matrix((np.ones(e), (idx, np.arange(e))), shape=(n, e))


def gather_rows(x: Mat, idx) -> TapeMatrix:
    x = _as(x)
    idx = _check_index("gather_rows", idx, x.rows)
    n = x.rows

    def bw(g):
        return (np.asarray(_selector(idx, n) @ g),)

    return _emit("gather_rows", (x,), x.values[idx], bw)


def scatter_add_rows(x: Mat, idx, num_rows: int) -> TapeMatrix:
    """out[idx[e]] += x[e]"""
    x = _as(x)
    idx = _check_index("scatter_add_rows", idx, num_rows)
    if idx.size != x.rows:
        raise ShapeError(f"scatter_add_rows: index 길이 {idx.size} ≠ 행 수 {x.rows}")
    out = np.asarray(_selector(idx, num_rows) @ x.values) if x.rows else zeros(num_rows, x.cols)
    return _emit("scatter_add_rows", (x,), out, lambda g: (g[idx],))


def segment_softmax(logits: Mat, seg, num_segments: int) -> TapeMatrix:
    """logits[E×1]를 seg(목적지 노드)별로 softmax"""
    logits = _as(logits)
    if logits.cols != 1:
        raise ShapeError(f"segment_softmax: logits는 E×1 이어야 합니다: {logits.shape}")
    seg = _check_index("segment_softmax", seg, num_segments)
    if seg.size != logits.rows:
        raise ShapeError("segment_softmax: seg 길이와 logits 행 수가 다릅니다.")
    l = logits.values[:, 0]
    m = np.full(num_segments, -np.inf)
    np.maximum.at(m, seg, l)
    ex = np.exp(l - m[seg])
    denom = np.bincount(seg, weights=ex, minlength=num_segments)
    y = ex / denom[seg]

    def bw(g):
        gv = g[:, 0]
        s = np.bincount(seg, weights=y * gv, minlength=num_segments)
        return ((y * (gv - s[seg]))[:, None],)

    return _emit("segment_softmax", (logits,), y[:, None], bw)


def l2_normalize_rows(x: Mat, eps: float = 1e-12) -> TapeMatrix:
    x = _as(x)
    norm = np.sqrt((x.values ** 2).sum(axis=1, keepdims=True) + eps * eps)
    y = x.values / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _emit("l2_normalize_rows", (x,), y, bw)


# =========================
# 축약
# =========================
def row_sum(x: Mat) -> TapeMatrix:
    x = _as(x)
    d = x.cols
    return _emit("row_sum", (x,), x.values.sum(axis=1, keepdims=True),
                 lambda g: (np.repeat(g, d, axis=1),))


def sum_all(x: Mat) -> TapeMatrix:
    x = _as(x)
    shape = x.shape
    return _emit("sum_all", (x,), np.array([[x.values.sum()]]),
                 lambda g: (np.full(shape, float(g[0, 0])),))


def mean_all(x: Mat) -> TapeMatrix:
    x = _as(x)
    size = x.values.size
    if size == 0:
        raise ShapeError("mean_all: 빈 행렬의 평균은 정의되지 않습니다.")
    shape = x.shape
    return _emit("mean_all", (x,), np.array([[x.values.mean()]]),
                 lambda g: (np.full(shape, float(g[0, 0]) / size),))


# ---- 스모크 테스트 ----
if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    tape = Tape()
    W = tape.parameter(np.arange(4.0).reshape(2, 2), "W")
    loss = sum_all(matmul(W, W))
    g = tape.named_grads(tape.backward(loss))["W"]
    # d/dW sum(W·W) = 1·Wᵀ + Wᵀ·1
    ones = np.ones((2, 2))
    assert np.allclose(g, ones @ W.values.T + W.values.T @ ones)
    print("tensor_autodiff.py smoke test OK ✔")
