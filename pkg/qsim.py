"""
단일 큐비트 상태벡터 시뮬레이터

Hadamard / Rx / Ry / Rz 게이트, Pauli-Z 기댓값, 샷 샘플링,
parameter-shift 미분을 제공한다. 모든 연산은 입력에 대한 순수 함수이며
64비트 실수(complex128)로 계산한다.

회전 규약: Ry(θ) = [[cos(θ/2), -sin(θ/2)], [sin(θ/2), cos(θ/2)]]
이 규약에서 H → Ry(θ) 회로의 ⟨σ_z⟩ = -sin θ 이다.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import ArityError, ContractError, UnsupportedGateError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-12
SHIFT = np.pi / 2


@dataclass(frozen=True)
class QubitState:
    """두 개의 복소 진폭으로 표현되는 단일 큐비트 상태"""
    amp0: complex
    amp1: complex

    @classmethod
    def zero(cls) -> "QubitState":
        return cls(1.0 + 0.0j, 0.0 + 0.0j)

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "QubitState":
        return cls(complex(vector[0]), complex(vector[1]))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.amp0, self.amp1], dtype=np.complex128)

    @property
    def norm(self) -> float:
        return abs(self.amp0) ** 2 + abs(self.amp1) ** 2


class GateKind(str, Enum):
    H = "H"
    RX = "Rx"
    RY = "Ry"
    RZ = "Rz"

    @property
    def is_rotation(self) -> bool:
        return self is not GateKind.H


@dataclass(frozen=True)
class Gate:
    """게이트 종류, 고정 각도, 자유 파라미터 슬롯"""
    kind: GateKind
    angle: Optional[float] = None
    slot: Optional[int] = None

    def matrix(self, angle: Optional[float] = None) -> np.ndarray:
        """게이트의 2×2 유니터리 행렬 (angle이 주어지면 바인딩 값 사용)"""
        if self.kind is GateKind.H:
            return np.array([[1.0, 1.0], [1.0, -1.0]], dtype=np.complex128) / np.sqrt(2.0)

        theta = self.angle if angle is None else angle
        if theta is None:
            raise ContractError(f"{self.kind.value} 게이트에 각도가 없습니다")
        c, s = np.cos(theta / 2.0), np.sin(theta / 2.0)
        if self.kind is GateKind.RX:
            return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)
        if self.kind is GateKind.RY:
            return np.array([[c, -s], [s, c]], dtype=np.complex128)
        return np.array([[np.exp(-0.5j * theta), 0.0], [0.0, np.exp(0.5j * theta)]], dtype=np.complex128)


def hadamard() -> Gate:
    return Gate(GateKind.H)


def rx(angle: Optional[float] = None, slot: Optional[int] = None) -> Gate:
    return Gate(GateKind.RX, angle, slot)


def ry(angle: Optional[float] = None, slot: Optional[int] = None) -> Gate:
    return Gate(GateKind.RY, angle, slot)


def rz(angle: Optional[float] = None, slot: Optional[int] = None) -> Gate:
    return Gate(GateKind.RZ, angle, slot)


@dataclass(frozen=True)
class Circuit:
    """순서가 있는 단일 큐비트 게이트 목록"""
    gates: Tuple[Gate, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        slots = sorted({g.slot for g in self.gates if g.slot is not None})
        if slots != list(range(len(slots))):
            raise ContractError(f"파라미터 슬롯은 0..n-1로 연속이어야 합니다: {slots}")

    @property
    def num_parameters(self) -> int:
        return len({g.slot for g in self.gates if g.slot is not None})


class Observable(str, Enum):
    PAULI_Z = "Z"
    # |1⟩⟨1| = (I - Z) / 2, 헤드의 P(1) 미분에 사용
    PROJECTOR_ONE = "P1"


def head_circuit() -> Circuit:
    """H → Ry(θ) 템플릿 (θ는 슬롯 0)"""
    return Circuit((hadamard(), ry(slot=0)))


def apply_gate(state: QubitState, gate: Gate, angle: Optional[float] = None) -> QubitState:
    """state' = U·state"""
    new_state = QubitState.from_vector(gate.matrix(angle) @ state.vector)
    if abs(new_state.norm - 1.0) > NORM_TOLERANCE:
        logger.warning(f"게이트 적용 후 노름 편차: {new_state.norm - 1.0:.3e}")
    return new_state


def run_circuit(circuit: Circuit, bindings: Sequence[float] = ()) -> QubitState:
    """|0⟩에서 시작해 게이트를 순서대로 적용"""
    return _simulate(circuit, bindings)


def _simulate(circuit: Circuit, bindings: Sequence[float],
              override: Optional[Tuple[int, float]] = None) -> QubitState:
    # override = (게이트 인덱스, 각도): 해당 게이트만 주어진 각도로 실행
    bindings = list(bindings)
    if len(bindings) != circuit.num_parameters:
        raise ArityError(f"바인딩 개수 {len(bindings)} != 자유 파라미터 개수 {circuit.num_parameters}")
    state = QubitState.zero()
    for index, gate in enumerate(circuit.gates):
        angle = bindings[gate.slot] if (gate.slot is not None and gate.kind.is_rotation) else None
        if override is not None and override[0] == index:
            angle = override[1]
        state = apply_gate(state, gate, angle)
    return state


def expectation_z(state: QubitState) -> float:
    """⟨σ_z⟩ = |amp0|² - |amp1|²"""
    value = abs(state.amp0) ** 2 - abs(state.amp1) ** 2
    return float(np.clip(value, -1.0, 1.0))


def prob_one(state: QubitState) -> float:
    """|1⟩ 측정 확률 = (1 - ⟨σ_z⟩) / 2"""
    return (1.0 - expectation_z(state)) / 2.0


def prob_zero(state: QubitState) -> float:
    return 1.0 - prob_one(state)


def expectation(state: QubitState, observable: Observable) -> float:
    if observable is Observable.PAULI_Z:
        return expectation_z(state)
    return prob_one(state)


def sample_shots(state: QubitState, shots: int, seed=None,
                 rng: Optional[np.random.Generator] = None) -> Tuple[int, int]:
    """계산 기저 측정을 shots번 샘플링하여 (n0, n1) 반환"""
    if shots < 1:
        raise ContractError(f"shots는 1 이상이어야 합니다: {shots}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    n1 = int(rng.binomial(shots, prob_one(state)))
    return shots - n1, n1


def estimate_expectation(state: QubitState, observable: Observable, shots: int,
                         rng: np.random.Generator) -> float:
    """샷 기반 기댓값 추정"""
    n0, n1 = sample_shots(state, shots, rng=rng)
    if observable is Observable.PAULI_Z:
        return (n0 - n1) / shots
    return n1 / shots


def param_shift_grad(circuit: Circuit, bindings: Sequence[float], slot: int,
                     observable: Observable = Observable.PAULI_Z,
                     shots: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """(E(θ+π/2) - E(θ-π/2)) / 2

    한 슬롯이 여러 회전 게이트에 바인딩된 경우 게이트별 이동 결과를 합산한다.
    shots가 주어지면 이동된 회로의 기댓값을 샷으로 추정한다.
    """
    if not 0 <= slot < circuit.num_parameters:
        raise ArityError(f"슬롯 {slot}이 범위 밖입니다 (파라미터 {circuit.num_parameters}개)")
    bound = [i for i, g in enumerate(circuit.gates) if g.slot == slot]
    for i in bound:
        if not circuit.gates[i].kind.is_rotation:
            raise UnsupportedGateError(f"슬롯 {slot}이 회전 게이트가 아닌 {circuit.gates[i].kind.value}에 바인딩되어 있습니다")
    if shots is not None and rng is None:
        raise ContractError("샷 기반 parameter-shift에는 rng가 필요합니다")

    def evaluate(index: int, angle: float) -> float:
        state = _simulate(circuit, bindings, override=(index, angle))
        if shots is None:
            return expectation(state, observable)
        return estimate_expectation(state, observable, shots, rng)

    theta = bindings[slot]
    grad = 0.0
    for index in bound:
        grad += (evaluate(index, theta + SHIFT) - evaluate(index, theta - SHIFT)) / 2.0
    return grad
