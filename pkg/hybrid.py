"""
하이브리드 양자-고전 모델

고전 CNN 스택이 스칼라 각도 θ를 만들고, 양자 헤드(H → Ry(θ))의 측정 분포가
최종 2-클래스 확률 [p0, p1]이 된다. 클래스 1 = malignant, 0 = benign.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from config import M1_DROPOUT_RATE, M3_DROPOUT_RATE
from errors import ContractError, InvalidStateError, ShapeError
from qsim import Observable, param_shift_grad, head_circuit, prob_one, run_circuit, sample_shots
from tensor_nn import (
    DTYPE,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    Parameter,
    ReLU,
    Sequential,
    Shape,
    Tensor,
    as_tensor,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadMode:
    """양자 헤드 실행 모드 (analytic 또는 shots:N)"""
    kind: str = "analytic"
    shots: int = 0

    @classmethod
    def parse(cls, text: str) -> "HeadMode":
        text = str(text).strip().lower()
        if text == "analytic":
            return cls()
        if text.startswith("shots:"):
            try:
                shots = int(text.split(":", 1)[1])
            except ValueError:
                raise ContractError(f"잘못된 헤드 모드: {text}")
            if shots < 1:
                raise ContractError(f"shots는 1 이상이어야 합니다: {text}")
            return cls("shots", shots)
        raise ContractError(f"헤드 모드는 analytic 또는 shots:N 이어야 합니다: {text}")

    @property
    def analytic(self) -> bool:
        return self.kind == "analytic"

    def __str__(self) -> str:
        return "analytic" if self.analytic else f"shots:{self.shots}"


class QuantumHead:
    """스칼라 각도를 측정 분포로 변환하는 1-파라미터 양자 헤드 (호출 간 상태 없음)"""

    def __init__(self, mode: HeadMode = HeadMode()):
        self.circuit = head_circuit()
        self.mode = mode

    def _require_rng(self, rng):
        if not self.mode.analytic and rng is None:
            raise ContractError("샷 모드 헤드에는 rng가 필요합니다")

    def forward(self, theta: float, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """[p0, p1], p1 = P(|1⟩) = (1 + sin θ) / 2 (analytic)"""
        theta = float(theta)
        if not np.isfinite(theta):
            raise ContractError(f"θ가 유한하지 않습니다: {theta}")
        state = run_circuit(self.circuit, [theta])
        if self.mode.analytic:
            p1 = prob_one(state)
        else:
            self._require_rng(rng)
            _, n1 = sample_shots(state, self.mode.shots, rng=rng)
            p1 = n1 / self.mode.shots
        return np.array([1.0 - p1, p1], dtype=np.float64)

    def backward(self, upstream: np.ndarray, theta: float,
                 rng: Optional[np.random.Generator] = None) -> float:
        """upstream · [dp0/dθ, dp1/dθ], dp1/dθ는 P(1) 관측량의 parameter-shift"""
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (2,):
            raise ShapeError(f"헤드 upstream 기울기는 길이 2여야 합니다: {upstream.shape}")
        self._require_rng(rng)
        shots = None if self.mode.analytic else self.mode.shots
        dp1 = param_shift_grad(self.circuit, [float(theta)], 0, Observable.PROJECTOR_ONE, shots=shots, rng=rng)
        return float(upstream[1] * dp1 - upstream[0] * dp1)


_ANALYTIC_HEAD = QuantumHead()


def head_forward(theta: float) -> np.ndarray:
    return _ANALYTIC_HEAD.forward(theta)


def head_backward(upstream: np.ndarray, theta: float) -> float:
    return _ANALYTIC_HEAD.backward(upstream, theta)


class HybridModel:
    """고전 레이어 스택 + 양자 헤드"""

    def __init__(self, model_id: str, layers: Sequential, head: QuantumHead, input_shape: Shape):
        self.model_id = model_id
        self.layers = layers
        self.head = head
        self.input_shape = tuple(input_shape)

        # 구성 시점에 형상 체인 검증
        self.shape_chain = layers.shape_chain(self.input_shape)
        if self.shape_chain[-1] != (1,):
            raise ShapeError(f"{model_id}: 마지막 고전 레이어 출력은 (1,)이어야 합니다: {self.shape_chain[-1]}")
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ContractError(f"{model_id}: 파라미터 이름이 중복됩니다")

        self._theta: Optional[float] = None
        self._rng: Optional[np.random.Generator] = None

    def parameters(self) -> List[Parameter]:
        return self.layers.parameters()

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def flatten_size(self) -> Optional[int]:
        for layer, shape in zip(self.layers.layers, self.shape_chain[1:]):
            if isinstance(layer, Flatten):
                return shape[0]
        return None

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, image: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None, cache: bool = True) -> np.ndarray:
        if tuple(image.shape) != self.input_shape:
            raise ShapeError(f"{self.model_id}: 입력 형상 {tuple(image.shape)} != {self.input_shape}")
        theta = self.layers.forward(as_tensor(image), training=training, rng=rng, cache=cache)[0]
        probs = self.head.forward(theta, rng)
        if cache:
            self._theta, self._rng = float(theta), rng
        return probs

    def backward(self, grad_probs: np.ndarray) -> Tensor:
        """헤드 기울기를 고전 스택으로 역전파 (파라미터 기울기는 누적됨)"""
        if self._theta is None:
            raise InvalidStateError(f"{self.model_id}: backward 전에 forward가 필요합니다")
        grad_theta = self.head.backward(grad_probs, self._theta, rng=self._rng)
        return self.layers.backward(np.array([grad_theta], dtype=DTYPE))

    def predict(self, image: Tensor, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """캐시를 남기지 않는 eval 모드 추론 (동시 호출 가능)"""
        return self.forward(image, training=False, rng=rng, cache=False)

    def signature(self) -> bytes:
        return self.layers.signature()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, tensors: Dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(tensors):
            missing = sorted(set(params) - set(tensors))
            unexpected = sorted(set(tensors) - set(params))
            raise ContractError(f"{self.model_id}: 파라미터 이름 불일치 (누락 {missing}, 초과 {unexpected})")
        for name, value in tensors.items():
            if params[name].value.shape != value.shape:
                raise ShapeError(f"{name}: 형상 {value.shape} != {params[name].value.shape}")
            params[name].value[...] = as_tensor(value)

    def summary(self) -> str:
        return (f"{self.model_id}: input {'×'.join(map(str, self.input_shape))} → "
                f"{self.layers.describe()} → head(H→Ry(θ), {self.head.mode}) "
                f"[파라미터 {self.parameter_count}개]")


def _pin_flatten(model: HybridModel, expected: int) -> HybridModel:
    if model.flatten_size != expected:
        raise ShapeError(f"{model.model_id}: flatten 크기 {model.flatten_size} != {expected}")
    return model


def build_m1(seed: int = 0, head_mode: HeadMode = HeadMode(),
             dropout_rate: float = M1_DROPOUT_RATE) -> HybridModel:
    """M1: conv(3→10,k5) → conv(10→20,k5) → dropout → FC 500 → 500 → 1"""
    rng = np.random.default_rng(seed)
    layers = Sequential("m1", [
        Conv2d("conv1", 3, 10, 5, rng=rng), ReLU("relu1"), MaxPool2d("pool1"),
        Conv2d("conv2", 10, 20, 5, rng=rng), ReLU("relu2"), MaxPool2d("pool2"),
        Dropout("dropout1", dropout_rate), Flatten("flatten"),
        Linear("fc1", 500, 500, rng=rng), ReLU("relu3"),
        Linear("fc2", 500, 1, rng=rng),
    ])
    return _pin_flatten(HybridModel("m1", layers, QuantumHead(head_mode), (3, 32, 32)), 500)


def build_m2(seed: int = 0, head_mode: HeadMode = HeadMode()) -> HybridModel:
    """M2: LeNet 계열, dropout 없음, FC 400 → 120 → 84 → 1"""
    rng = np.random.default_rng(seed)
    layers = Sequential("m2", [
        Conv2d("conv1", 3, 6, 5, rng=rng), ReLU("relu1"), MaxPool2d("pool1"),
        Conv2d("conv2", 6, 16, 5, rng=rng), ReLU("relu2"), MaxPool2d("pool2"),
        Flatten("flatten"),
        Linear("fc1", 400, 120, rng=rng), ReLU("relu3"),
        Linear("fc2", 120, 84, rng=rng), ReLU("relu4"),
        Linear("fc3", 84, 1, rng=rng),
    ])
    return _pin_flatten(HybridModel("m2", layers, QuantumHead(head_mode), (3, 32, 32)), 400)


def build_m3(seed: int = 0, head_mode: HeadMode = HeadMode(),
             dropout_rate: float = M3_DROPOUT_RATE) -> HybridModel:
    """M3: 250×250 입력, stride 2 conv 두 개 (첫 번째만 padding 2), FC 55815 → 120 → 84 → 1

    채널 수와 padding 배치는 flatten 크기 55815(= 15·61·61)에 맞춘 재구성이다.
    """
    rng = np.random.default_rng(seed)
    layers = Sequential("m3", [
        Conv2d("conv1", 3, 6, 5, stride=2, padding=2, rng=rng), ReLU("relu1"), Dropout("dropout1", dropout_rate),
        Conv2d("conv2", 6, 15, 5, stride=2, padding=0, rng=rng), ReLU("relu2"), Dropout("dropout2", dropout_rate),
        Flatten("flatten"),
        Linear("fc1", 55815, 120, rng=rng), ReLU("relu3"),
        Linear("fc2", 120, 84, rng=rng), ReLU("relu4"),
        Linear("fc3", 84, 1, rng=rng),
    ])
    return _pin_flatten(HybridModel("m3", layers, QuantumHead(head_mode), (3, 250, 250)), 55815)


def build_toy(seed: int = 0, head_mode: HeadMode = HeadMode(),
              input_size: int = 8, channels: int = 2, hidden: int = 8,
              dropout_rate: float = 0.25) -> HybridModel:
    """테스트용 축소 모델: conv(3→channels,k3,p1) → pool → dropout → FC → 1"""
    rng = np.random.default_rng(seed)
    pooled = input_size // 2
    layers = Sequential("toy", [
        Conv2d("conv1", 3, channels, 3, padding=1, rng=rng), ReLU("relu1"), MaxPool2d("pool1"),
        Dropout("dropout1", dropout_rate), Flatten("flatten"),
        Linear("fc1", channels * pooled * pooled, hidden, rng=rng), ReLU("relu2"),
        Linear("fc2", hidden, 1, rng=rng),
    ])
    return HybridModel("toy", layers, QuantumHead(head_mode), (3, input_size, input_size))


MODEL_BUILDERS: Dict[str, Callable[..., HybridModel]] = {
    "m1": build_m1,
    "m2": build_m2,
    "m3": build_m3,
    "toy": build_toy,
}

INPUT_SIZES: Dict[str, int] = {"m1": 32, "m2": 32, "m3": 250, "toy": 8}


def build_model(model_id: str, seed: int = 0, head_mode: HeadMode = HeadMode()) -> HybridModel:
    """모델 ID로 빌더 선택"""
    model_id = model_id.lower()
    if model_id not in MODEL_BUILDERS:
        raise ContractError(f"알 수 없는 모델 ID: {model_id} (지원: {', '.join(MODEL_BUILDERS)})")
    model = MODEL_BUILDERS[model_id](seed=seed, head_mode=head_mode)
    logger.debug(model.summary())
    return model
