"""
최소 결정적 신경망 엔진

텐서(float32 numpy 배열), 모델에 필요한 다섯 가지 레이어
(conv / maxpool / relu / dropout / linear, 그리고 flatten),
NLL 손실, Adam, 유한차분 기울기 검증을 제공한다.
모든 레이어는 단일 샘플(C×H×W 또는 길이 n 벡터)을 처리한다.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, DEFAULT_LEARNING_RATE, NLL_EPSILON
from errors import ContractError, InvalidStateError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float32
Tensor = np.ndarray
Shape = Tuple[int, ...]


def as_tensor(values) -> Tensor:
    """임의 배열을 C-연속 float32 텐서로 변환"""
    return np.ascontiguousarray(values, dtype=DTYPE)


@dataclass
class Parameter:
    """학습 가능한 파라미터 (값 + 누적 기울기)"""
    name: str
    value: Tensor
    grad: Optional[Tensor] = None

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"기울기 형상 {self.grad.shape} != 값 형상 {self.value.shape} ({self.name})")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad.fill(0.0)


# ---------------------------------------------------------------------------
# 합성곱
# ---------------------------------------------------------------------------

@dataclass
class ConvCache:
    """conv2d backward에 필요한 forward 입력"""
    input: Tensor
    weight: Tensor
    stride: int
    padding: int


def conv2d_output_shape(input_shape: Shape, weight_shape: Shape, stride: int, padding: int) -> Shape:
    """conv2d 출력 형상 계산 및 검증"""
    if len(input_shape) != 3 or len(weight_shape) != 4:
        raise ShapeError(f"conv2d 입력은 C×H×W, 가중치는 O×C×K×K 여야 합니다: input {tuple(input_shape)}, weight {tuple(weight_shape)}")
    channels, height, width = input_shape
    out_channels, weight_channels, kernel, kernel_w = weight_shape
    if channels != weight_channels:
        raise ShapeError(f"채널 불일치: input {tuple(input_shape)}, weight {tuple(weight_shape)}")
    if kernel != kernel_w:
        raise ShapeError(f"정사각형 커널만 지원합니다: weight {tuple(weight_shape)}")
    if stride < 1 or padding < 0:
        raise ContractError(f"잘못된 stride/padding: stride={stride}, padding={padding}")
    if kernel > height + 2 * padding or kernel > width + 2 * padding:
        raise ShapeError(f"커널 {kernel}이 패딩된 입력보다 큽니다: input {tuple(input_shape)}, padding {padding}")
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    return (out_channels, out_h, out_w)


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _windows(padded: Tensor, kernel: int, stride: int) -> np.ndarray:
    # C × H' × W' × K × K 뷰
    windows = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    return windows[:, ::stride, ::stride]


def conv2d_forward(input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """직접 상호상관(cross-correlation) 합성곱: C×H×W → O×H'×W'"""
    input = as_tensor(input)
    weight = as_tensor(weight)
    out_shape = conv2d_output_shape(input.shape, weight.shape, stride, padding)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias 형상 {bias.shape} != ({weight.shape[0]},)")

    windows = _windows(_pad(input, padding), weight.shape[2], stride)
    out = np.tensordot(weight, windows, axes=([1, 2, 3], [0, 3, 4]))
    out += bias[:, None, None]
    assert out.shape == out_shape
    return as_tensor(out)


def conv2d_backward(grad_out: Tensor, cache: Optional[ConvCache]) -> Tuple[Tensor, Tensor, Tensor]:
    """(grad_input, grad_weight, grad_bias) 반환"""
    if cache is None:
        raise InvalidStateError("conv2d backward 호출 전에 forward 캐시가 없습니다")
    x, weight, stride, padding = cache.input, cache.weight, cache.stride, cache.padding
    expected = conv2d_output_shape(x.shape, weight.shape, stride, padding)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out 형상 {grad_out.shape} != forward 출력 형상 {expected}")

    kernel = weight.shape[2]
    padded = _pad(x, padding)
    windows = _windows(padded, kernel, stride)
    grad_weight = np.tensordot(grad_out, windows, axes=([1, 2], [1, 2]))
    grad_bias = grad_out.sum(axis=(1, 2))

    out_h, out_w = grad_out.shape[1:]
    grad_padded = np.zeros_like(padded)
    for i in range(kernel):
        for j in range(kernel):
            contribution = np.tensordot(weight[:, :, i, j], grad_out, axes=([0], [0]))
            grad_padded[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += contribution

    height, width = x.shape[1:]
    grad_input = grad_padded[:, padding:padding + height, padding:padding + width]
    return as_tensor(grad_input), as_tensor(grad_weight), as_tensor(grad_bias)


# ---------------------------------------------------------------------------
# 풀링 / 활성화 / 드롭아웃 / 완전연결
# ---------------------------------------------------------------------------

def maxpool2d_output_shape(input_shape: Shape, window: int = 2, stride: int = 2) -> Shape:
    if window != stride:
        raise ContractError(f"겹치지 않는 풀링만 지원합니다: window={window}, stride={stride}")
    if len(input_shape) != 3:
        raise ShapeError(f"maxpool2d 입력은 C×H×W 여야 합니다: {tuple(input_shape)}")
    channels, height, width = input_shape
    if height < window or width < window:
        raise ShapeError(f"풀링 창 {window}이 입력 {tuple(input_shape)}보다 큽니다")
    return (channels, height // window, width // window)


def _pool_blocks(x: Tensor, window: int) -> np.ndarray:
    channels = x.shape[0]
    out_h, out_w = x.shape[1] // window, x.shape[2] // window
    cropped = x[:, :out_h * window, :out_w * window]
    blocks = cropped.reshape(channels, out_h, window, out_w, window).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(channels, out_h, out_w, window * window)


def maxpool2d_forward(input: Tensor, window: int = 2, stride: int = 2) -> Tuple[Tensor, np.ndarray]:
    """창별 최댓값과 argmax(행 우선 순서의 첫 최댓값) 반환"""
    maxpool2d_output_shape(input.shape, window, stride)
    blocks = _pool_blocks(input, window)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return as_tensor(out), argmax


def maxpool2d_backward(grad_out: Tensor, argmax: np.ndarray, input_shape: Shape, window: int = 2) -> Tensor:
    """기울기를 argmax 위치로만 전달"""
    channels, out_h, out_w = argmax.shape
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out 형상 {grad_out.shape} != 풀링 출력 형상 {argmax.shape}")
    routed = np.zeros((channels, out_h, out_w, window * window), dtype=DTYPE)
    np.put_along_axis(routed, argmax[..., None], grad_out[..., None], axis=-1)
    routed = routed.reshape(channels, out_h, out_w, window, window).transpose(0, 1, 3, 2, 4)
    grad_input = np.zeros(input_shape, dtype=DTYPE)
    grad_input[:, :out_h * window, :out_w * window] = routed.reshape(channels, out_h * window, out_w * window)
    return grad_input


def relu_forward(input: Tensor) -> Tensor:
    return np.maximum(input, 0).astype(DTYPE, copy=False)


def relu_backward(grad_out: Tensor, input: Tensor) -> Tensor:
    # x == 0 에서의 미분은 0
    return as_tensor(grad_out * (input > 0))


def dropout_forward(input: Tensor, rate: float, training: bool,
                    rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Optional[Tensor]]:
    """inverted dropout: 학습 모드에서만 마스킹 후 1/(1-rate)로 스케일"""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout 비율은 [0, 1) 범위여야 합니다: {rate}")
    if not training or rate == 0.0:
        return input, None
    if rng is None:
        raise ContractError("학습 모드 dropout에는 rng가 필요합니다")
    keep = rng.random(input.shape) >= rate
    mask = keep.astype(DTYPE) * DTYPE(1.0 / (1.0 - rate))
    return as_tensor(input * mask), mask


def linear_forward(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = W·x + b"""
    if input.ndim != 1 or weight.ndim != 2 or input.shape[0] != weight.shape[1]:
        raise ShapeError(f"linear 형상 불일치: input {input.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias 형상 {bias.shape} != ({weight.shape[0]},)")
    return as_tensor(weight @ input + bias)


def linear_backward(grad_out: Tensor, input: Tensor, weight: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    return as_tensor(weight.T @ grad_out), as_tensor(np.outer(grad_out, input)), as_tensor(grad_out)


# ---------------------------------------------------------------------------
# 레이어
# ---------------------------------------------------------------------------

def _uniform_init(rng: np.random.Generator, shape: Shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return as_tensor(rng.uniform(-bound, bound, size=shape))


class Layer:
    """레이어 공통 인터페이스

    forward(cache=True)는 backward용 활성값을 레이어에 저장한다.
    cache=False 경로는 상태를 변경하지 않으므로 동시 추론에 사용할 수 있다.
    """

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> List[Parameter]:
        return []

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def forward(self, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None, cache: bool = True) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def signature(self) -> bytes:
        """마지막 forward의 비미분 지점 패턴 (ReLU 마스크, 풀링 argmax)"""
        return b""

    def describe(self) -> str:
        return self.kind


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, rng: Optional[np.random.Generator] = None):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(f"{name}.weight",
                                _uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(f"{name}.bias", _uniform_init(rng, (out_channels,), fan_in))
        self._cache: Optional[ConvCache] = None

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def output_shape(self, input_shape: Shape) -> Shape:
        return conv2d_output_shape(input_shape, self.weight.value.shape, self.stride, self.padding)

    def forward(self, x, training=False, rng=None, cache=True):
        out = conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)
        if cache:
            self._cache = ConvCache(x, self.weight.value, self.stride, self.padding)
        return out

    def backward(self, grad):
        grad_input, grad_weight, grad_bias = conv2d_backward(grad, self._cache)
        self.weight.grad += grad_weight
        self.bias.grad += grad_bias
        return grad_input

    def describe(self) -> str:
        out_c, in_c, k, _ = self.weight.value.shape
        return f"conv({in_c}→{out_c},k{k},s{self.stride},p{self.padding})"


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, name: str, window: int = 2, stride: int = 2):
        super().__init__(name)
        self.window = window
        self.stride = stride
        self._argmax: Optional[np.ndarray] = None
        self._input_shape: Optional[Shape] = None

    def output_shape(self, input_shape):
        return maxpool2d_output_shape(input_shape, self.window, self.stride)

    def forward(self, x, training=False, rng=None, cache=True):
        out, argmax = maxpool2d_forward(x, self.window, self.stride)
        if cache:
            self._argmax, self._input_shape = argmax, x.shape
        return out

    def backward(self, grad):
        if self._argmax is None:
            raise InvalidStateError(f"{self.name}: forward 캐시가 없습니다")
        return maxpool2d_backward(grad, self._argmax, self._input_shape, self.window)

    def signature(self):
        return b"" if self._argmax is None else self._argmax.astype(np.uint8).tobytes()

    def describe(self):
        return f"maxpool{self.window}"


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str):
        super().__init__(name)
        self._input: Optional[Tensor] = None

    def forward(self, x, training=False, rng=None, cache=True):
        if cache:
            self._input = x
        return relu_forward(x)

    def backward(self, grad):
        if self._input is None:
            raise InvalidStateError(f"{self.name}: forward 캐시가 없습니다")
        return relu_backward(grad, self._input)

    def signature(self):
        return b"" if self._input is None else np.packbits(self._input > 0).tobytes()


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout 비율은 [0, 1) 범위여야 합니다: {rate}")
        self.rate = rate
        self._mask: Optional[Tensor] = None

    def forward(self, x, training=False, rng=None, cache=True):
        out, mask = dropout_forward(x, self.rate, training, rng)
        if cache:
            self._mask = mask
        return out

    def backward(self, grad):
        return grad if self._mask is None else as_tensor(grad * self._mask)

    def describe(self):
        return f"dropout({self.rate})"


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name: str):
        super().__init__(name)
        self._input_shape: Optional[Shape] = None

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None, cache=True):
        if cache:
            self._input_shape = x.shape
        return x.reshape(-1)

    def backward(self, grad):
        if self._input_shape is None:
            raise InvalidStateError(f"{self.name}: forward 캐시가 없습니다")
        return grad.reshape(self._input_shape)

    def describe(self):
        return "flatten"


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(f"{name}.weight", _uniform_init(rng, (out_features, in_features), in_features))
        self.bias = Parameter(f"{name}.bias", _uniform_init(rng, (out_features,), in_features))
        self._input: Optional[Tensor] = None

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.weight.value.shape[1],):
            raise ShapeError(f"{self.name}: 입력 형상 {tuple(input_shape)} != ({self.weight.value.shape[1]},)")
        return (self.weight.value.shape[0],)

    def forward(self, x, training=False, rng=None, cache=True):
        out = linear_forward(x, self.weight.value, self.bias.value)
        if cache:
            self._input = x
        return out

    def backward(self, grad):
        if self._input is None:
            raise InvalidStateError(f"{self.name}: forward 캐시가 없습니다")
        grad_input, grad_weight, grad_bias = linear_backward(grad, self._input, self.weight.value)
        self.weight.grad += grad_weight
        self.bias.grad += grad_bias
        return grad_input

    def describe(self):
        out_f, in_f = self.weight.value.shape
        return f"linear({in_f}→{out_f})"


class Sequential(Layer):
    """순서가 있는 레이어 스택"""

    kind = "sequential"

    def __init__(self, name: str, layers: Sequence[Layer]):
        super().__init__(name)
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def shape_chain(self, input_shape: Shape) -> List[Shape]:
        """입력부터 각 레이어 출력까지의 형상 목록 (검증 포함)"""
        shapes = [tuple(input_shape)]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    def output_shape(self, input_shape):
        return self.shape_chain(input_shape)[-1]

    def forward(self, x, training=False, rng=None, cache=True):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng, cache=cache)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def signature(self):
        return b"|".join(layer.signature() for layer in self.layers)

    def describe(self):
        return " → ".join(layer.describe() for layer in self.layers)


# ---------------------------------------------------------------------------
# 손실 / 옵티마이저
# ---------------------------------------------------------------------------

def _check_probs(probs: np.ndarray, target: int):
    if probs.shape != (2,):
        raise ShapeError(f"확률 벡터는 길이 2여야 합니다: {probs.shape}")
    if target not in (0, 1):
        raise ContractError(f"클래스 인덱스는 0 또는 1이어야 합니다: {target}")
    if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ContractError(f"확률 벡터가 정규화되지 않았습니다: {probs.tolist()}")


def nll_loss(probs: np.ndarray, target: int) -> float:
    """확률 입력에 대한 negative log-likelihood: -ln(max(p[target], ε))"""
    probs = np.asarray(probs, dtype=np.float64)
    _check_probs(probs, target)
    return float(-np.log(max(probs[target], NLL_EPSILON)))


def nll_backward(probs: np.ndarray, target: int) -> np.ndarray:
    """확률 벡터에 대한 NLL 기울기 (target 원소만 0이 아님)"""
    probs = np.asarray(probs, dtype=np.float64)
    _check_probs(probs, target)
    grad = np.zeros(2, dtype=np.float64)
    grad[target] = -1.0 / max(probs[target], NLL_EPSILON)
    return grad


@dataclass
class AdamState:
    """파라미터 하나에 대한 Adam 모멘트 상태"""
    first_moment: Tensor
    second_moment: Tensor
    step_count: int = 0
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def for_parameter(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **hyper)


def adam_step(param: Parameter, state: AdamState):
    """편향 보정 Adam 업데이트 (in-place)"""
    if state.first_moment.shape != param.value.shape:
        raise ShapeError(f"Adam 상태 형상 {state.first_moment.shape} != 파라미터 형상 {param.value.shape}")
    grad = param.grad
    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grad * grad)

    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    param.value -= as_tensor(state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))


class Adam:
    """파라미터 이름별 AdamState를 관리하는 옵티마이저"""

    def __init__(self, params: Iterable[Parameter], lr: float = DEFAULT_LEARNING_RATE,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, epsilon: float = ADAM_EPSILON):
        self.params = list(params)
        self.states: Dict[str, AdamState] = {
            p.name: AdamState.for_parameter(p, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
            for p in self.params
        }

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            adam_step(p, self.states[p.name])


# ---------------------------------------------------------------------------
# 유한차분 검증
# ---------------------------------------------------------------------------

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def _projection_objective(shape: Shape, seed: int) -> Objective:
    projection = np.random.default_rng(seed).uniform(-1.0, 1.0, size=shape)

    def objective(out: np.ndarray) -> Tuple[float, np.ndarray]:
        return float(np.sum(out.astype(np.float64) * projection)), projection

    return objective


@dataclass
class GradCheckResult:
    """유한차분 검증 결과"""
    max_relative_error: float
    errors: Dict[str, float] = field(default_factory=dict)
    skipped: int = 0


def grad_check(fragment, x: Tensor, h: float = 1e-3, objective: Optional[Objective] = None,
               seed: int = 0) -> GradCheckResult:
    """해석적 backward와 중심 유한차분을 비교

    fragment는 forward/backward/parameters를 제공하는 순수(eval 모드) 레이어 또는 모델이다.
    상대 오차는 배열별 ||a - n|| / (||a|| + ||n||) 이며 최댓값을 반환한다.
    ReLU 마스크나 풀링 argmax가 ±h 섭동으로 바뀌는 원소는 비미분 지점으로 보고 제외한다.
    """
    x = as_tensor(x).copy()
    params = fragment.parameters()
    for p in params:
        p.zero_grad()

    out = fragment.forward(x, training=False)
    if objective is None:
        objective = _projection_objective(out.shape, seed)
    _, grad_out = objective(out)
    base_signature = fragment.signature()
    grad_x = fragment.backward(np.asarray(grad_out, dtype=out.dtype))

    targets = [("input", x, np.asarray(grad_x, dtype=np.float64))]
    targets += [(p.name, p.value, p.grad.astype(np.float64)) for p in params]

    def evaluate() -> Tuple[float, bytes]:
        value, _ = objective(fragment.forward(x, training=False))
        return value, fragment.signature()

    result = GradCheckResult(max_relative_error=0.0)
    for name, array, analytic in targets:
        numeric = np.zeros(array.shape, dtype=np.float64)
        keep = np.ones(array.shape, dtype=bool)
        for idx in np.ndindex(*array.shape):
            original = array[idx]
            array[idx] = original + DTYPE(h)
            plus_value = array[idx]
            f_plus, sig_plus = evaluate()
            array[idx] = original - DTYPE(h)
            minus_value = array[idx]
            f_minus, sig_minus = evaluate()
            array[idx] = original
            if sig_plus != base_signature or sig_minus != base_signature:
                keep[idx] = False
                result.skipped += 1
                continue
            numeric[idx] = (f_plus - f_minus) / (float(plus_value) - float(minus_value))

        a, n = analytic[keep], numeric[keep]
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        error = 0.0 if denom == 0.0 else float(np.linalg.norm(a - n) / denom)
        result.errors[name] = error
        result.max_relative_error = max(result.max_relative_error, error)

    logger.debug(f"grad_check 완료: 최대 상대 오차 {result.max_relative_error:.2e}, 제외 {result.skipped}개")
    return result
