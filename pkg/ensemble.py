"""
하이브리드 모델 예측의 앙상블

다수결 투표, 확률 평균, 오분류 가중 확률 평균을 제공한다.
확률 배열은 [모델, 샘플, 클래스] 형상이며 클래스 1 = malignant.
융합 벡터가 정확히 [0.5, 0.5]이면 라벨 1(malignant)을 선택한다.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from errors import ArityError, ContractError, ShapeError

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-6
METHODS = ("majority", "average", "weighted")


@dataclass
class PredictionSet:
    """모델별·샘플별 확률 벡터와 (선택적) 정답 라벨"""
    model_ids: List[str]
    probs: np.ndarray
    truth: Optional[np.ndarray] = None
    sample_ids: Optional[List[str]] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[2] != 2:
            raise ShapeError(f"확률 배열은 [모델, 샘플, 2] 형상이어야 합니다: {self.probs.shape}")
        if len(self.model_ids) != self.probs.shape[0]:
            raise ArityError(f"모델 ID {len(self.model_ids)}개 != 확률 행 {self.probs.shape[0]}개")
        sums = self.probs.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > PROB_TOLERANCE):
            raise ContractError("정규화되지 않은 확률 벡터가 있습니다")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int64)
            if self.truth.shape != (self.num_samples,):
                raise ArityError(f"정답 라벨 {self.truth.shape} != 샘플 수 {self.num_samples}")
        if self.sample_ids is not None and len(self.sample_ids) != self.num_samples:
            raise ArityError(f"샘플 ID {len(self.sample_ids)}개 != 샘플 수 {self.num_samples}")

    @property
    def num_models(self) -> int:
        return self.probs.shape[0]

    @property
    def num_samples(self) -> int:
        return self.probs.shape[1]

    def labels(self) -> np.ndarray:
        """모델별 argmax 라벨 [모델, 샘플]"""
        return argmax_labels(self.probs)

    def subset(self, indices: Sequence[int]) -> "PredictionSet":
        indices = list(indices)
        return PredictionSet([self.model_ids[i] for i in indices], self.probs[indices],
                             self.truth, self.sample_ids)


@dataclass
class WeightVector:
    """모델별 가중치 (합 1)와 근거가 된 고유 오분류 수"""
    weights: np.ndarray
    misclassification_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.weights)


@dataclass
class FusedPrediction:
    """앙상블 결과: 샘플별 융합 확률과 라벨"""
    probs: np.ndarray
    labels: np.ndarray
    method: str
    weights: Optional[WeightVector] = None


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """동률이면 1"""
    probs = np.asarray(probs)
    return (probs[..., 1] >= probs[..., 0]).astype(np.int64)


def _require_models(count: int, minimum: int = 2):
    if count < minimum:
        raise ArityError(f"앙상블에는 최소 {minimum}개 모델이 필요합니다 (현재 {count}개)")


def _fuse(probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.tensordot(weights, probs, axes=(0, 0))


def weighted_average(probs: np.ndarray, weights: Union[WeightVector, np.ndarray]) -> FusedPrediction:
    """가중 확률 평균 (볼록 결합) 후 argmax"""
    probs = np.asarray(probs, dtype=np.float64)
    vector = weights if isinstance(weights, WeightVector) else None
    w = np.asarray(weights.weights if vector is not None else weights, dtype=np.float64)
    if w.shape != (probs.shape[0],):
        raise ArityError(f"가중치 {w.shape[0] if w.ndim else 0}개 != 모델 {probs.shape[0]}개")
    fused = _fuse(probs, w)
    return FusedPrediction(fused, argmax_labels(fused), "weighted", vector)


def average_probability(probs: np.ndarray) -> FusedPrediction:
    """모델 간 산술 평균 후 argmax"""
    probs = np.asarray(probs, dtype=np.float64)
    _require_models(probs.shape[0])
    uniform = np.full(probs.shape[0], 1.0 / probs.shape[0])
    fused = weighted_average(probs, uniform)
    return FusedPrediction(fused.probs, fused.labels, "average")


def majority_vote(labels: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """샘플별 최다 득표 라벨, 동률(짝수 모델)은 확률 평균으로 결정"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ArityError("다수결에는 모델이 하나 이상 필요합니다")
    _require_models(labels.shape[0])
    votes_one = labels.sum(axis=0)
    votes_zero = labels.shape[0] - votes_one
    result = np.where(votes_one > votes_zero, 1, 0)
    ties = votes_one == votes_zero
    if np.any(ties):
        result[ties] = average_probability(probs).labels[ties]
    return result.astype(np.int64)


def unique_misclassifications(preds: np.ndarray, truth: Optional[np.ndarray]) -> np.ndarray:
    """모델 i만 틀리고 나머지 모든 모델이 맞힌 샘플 수 e_i"""
    if truth is None:
        raise ContractError("고유 오분류 계산에는 정답 라벨이 필요합니다")
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.ndim != 2 or preds.shape[1] != truth.shape[0]:
        raise ArityError(f"예측 {preds.shape}과 정답 {truth.shape}의 샘플 수가 다릅니다")
    _require_models(preds.shape[0])
    correct = preds == truth[None, :]
    correct_count = correct.sum(axis=0)
    # 자신은 틀리고 나머지 (M-1)개가 모두 맞은 경우
    unique = ~correct & (correct_count[None, :] == preds.shape[0] - 1)
    return unique.sum(axis=1).astype(np.int64)


def compute_weights(counts: Sequence[int]) -> WeightVector:
    """w_i ∝ 1 / (e_i + 1), 합이 1이 되도록 정규화"""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ContractError(f"오분류 수는 음수일 수 없습니다: {counts.tolist()}")
    raw = 1.0 / (counts + 1.0)
    return WeightVector(raw / raw.sum(), counts)


def fuse(predictions: PredictionSet, method: str,
         weights: Optional[WeightVector] = None) -> FusedPrediction:
    """앙상블 방법 선택 실행"""
    if method == "majority":
        labels = majority_vote(predictions.labels(), predictions.probs)
        return FusedPrediction(average_probability(predictions.probs).probs, labels, "majority")
    if method == "average":
        return average_probability(predictions.probs)
    if method == "weighted":
        if weights is None:
            raise ContractError("가중 평균에는 가중치가 필요합니다")
        _require_models(predictions.num_models)
        return weighted_average(predictions.probs, weights)
    raise ContractError(f"알 수 없는 앙상블 방법: {method} (지원: {', '.join(METHODS)})")
