"""
혼동 행렬과 accuracy / precision / recall / F1 리포트

클래스별 값과 macro 평균을 모두 계산한다. 0/0인 지표는 0으로 두고 플래그를 남긴다.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from errors import ArityError, ContractError

logger = logging.getLogger(__name__)

CLASS_NAMES = {0: "benign", 1: "malignant"}


@dataclass(frozen=True)
class ConfusionMatrix:
    """positive_class 기준 이진 혼동 행렬"""
    tp: int
    fp: int
    fn: int
    tn: int
    positive_class: int = 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """반대 클래스를 positive로 본 행렬"""
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp, 1 - self.positive_class)

    def as_table(self) -> pd.DataFrame:
        """행 = 정답(benign, malignant), 열 = 예측"""
        cm = self if self.positive_class == 1 else self.swapped()
        return pd.DataFrame([[cm.tn, cm.fp], [cm.fn, cm.tp]],
                            index=[f"true_{CLASS_NAMES[0]}", f"true_{CLASS_NAMES[1]}"],
                            columns=[f"pred_{CLASS_NAMES[0]}", f"pred_{CLASS_NAMES[1]}"])


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    """accuracy, 클래스별/매크로 precision·recall·F1"""
    accuracy: float
    per_class: Dict[int, ClassMetrics]
    macro: ClassMetrics
    sample_count: int
    confusion: ConfusionMatrix
    zero_division: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "per_class": {CLASS_NAMES[k]: asdict(v) for k, v in sorted(self.per_class.items())},
            "macro": asdict(self.macro),
            "sample_count": self.sample_count,
            "confusion": asdict(self.confusion),
            "zero_division": list(self.zero_division),
        }

    def headline(self) -> Dict[str, float]:
        """백분율 요약 (macro 기준)"""
        return {
            "accuracy": round(100.0 * self.accuracy, 2),
            "precision": round(100.0 * self.macro.precision, 2),
            "recall": round(100.0 * self.macro.recall, 2),
            "f1": round(100.0 * self.macro.f1, 2),
        }

    def format(self) -> str:
        rows = {CLASS_NAMES[k]: asdict(v) for k, v in sorted(self.per_class.items())}
        rows["macro"] = asdict(self.macro)
        table = pd.DataFrame(rows).T.round(4)
        lines = [
            f"samples: {self.sample_count}",
            f"accuracy: {self.accuracy:.4f}",
            table.to_string(),
            "confusion:",
            self.confusion.as_table().to_string(),
        ]
        if self.zero_division:
            lines.append(f"zero-division: {', '.join(self.zero_division)}")
        return "\n".join(lines)


def confusion(pred_labels: Sequence[int], truth_labels: Sequence[int], positive_class: int = 1) -> ConfusionMatrix:
    """예측/정답 라벨로 혼동 행렬 계산"""
    pred = np.asarray(pred_labels, dtype=np.int64)
    truth = np.asarray(truth_labels, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ArityError(f"예측 {pred.shape}과 정답 {truth.shape}의 길이가 다릅니다")
    if positive_class not in (0, 1):
        raise ContractError(f"positive_class는 0 또는 1이어야 합니다: {positive_class}")
    matrix = confusion_matrix(truth, pred, labels=[0, 1]) if pred.size else np.zeros((2, 2), dtype=np.int64)
    # matrix[i, j]: 정답 i, 예측 j
    p, n = positive_class, 1 - positive_class
    return ConfusionMatrix(tp=int(matrix[p, p]), fp=int(matrix[n, p]),
                           fn=int(matrix[p, n]), tn=int(matrix[n, n]), positive_class=positive_class)


def _ratio(numerator: int, denominator: int, flag: str, flags: List[str]) -> float:
    if denominator == 0:
        flags.append(flag)
        return 0.0
    return numerator / denominator


def _class_metrics(cm: ConfusionMatrix, flags: List[str]) -> ClassMetrics:
    name = CLASS_NAMES[cm.positive_class]
    precision = _ratio(cm.tp, cm.tp + cm.fp, f"precision[{name}]", flags)
    recall = _ratio(cm.tp, cm.tp + cm.fn, f"recall[{name}]", flags)
    if precision + recall == 0.0:
        flags.append(f"f1[{name}]")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ClassMetrics(precision, recall, f1)


def report(cm: ConfusionMatrix) -> MetricsReport:
    """혼동 행렬에서 지표 계산 (각 클래스를 차례로 positive로 취급)"""
    if cm.total <= 0:
        raise ContractError("샘플이 없는 혼동 행렬로는 리포트를 만들 수 없습니다")
    flags: List[str] = []
    own = _class_metrics(cm, flags)
    other = _class_metrics(cm.swapped(), flags)
    per_class = {cm.positive_class: own, 1 - cm.positive_class: other}
    macro = ClassMetrics(
        precision=(own.precision + other.precision) / 2.0,
        recall=(own.recall + other.recall) / 2.0,
        f1=(own.f1 + other.f1) / 2.0,
    )
    accuracy = (cm.tp + cm.tn) / cm.total
    return MetricsReport(accuracy, per_class, macro, cm.total, cm, sorted(flags))
