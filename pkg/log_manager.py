#!/usr/bin/env python3
"""
실험 결과 파일 관리 (예측 레코드, 에폭 히스토리, 지표 리포트)
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from errors import DataError

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["id", "truth", "p0", "p1", "pred"]
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_accuracy", "improved"]


class PredictionRecords:
    """샘플별 예측 레코드 (id, truth, p0, p1, pred)"""

    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
        if missing:
            raise DataError(f"예측 레코드에 필드가 없습니다: {missing}")
        self.frame = frame[PREDICTION_COLUMNS].reset_index(drop=True)

    @classmethod
    def build(cls, ids: Sequence[str], truth: Sequence[int], probs: np.ndarray,
              preds: Sequence[int]) -> "PredictionRecords":
        probs = np.asarray(probs, dtype=np.float64)
        frame = pd.DataFrame({
            "id": list(ids),
            "truth": np.asarray(truth, dtype=np.int64),
            "p0": probs[:, 0],
            "p1": probs[:, 1],
            "pred": np.asarray(preds, dtype=np.int64),
        })
        return cls(frame)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def ids(self) -> List[str]:
        return self.frame["id"].astype(str).tolist()

    @property
    def truth(self) -> np.ndarray:
        return self.frame["truth"].to_numpy(dtype=np.int64)

    @property
    def probs(self) -> np.ndarray:
        return self.frame[["p0", "p1"]].to_numpy(dtype=np.float64)

    @property
    def preds(self) -> np.ndarray:
        return self.frame["pred"].to_numpy(dtype=np.int64)


class RunLogManager:
    """실행 출력 디렉토리의 결과 파일 관리 클래스"""

    def __init__(self, out_dir: str = "runs"):
        """
        Args:
            out_dir: 결과 파일들을 저장할 디렉토리
        """
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.history_file = self.out_dir / "history.csv"

    def predictions_path(self, split: str, model_id: str = None) -> Path:
        prefix = f"{model_id}_" if model_id else ""
        return self.out_dir / f"{prefix}predictions_{split}.jsonl"

    def report_path(self, name: str) -> Path:
        return self.out_dir / f"report_{name}.json"

    def write_predictions(self, records: PredictionRecords, path: Path) -> Path:
        """예측 레코드를 JSONL로 저장 (한 줄에 한 샘플)"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        records.frame.to_json(path, orient="records", lines=True, double_precision=15, force_ascii=False)
        logger.info(f"예측 레코드 저장 완료: {path} ({len(records)}개)")
        return path

    def write_history(self, rows: List[Dict[str, Any]]) -> Path:
        """에폭별 train/val 손실 곡선 저장"""
        pd.DataFrame(rows, columns=HISTORY_COLUMNS).to_csv(self.history_file, index=False, encoding='utf-8')
        logger.info(f"학습 히스토리 저장 완료: {self.history_file}")
        return self.history_file

    def write_report(self, name: str, report: Dict[str, Any]) -> Path:
        path = self.report_path(name)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(report, f, indent=2, ensure_ascii=False, sort_keys=True)
        logger.info(f"리포트 저장 완료: {path}")
        return path


def read_predictions(path: Path) -> PredictionRecords:
    """JSONL 예측 레코드 로드"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"예측 레코드 파일이 없습니다: {path}")
    try:
        frame = pd.read_json(path, orient="records", lines=True, dtype={"id": str}, precise_float=True)
    except ValueError as e:
        raise DataError(f"예측 레코드 파싱 실패: {path} ({e})")
    if frame.empty:
        raise DataError(f"예측 레코드가 비어 있습니다: {path}")
    return PredictionRecords(frame)


def read_history(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, encoding='utf-8')
