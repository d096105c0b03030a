"""
학습 루프, 평가, 앙상블 평가

NLL + Adam으로 하이브리드 모델을 end-to-end 학습하고 검증 손실이 최소인 시점의
파라미터를 체크포인트로 남긴다. 난수 스트림은 (seed, 용도, epoch, 샘플 인덱스)로
파생되므로 같은 설정이면 히스토리와 체크포인트 바이트가 동일하다.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tqdm import tqdm

from checkpoint import Checkpoint, load_checkpoint, write_checkpoint
from config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_DATA_ROOT,
    DEFAULT_EPOCHS,
    DEFAULT_HEAD_MODE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_SEED,
    EVAL_WORKERS,
    LOAD_WORKERS,
)
from dataset import (
    SPLIT_NAMES,
    ImageSet,
    SampleRecord,
    SplitSpec,
    load_image,
    load_images,
    read_manifest,
    scan_dataset,
    stratified_split,
    write_manifest,
)
from ensemble import METHODS, PredictionSet, argmax_labels, compute_weights, fuse, unique_misclassifications
from errors import AlignmentError, ContractError, DataError, EmptyDatasetError, NumericError, UsageError
from hybrid import INPUT_SIZES, MODEL_BUILDERS, HeadMode, HybridModel, build_model
from log_manager import PredictionRecords, RunLogManager, read_predictions
from metrics import MetricsReport, confusion, report
from tensor_nn import Adam, nll_backward, nll_loss

logger = logging.getLogger(__name__)

# 난수 스트림 구분자
SHUFFLE_STREAM = 0
TRAIN_STREAM = 1
EVAL_STREAM = 2

CHECKPOINT_NAME = "best.ckpt"
MANIFEST_NAME = "manifest.tsv"

_KEY_ALIASES = {
    "model_id": "model",
    "learning_rate": "lr",
    "batch_size": "batch",
    "output_dir": "out",
    "head_mode": "head",
}


class TrainConfig(BaseModel):
    """학습 설정 (기본값 < 설정 파일 < CLI 플래그)"""
    model_config = ConfigDict(extra="forbid")

    model: str = "m1"
    epochs: int = Field(DEFAULT_EPOCHS, ge=1)
    lr: float = Field(DEFAULT_LEARNING_RATE, gt=0)
    batch: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0)
    data_root: str = DEFAULT_DATA_ROOT
    out: str = DEFAULT_OUTPUT_DIR
    head: str = DEFAULT_HEAD_MODE
    manifest: Optional[str] = None
    workers: int = Field(EVAL_WORKERS, ge=1)

    @field_validator("model")
    @classmethod
    def _known_model(cls, value: str) -> str:
        value = value.strip().lower()
        if value not in MODEL_BUILDERS:
            raise ValueError(f"알 수 없는 모델 ID: {value} (지원: {', '.join(MODEL_BUILDERS)})")
        return value

    @field_validator("head")
    @classmethod
    def _valid_head(cls, value: str) -> str:
        return str(HeadMode.parse(value))

    @property
    def head_mode(self) -> HeadMode:
        return HeadMode.parse(self.head)


class EvalConfig(BaseModel):
    """eval 서브커맨드 설정"""
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    model: Optional[str] = None
    split: str = "test"
    data_root: Optional[str] = None
    manifest: Optional[str] = None
    out: str = DEFAULT_OUTPUT_DIR
    workers: int = Field(EVAL_WORKERS, ge=1)

    @field_validator("model")
    @classmethod
    def _known_model(cls, value: Optional[str]) -> Optional[str]:
        return None if value is None else TrainConfig._known_model(value)

    @field_validator("split")
    @classmethod
    def _known_split(cls, value: str) -> str:
        if value not in SPLIT_NAMES:
            raise ValueError(f"분할 이름은 {', '.join(SPLIT_NAMES)} 중 하나여야 합니다: {value}")
        return value


class EnsembleConfig(BaseModel):
    """ensemble 서브커맨드 설정"""
    model_config = ConfigDict(extra="forbid")

    method: str = "average"
    weight_from: Optional[List[str]] = None
    table: bool = False
    out: str = DEFAULT_OUTPUT_DIR

    @field_validator("method")
    @classmethod
    def _known_method(cls, value: str) -> str:
        if value not in METHODS:
            raise ValueError(f"앙상블 방법은 {', '.join(METHODS)} 중 하나여야 합니다: {value}")
        return value

    @field_validator("weight_from", mode="before")
    @classmethod
    def _split_paths(cls, value):
        # 설정 파일에서는 공백으로 구분한 경로 목록
        return value.split() if isinstance(value, str) else value


CONFIG_SCHEMAS = (TrainConfig, EvalConfig, EnsembleConfig)


def _normalize_key(key: str) -> str:
    key = key.strip().lower().replace("-", "_")
    return _KEY_ALIASES.get(key, key)


def read_config_file(config_file: str, schema: Type[BaseModel]) -> Dict[str, Any]:
    """KEY=VALUE 설정 파일에서 schema에 해당하는 항목만 추출

    다른 서브커맨드의 키는 건너뛰고, 어느 설정에도 없는 키는 UsageError.
    """
    path = Path(config_file)
    if not path.is_file():
        raise UsageError(f"설정 파일을 찾을 수 없습니다: {path}")
    values: Dict[str, Any] = {}
    for key, value in dotenv_values(path).items():
        key = _normalize_key(key)
        if key in schema.model_fields:
            values[key] = value
        elif any(key in other.model_fields for other in CONFIG_SCHEMAS):
            logger.debug(f"{schema.__name__}에 해당하지 않는 설정 키 무시: {key}")
        else:
            raise UsageError(f"알 수 없는 설정 키: {key} ({path})")
    return values


def load_config(overrides: Optional[Dict[str, Any]] = None, config_file: Optional[str] = None,
                schema: Type[BaseModel] = TrainConfig):
    """설정 파일(KEY=VALUE)과 플래그 값을 합쳐 설정 객체 생성 (플래그 우선)"""
    values = read_config_file(config_file, schema) if config_file else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[_normalize_key(key)] = value
    try:
        return schema(**values)
    except ValidationError as e:
        raise UsageError(f"잘못된 설정: {e}")


@dataclass
class EpochHistory:
    """에폭별 train 손실, val 손실, val 정확도"""
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    improved: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def append(self, train_loss: float, val_loss: float, val_accuracy: float, improved: bool):
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_accuracy.append(val_accuracy)
        self.improved.append(improved)

    @property
    def best_epoch(self) -> int:
        """최소 val 손실 에폭 (1부터, 동률이면 앞선 에폭)"""
        return int(np.argmin(self.val_loss)) + 1

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"epoch": i + 1, "train_loss": t, "val_loss": v, "val_accuracy": a, "improved": imp}
            for i, (t, v, a, imp) in enumerate(zip(self.train_loss, self.val_loss, self.val_accuracy, self.improved))
        ]


@dataclass
class FitResult:
    best_state: Dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    history: EpochHistory


def eval_rng(seed: int, head_mode: HeadMode, index: int) -> Optional[np.random.Generator]:
    """평가용 샘플별 rng (analytic 헤드는 난수를 쓰지 않음)"""
    if head_mode.analytic:
        return None
    return np.random.default_rng([seed, EVAL_STREAM, index])


def predict_probs(model: HybridModel, images: np.ndarray, seed: int = 0,
                  workers: int = 1) -> np.ndarray:
    """eval 모드 확률 [N, 2], 결과는 샘플 순서 유지"""
    def run(index: int) -> np.ndarray:
        return model.predict(images[index], rng=eval_rng(seed, model.head.mode, index))

    if workers <= 1 or len(images) <= 1:
        probs = [run(i) for i in range(len(images))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probs = list(pool.map(run, range(len(images))))
    return np.stack(probs) if probs else np.zeros((0, 2))


def report_for(truth: Sequence[int], preds: Sequence[int]) -> MetricsReport:
    return report(confusion(preds, truth))


class Trainer:
    """미니배치 Adam 학습과 검증 손실 기준 최적 스냅샷 관리"""

    def __init__(self, model: HybridModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = Adam(model.parameters(), lr=config.lr)

    def _numeric_failure(self, epoch: int, batch: int, ids: Sequence[str], detail: str) -> NumericError:
        message = f"epoch {epoch}, batch {batch} (샘플 {', '.join(ids)}): {detail}"
        logger.error(message)
        return NumericError(message)

    def train_epoch(self, train_set: ImageSet, epoch: int) -> float:
        """한 에폭 학습, 샘플 평균 train 손실 반환"""
        n = len(train_set)
        if n == 0:
            raise EmptyDatasetError("학습 샘플이 없습니다")
        seed, batch_size = self.config.seed, self.config.batch
        order = np.random.default_rng([seed, SHUFFLE_STREAM, epoch]).permutation(n)
        total = 0.0
        for batch_index, start in enumerate(range(0, n, batch_size)):
            indices = order[start:start + batch_size]
            ids = [train_set.ids[i] for i in indices]
            self.optimizer.zero_grad()
            for i in indices:
                rng = np.random.default_rng([seed, TRAIN_STREAM, epoch, int(i)])
                target = int(train_set.labels[i])
                try:
                    probs = self.model.forward(train_set.images[i], training=True, rng=rng)
                except ContractError as e:
                    raise self._numeric_failure(epoch, batch_index, ids, str(e))
                loss = nll_loss(probs, target)
                if not np.isfinite(loss):
                    raise self._numeric_failure(epoch, batch_index, ids, f"손실이 유한하지 않습니다 ({loss})")
                # 배치 평균 기울기
                self.model.backward(nll_backward(probs, target) / len(indices))
                total += loss
            for p in self.model.parameters():
                if not np.all(np.isfinite(p.grad)):
                    raise self._numeric_failure(epoch, batch_index, ids, f"{p.name} 기울기가 유한하지 않습니다")
            self.optimizer.step()
        return total / n

    def validate(self, val_set: ImageSet) -> Tuple[float, float]:
        """평균 val 손실과 정확도"""
        if len(val_set) == 0:
            raise EmptyDatasetError("검증 샘플이 없습니다")
        try:
            probs = predict_probs(self.model, val_set.images, self.config.seed, workers=1)
        except ContractError as e:
            logger.error(f"검증 중 수치 오류: {e}")
            raise NumericError(f"검증 중 수치 오류: {e}")
        losses = [nll_loss(p, int(t)) for p, t in zip(probs, val_set.labels)]
        accuracy = float(np.mean(argmax_labels(probs) == val_set.labels))
        return float(np.mean(losses)), accuracy

    def fit(self, train_set: ImageSet, val_set: ImageSet) -> FitResult:
        if len(train_set) == 0:
            raise EmptyDatasetError("학습 샘플이 없습니다")
        history = EpochHistory()
        best_state, best_loss, best_epoch = None, np.inf, 0
        epochs = tqdm(range(1, self.config.epochs + 1), desc=f"{self.model.model_id} 학습", leave=False)
        for epoch in epochs:
            train_loss = self.train_epoch(train_set, epoch)
            val_loss, val_accuracy = self.validate(val_set)
            # 동률이면 앞선 체크포인트 유지
            improved = val_loss < best_loss
            if improved:
                best_state, best_loss, best_epoch = self.model.state_dict(), val_loss, epoch
            history.append(train_loss, val_loss, val_accuracy, improved)
            logger.info(f"epoch {epoch}/{self.config.epochs}: train_loss={train_loss:.6f} "
                        f"val_loss={val_loss:.6f} val_acc={val_accuracy:.4f}"
                        f"{' (최적 갱신)' if improved else ''}")
        return FitResult(best_state, best_epoch, float(best_loss), history)


def checkpoint_meta(config: TrainConfig, fit: FitResult) -> Dict[str, Any]:
    return {
        "epoch": fit.best_epoch,
        "val_loss": fit.best_val_loss,
        "seed": config.seed,
        "config": config.model_dump(),
    }


def resolve_splits(data_root: str, seed: int, manifest: Optional[str] = None) -> Dict[str, List[SampleRecord]]:
    """매니페스트가 있으면 읽고, 없으면 스캔 후 결정적 분할"""
    if manifest and Path(manifest).exists():
        logger.info(f"매니페스트 사용: {manifest}")
        return read_manifest(Path(manifest), Path(data_root))
    records = scan_dataset(Path(data_root))
    train, val, test = stratified_split(records, SplitSpec(seed))
    return dict(zip(SPLIT_NAMES, (train, val, test)))


def write_split_manifest(data_root: str, seed: int, manifest: str) -> Dict[str, List[SampleRecord]]:
    records = scan_dataset(Path(data_root))
    splits = dict(zip(SPLIT_NAMES, stratified_split(records, SplitSpec(seed))))
    write_manifest(Path(manifest), Path(data_root), splits)
    return splits


def evaluate_model(model: HybridModel, images: ImageSet, seed: int,
                   workers: int = EVAL_WORKERS) -> Tuple[MetricsReport, PredictionRecords]:
    probs = predict_probs(model, images.images, seed, workers)
    preds = argmax_labels(probs)
    records = PredictionRecords.build(images.ids, images.labels, probs, preds)
    return report_for(images.labels, preds), records


@dataclass
class TrainOutcome:
    checkpoint_path: Path
    checkpoint: Checkpoint
    history: EpochHistory
    reports: Dict[str, MetricsReport] = field(default_factory=dict)


def train(config: TrainConfig) -> TrainOutcome:
    """데이터 분할 → 학습 → 최적 체크포인트 저장 → val/test 평가"""
    logs = RunLogManager(config.out)
    derived = not (config.manifest and Path(config.manifest).exists())
    splits = resolve_splits(config.data_root, config.seed, config.manifest)
    manifest_path = Path(config.manifest) if config.manifest else logs.out_dir / MANIFEST_NAME
    if derived:
        # 스캔으로 만든 분할은 이전 실행의 매니페스트를 덮어씀
        write_manifest(manifest_path, Path(config.data_root), splits)
        logger.info(f"분할 매니페스트 기록: {manifest_path}")

    size = INPUT_SIZES[config.model]
    train_set = load_images(splits["train"], size, LOAD_WORKERS, desc="train 로딩")
    val_set = load_images(splits["val"], size, LOAD_WORKERS, desc="val 로딩")

    model = build_model(config.model, seed=config.seed, head_mode=config.head_mode)
    logger.info(model.summary())
    fit = Trainer(model, config).fit(train_set, val_set)
    model.load_state_dict(fit.best_state)

    meta = checkpoint_meta(config, fit)
    meta["manifest"] = str(manifest_path.resolve())
    checkpoint = Checkpoint.from_model(model, meta)
    checkpoint_path = write_checkpoint(checkpoint, logs.out_dir / CHECKPOINT_NAME)
    logs.write_history(fit.history.rows())
    logger.info(f"최적 체크포인트: epoch {fit.best_epoch}, val_loss {fit.best_val_loss:.6f}")

    outcome = TrainOutcome(checkpoint_path, checkpoint, fit.history)
    evaluation_sets = {"val": val_set}
    if splits["test"]:
        evaluation_sets["test"] = load_images(splits["test"], size, LOAD_WORKERS, desc="test 로딩")
    for split, images in evaluation_sets.items():
        metrics, records = evaluate_model(model, images, config.seed, config.workers)
        logs.write_predictions(records, logs.predictions_path(split, config.model))
        logs.write_report(f"{config.model}_{split}", metrics.to_dict())
        outcome.reports[split] = metrics
        logger.info(f"{split} 정확도: {metrics.accuracy:.4f}")
    return outcome


def training_manifest(checkpoint: Checkpoint, checkpoint_path: Path,
                      manifest: Optional[str] = None) -> Path:
    """평가에 쓸 매니페스트 결정

    명시한 경로 → 체크포인트에 기록된 경로 → 학습 설정의 경로 → 체크포인트 옆 manifest.tsv.
    학습 때의 분할을 찾지 못하면 새로 분할하지 않고 DataError.
    """
    if manifest:
        if not Path(manifest).exists():
            raise DataError(f"매니페스트를 찾을 수 없습니다: {manifest}")
        return Path(manifest)
    candidates = [checkpoint.meta.get("manifest"), checkpoint.meta.get("config", {}).get("manifest")]
    candidates = [Path(c) for c in candidates if c]
    candidates.append(checkpoint_path.parent / MANIFEST_NAME)
    for candidate in candidates:
        if candidate.exists():
            return candidate
    logger.error(f"학습 분할 매니페스트 없음: {', '.join(str(c) for c in candidates)}")
    raise DataError(f"{checkpoint_path}의 학습 분할 매니페스트를 찾을 수 없습니다 (--manifest로 지정)")


def evaluate(checkpoint_path: str, split: str = "test", data_root: Optional[str] = None,
             manifest: Optional[str] = None, out: Optional[str] = None, model_id: Optional[str] = None,
             workers: int = EVAL_WORKERS) -> Tuple[MetricsReport, PredictionRecords]:
    """체크포인트를 학습 때와 같은 분할에서 평가 (체크포인트 파일은 읽기만 함)"""
    if split not in SPLIT_NAMES:
        raise UsageError(f"분할 이름은 {', '.join(SPLIT_NAMES)} 중 하나여야 합니다: {split}")
    checkpoint = load_checkpoint(Path(checkpoint_path), expected_model_id=model_id)
    model = checkpoint.restore()
    seed = int(checkpoint.meta.get("seed", 0))
    data_root = data_root or checkpoint.meta.get("config", {}).get("data_root", DEFAULT_DATA_ROOT)
    manifest_path = training_manifest(checkpoint, Path(checkpoint_path), manifest)
    logger.info(f"매니페스트 사용: {manifest_path}")
    splits = read_manifest(manifest_path, Path(data_root))
    images = load_images(splits[split], INPUT_SIZES[model.model_id], LOAD_WORKERS, desc=f"{split} 로딩")
    metrics, records = evaluate_model(model, images, seed, workers)
    if out:
        logs = RunLogManager(out)
        logs.write_predictions(records, logs.predictions_path(split, model.model_id))
        logs.write_report(f"{model.model_id}_{split}", metrics.to_dict())
    return metrics, records


def _align(files: Sequence[str]) -> Tuple[List[str], List[PredictionRecords]]:
    """모든 파일이 같은 샘플 ID(같은 순서)를 가지는지 검증"""
    if not files:
        raise UsageError("예측 레코드 파일이 필요합니다")
    loaded = [read_predictions(Path(f)) for f in files]
    reference = loaded[0]
    for path, records in zip(files[1:], loaded[1:]):
        ids = records.ids
        for position, (expected, actual) in enumerate(itertools.zip_longest(reference.ids, ids)):
            if expected != actual:
                raise AlignmentError(f"{files[0]}와 {path}의 샘플 ID가 {position}번째에서 다릅니다: "
                                     f"{expected} != {actual}")
        mismatch = np.flatnonzero(records.truth != reference.truth)
        if mismatch.size:
            raise AlignmentError(f"{path}: 샘플 {ids[mismatch[0]]}의 정답 라벨이 {files[0]}와 다릅니다")
    return reference.ids, loaded


def _model_name(path: str) -> str:
    stem = Path(path).stem
    return stem.split("_predictions")[0] if "_predictions" in stem else stem


def prediction_split(path: str) -> str:
    """`<model>_predictions_<split>.jsonl`에서 분할 이름 (규칙에 맞지 않으면 "ensemble")"""
    stem = Path(path).stem
    return stem.split("_predictions_", 1)[1] if "_predictions_" in stem else "ensemble"


def _prediction_set(files: Sequence[str]) -> PredictionSet:
    ids, loaded = _align(files)
    return PredictionSet([_model_name(f) for f in files], np.stack([r.probs for r in loaded]),
                         loaded[0].truth, ids)


def weights_from(files: Sequence[str]):
    """검증 예측 파일에서 고유 오분류 기반 가중치 계산"""
    validation = _prediction_set(files)
    counts = unique_misclassifications(validation.labels(), validation.truth)
    weights = compute_weights(counts)
    logger.info(f"고유 오분류 {counts.tolist()} → 가중치 {np.round(weights.weights, 6).tolist()}")
    return weights


def ensemble_eval(files: Sequence[str], method: str,
                  weight_files: Optional[Sequence[str]] = None) -> Tuple[MetricsReport, PredictionRecords]:
    """예측 레코드 파일들을 앙상블하고 같은 지표로 평가"""
    if method not in METHODS:
        raise UsageError(f"앙상블 방법은 {', '.join(METHODS)} 중 하나여야 합니다: {method}")
    predictions = _prediction_set(files)
    weights = None
    if method == "weighted":
        if not weight_files:
            raise UsageError("weighted 방법에는 --weight-from 검증 예측 파일이 필요합니다")
        if len(weight_files) != len(files):
            raise UsageError(f"검증 파일 {len(weight_files)}개 != 예측 파일 {len(files)}개")
        for position, (weight_file, file) in enumerate(zip(weight_files, files)):
            # 가중치는 위치로 적용되므로 같은 모델끼리 짝지어야 함
            if _model_name(weight_file) != _model_name(file):
                raise UsageError(f"{position}번째 검증 파일의 모델이 예측 파일과 다릅니다: "
                                 f"{_model_name(weight_file)} != {_model_name(file)}")
        weights = weights_from(weight_files)
    fused = fuse(predictions, method, weights)
    records = PredictionRecords.build(predictions.sample_ids, predictions.truth, fused.probs, fused.labels)
    return report_for(predictions.truth, fused.labels), records


def ensemble_table(files: Sequence[str], weight_files: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """모든 모델 조합(2개 이상) × 앙상블 방법의 지표 표 (백분율)"""
    if len(files) < 2:
        raise UsageError("앙상블 표에는 예측 파일이 2개 이상 필요합니다")
    if weight_files is not None and len(weight_files) != len(files):
        raise UsageError(f"검증 파일 {len(weight_files)}개 != 예측 파일 {len(files)}개")
    rows = []
    for index in range(len(files)):
        records = read_predictions(Path(files[index]))
        rows.append({"models": _model_name(files[index]), "method": "single",
                     **report_for(records.truth, records.preds).headline()})
    for size in range(2, len(files) + 1):
        for combo in itertools.combinations(range(len(files)), size):
            chosen = [files[i] for i in combo]
            name = "+".join(_model_name(f) for f in chosen)
            for method in METHODS:
                if method == "weighted" and weight_files is None:
                    continue
                chosen_weights = [weight_files[i] for i in combo] if method == "weighted" else None
                metrics, _ = ensemble_eval(chosen, method, chosen_weights)
                rows.append({"models": name, "method": method, **metrics.headline()})
    return pd.DataFrame(rows, columns=["models", "method", "accuracy", "precision", "recall", "f1"])


def predict(checkpoint_path: str, image_path: str) -> Dict[str, Any]:
    """단일 이미지 추론"""
    checkpoint = load_checkpoint(Path(checkpoint_path))
    model = checkpoint.restore()
    image = load_image(Path(image_path), INPUT_SIZES[model.model_id])
    probs = model.predict(image, rng=eval_rng(int(checkpoint.meta.get("seed", 0)), model.head.mode, 0))
    pred = int(argmax_labels(probs))
    return {"image": str(image_path), "model": model.model_id, "p0": float(probs[0]),
            "p1": float(probs[1]), "pred": pred, "label": "malignant" if pred == 1 else "benign"}

