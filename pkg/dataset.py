"""
BreakHis 스타일 데이터셋 처리

파일명 파싱(SOB_<B|M>_<subtype>-<slide>-<magnification>-<sequence>),
이미지 디코딩/리사이즈, 클래스별 결정적 3:1:1 분할, 분할 매니페스트,
테스트용 합성 데이터셋 생성을 담당한다.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from tqdm import tqdm

from config import IMAGE_EXTENSIONS, LOAD_WORKERS, MAGNIFICATION
from errors import DataError, EmptyDatasetError

logger = logging.getLogger(__name__)

FILENAME_PATTERN = re.compile(
    r"^SOB_(?P<label>[BM])_(?P<subtype>[A-Za-z]+)-(?P<slide>\d+-[0-9A-Za-z]+)"
    r"-(?P<magnification>\d+)-(?P<sequence>\d+)$"
)
SPLIT_NAMES = ("train", "val", "test")
SPLIT_RATIOS = (3, 1, 1)
MIN_CLASS_COUNT = 5


class Label(IntEnum):
    BENIGN = 0
    MALIGNANT = 1

    @property
    def token(self) -> str:
        return "B" if self is Label.BENIGN else "M"

    @classmethod
    def from_token(cls, token: str) -> "Label":
        return cls.BENIGN if token == "B" else cls.MALIGNANT

    @classmethod
    def from_name(cls, name: str) -> "Label":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise DataError(f"알 수 없는 라벨: {name}")


@dataclass(frozen=True)
class SampleRecord:
    """BreakHis 이미지 한 장의 메타데이터"""
    path: Path
    label: Label
    magnification: int
    slide_id: str
    sequence: int
    subtype: str

    @property
    def sample_id(self) -> str:
        return self.path.stem

    def filename(self) -> str:
        """파일명 규칙으로 다시 렌더링"""
        return (f"SOB_{self.label.token}_{self.subtype}-{self.slide_id}"
                f"-{self.magnification}-{self.sequence:03d}{self.path.suffix}")


def parse_filename(path: Path) -> Optional[SampleRecord]:
    """파일명 규칙에 맞으면 SampleRecord, 아니면 None"""
    path = Path(path)
    match = FILENAME_PATTERN.match(path.stem)
    if match is None or path.suffix.lower() not in IMAGE_EXTENSIONS:
        return None
    return SampleRecord(
        path=path,
        label=Label.from_token(match["label"]),
        magnification=int(match["magnification"]),
        slide_id=match["slide"],
        sequence=int(match["sequence"]),
        subtype=match["subtype"],
    )


def scan_dataset(root: Path, magnification: Optional[int] = MAGNIFICATION) -> List[SampleRecord]:
    """루트 아래 모든 이미지 파일을 파싱 (경로 사전순)"""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"데이터 디렉토리를 읽을 수 없습니다: {root}")
    try:
        files = sorted(p for p in root.rglob("*") if p.is_file())
    except OSError as e:
        raise DataError(f"데이터 디렉토리 탐색 실패: {root} ({e})")

    records, unmatched = [], []
    for path in files:
        record = parse_filename(path)
        if record is None:
            if path.suffix.lower() in IMAGE_EXTENSIONS:
                unmatched.append(path)
            continue
        if magnification is None or record.magnification == magnification:
            records.append(record)

    for path in unmatched:
        logger.warning(f"파일명 규칙 불일치: {path.relative_to(root)}")
    if not records:
        raise EmptyDatasetError(f"{root}에서 배율 {magnification}X 이미지를 찾지 못했습니다")

    counts = class_counts(records)
    logger.info(f"스캔 완료: benign {counts[Label.BENIGN]}개, malignant {counts[Label.MALIGNANT]}개 "
                f"(규칙 불일치 {len(unmatched)}개)")
    return records


def class_counts(records: Sequence[SampleRecord]) -> Dict[Label, int]:
    counts = {label: 0 for label in Label}
    for record in records:
        counts[record.label] += 1
    return counts


@dataclass(frozen=True)
class SplitSpec:
    """분할 시드와 비율 (train:val:test = 3:1:1)"""
    seed: int
    ratios: Tuple[int, int, int] = SPLIT_RATIOS


def split_sizes(n: int) -> Tuple[int, int, int]:
    """floor(0.6n), floor(0.2n), 나머지"""
    total = sum(SPLIT_RATIOS)
    n_train = n * SPLIT_RATIOS[0] // total
    n_val = n * SPLIT_RATIOS[1] // total
    return n_train, n_val, n - n_train - n_val


def stratified_split(records: Sequence[SampleRecord], spec: SplitSpec
                     ) -> Tuple[List[SampleRecord], List[SampleRecord], List[SampleRecord]]:
    """클래스별로 시드 셔플 후 floor-floor-나머지 규칙으로 분할"""
    splits: Tuple[List[SampleRecord], ...] = ([], [], [])
    for label in Label:
        members = [i for i, r in enumerate(records) if r.label is label]
        if len(members) < MIN_CLASS_COUNT:
            raise DataError(f"{label.name.lower()} 클래스 샘플이 {len(members)}개로 분할에 부족합니다 "
                            f"(최소 {MIN_CLASS_COUNT}개)")
        rng = np.random.default_rng([spec.seed, int(label)])
        order = [members[i] for i in rng.permutation(len(members))]
        n_train, n_val, _ = split_sizes(len(members))
        chosen = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
        for bucket, indices in zip(splits, chosen):
            bucket.extend(indices)

    train, val, test = ([records[i] for i in sorted(bucket)] for bucket in splits)
    return train, val, test


def write_manifest(path: Path, root: Path, splits: Dict[str, Sequence[SampleRecord]]):
    """<relative-path>\\t<label>\\t<split> 형식의 매니페스트 저장"""
    rows = [
        {"path": record.path.relative_to(root).as_posix(), "label": record.label.name.lower(), "split": name}
        for name in SPLIT_NAMES
        for record in splits.get(name, [])
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["path", "label", "split"]).to_csv(path, sep="\t", header=False, index=False)
    logger.info(f"매니페스트 저장 완료: {path} ({len(rows)}개)")


def read_manifest(path: Path, root: Path) -> Dict[str, List[SampleRecord]]:
    """매니페스트를 읽어 분할별 레코드 목록 반환"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"매니페스트가 없습니다: {path}")
    frame = pd.read_csv(path, sep="\t", header=None, names=["path", "label", "split"], dtype=str)
    splits: Dict[str, List[SampleRecord]] = {name: [] for name in SPLIT_NAMES}
    for row in frame.itertuples(index=False):
        record = parse_filename(Path(root) / row.path)
        if record is None:
            raise DataError(f"매니페스트 항목이 파일명 규칙에 맞지 않습니다: {row.path}")
        if record.label is not Label.from_name(row.label):
            raise DataError(f"매니페스트 라벨 불일치: {row.path} ({row.label})")
        if row.split not in splits:
            raise DataError(f"알 수 없는 분할 이름: {row.split}")
        splits[row.split].append(record)
    return splits


def load_image(record_or_path, target_size: int) -> np.ndarray:
    """이미지를 디코딩해 target×target으로 bilinear 리사이즈, [0, 1] 범위 3×H×W float32 반환"""
    path = Path(record_or_path.path if isinstance(record_or_path, SampleRecord) else record_or_path)
    try:
        with Image.open(path) as image:
            image.load()
            if image.mode == "L":
                image = image.convert("RGB")
            elif image.mode != "RGB":
                raise DataError(f"RGB 또는 grayscale 이미지가 아닙니다 ({image.mode}): {path}")
            resized = image.resize((target_size, target_size), Image.Resampling.BILINEAR)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"이미지 디코딩 실패: {path} ({e})")
    array = np.asarray(resized, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(array.transpose(2, 0, 1))


@dataclass
class ImageSet:
    """메모리에 올린 이미지 텐서, 라벨, 샘플 ID"""
    images: np.ndarray
    labels: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [f"sample-{i:05d}" for i in range(len(self.labels))]
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise DataError(f"이미지 {len(self.images)}개, 라벨 {len(self.labels)}개, ID {len(self.ids)}개 불일치")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "ImageSet":
        indices = list(indices)
        return ImageSet(self.images[indices], self.labels[indices], [self.ids[i] for i in indices])


def load_images(records: Sequence[SampleRecord], target_size: int,
                workers: int = LOAD_WORKERS, desc: str = "이미지 로딩") -> ImageSet:
    """레코드 순서를 유지하며 병렬로 이미지 로딩"""
    if not records:
        raise EmptyDatasetError(f"{desc}: 로딩할 레코드가 없습니다")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        # map은 입력 순서대로 결과를 돌려준다
        images = list(tqdm(pool.map(lambda r: load_image(r, target_size), records),
                           total=len(records), desc=desc, leave=False))
    return ImageSet(np.stack(images), [int(r.label) for r in records], [r.sample_id for r in records])


# ---------------------------------------------------------------------------
# 합성 데이터셋
# ---------------------------------------------------------------------------

def _blob_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    # 저주파: 넓은 가우시안 블롭 몇 개의 합
    yy, xx = np.mgrid[0:size, 0:size] / size
    pattern = np.zeros((size, size))
    for _ in range(3):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        sigma = rng.uniform(0.15, 0.35)
        amplitude = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
        pattern += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return pattern


def _texture_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    # 고주파: 주기 2~4 픽셀 정현파 두 개의 합
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    pattern = np.zeros((size, size))
    for _ in range(2):
        freq = rng.uniform(0.25, 0.45)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        pattern += np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    return pattern


def synthesize_image(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    """평균 밝기 분포는 두 클래스가 같고 공간 주파수만 다른 3×S×S 이미지"""
    pattern = _blob_pattern(rng, size) if label == 0 else _texture_pattern(rng, size)
    pattern = pattern - pattern.mean()
    pattern /= max(np.abs(pattern).max(), 1e-6)

    image = np.empty((3, size, size), dtype=np.float32)
    base = rng.uniform(0.35, 0.65)
    for channel in range(3):
        mean = base + rng.uniform(-0.05, 0.05)
        amplitude = rng.uniform(0.5, 0.9) * min(mean, 1.0 - mean)
        image[channel] = mean + amplitude * pattern
    return np.clip(image, 0.0, 1.0)


def synthesize_dataset(n_per_class: int, seed: int, image_size: int = 32) -> ImageSet:
    """클래스당 n개의 합성 이미지 (0: 저주파 블롭, 1: 고주파 텍스처)"""
    if n_per_class < 1:
        raise DataError(f"클래스당 샘플 수는 1 이상이어야 합니다: {n_per_class}")
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for label in Label:
        for index in range(n_per_class):
            images.append(synthesize_image(rng, int(label), image_size))
            labels.append(int(label))
            ids.append(f"syn-{label.token}-{index:04d}")
    return ImageSet(np.stack(images), labels, ids)


def write_synthetic_dataset(root: Path, n_per_class: int, seed: int, image_size: int = 64,
                            magnification: int = MAGNIFICATION) -> List[Path]:
    """합성 데이터셋을 BreakHis 파일명 규칙의 PNG 파일로 저장"""
    root = Path(root)
    dataset = synthesize_dataset(n_per_class, seed, image_size)
    written = []
    for index, (image, label) in enumerate(zip(dataset.images, dataset.labels)):
        label = Label(int(label))
        record = SampleRecord(
            path=root / label.name.lower() / "placeholder.png",
            label=label,
            magnification=magnification,
            slide_id=f"{seed % 100:02d}-SYN{index // 10}",
            sequence=index % 10 + 1,
            subtype="SY",
        )
        target = record.path.with_name(record.filename())
        target.parent.mkdir(parents=True, exist_ok=True)
        pixels = np.rint(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(target)
        written.append(target)
    logger.info(f"합성 데이터셋 저장 완료: {root} ({len(written)}개 파일)")
    return written
