"""
버전 관리되는 체크포인트 컨테이너

파일 구조:
    magic(8) | format version (u32 LE) | payload 길이 (u64 LE) | payload | SHA-256(앞부분 전체)
payload는 safetensors 블롭(float32 little-endian 텐서)이며, 메타데이터 블록은
'meta' 키 하나에 정렬된 JSON 문자열로 저장한다.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np
from safetensors import SafetensorError
from safetensors.numpy import load as load_tensors
from safetensors.numpy import save as save_tensors

from config import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from errors import CheckpointError, HybridQNNError
from hybrid import HeadMode, HybridModel, build_model

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<8sIQ")
_DIGEST_SIZE = hashlib.sha256().digest_size


@dataclass
class Checkpoint:
    """모델 ID, 이름별 파라미터 텐서, 학습 메타데이터"""
    model_id: str
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def from_model(cls, model: HybridModel, meta: Dict[str, Any]) -> "Checkpoint":
        return cls(model.model_id, model.state_dict(), dict(meta))

    def restore(self, head_mode: HeadMode = None) -> HybridModel:
        """체크포인트로부터 모델 재구성"""
        if head_mode is None:
            head_mode = HeadMode.parse(self.meta.get("config", {}).get("head", "analytic"))
        model = build_model(self.model_id, seed=0, head_mode=head_mode)
        try:
            model.load_state_dict(self.tensors)
        except HybridQNNError as e:
            raise CheckpointError(f"체크포인트 텐서가 {self.model_id} 구조와 맞지 않습니다: {e}")
        return model


def _encode(checkpoint: Checkpoint) -> bytes:
    meta = dict(checkpoint.meta)
    meta["model_id"] = checkpoint.model_id
    tensors = {name: np.ascontiguousarray(value, dtype="<f4") for name, value in checkpoint.tensors.items()}
    payload = save_tensors(tensors, metadata={"meta": json.dumps(meta, sort_keys=True, ensure_ascii=False)})
    body = _HEADER.pack(CHECKPOINT_MAGIC, checkpoint.format_version, len(payload)) + payload
    return body + hashlib.sha256(body).digest()


def _decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _HEADER.size + _DIGEST_SIZE:
        raise CheckpointError(f"체크포인트가 잘렸습니다: {source}")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"체크포인트 파일이 아닙니다 (magic 불일치): {source}")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"지원하지 않는 체크포인트 버전 {version} (지원: {CHECKPOINT_FORMAT_VERSION}): {source}")
    expected = _HEADER.size + length + _DIGEST_SIZE
    if len(data) != expected:
        raise CheckpointError(f"체크포인트 길이 불일치 ({len(data)} != {expected}), 잘렸거나 손상됨: {source}")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"체크포인트 다이제스트 불일치: {source}")

    payload = body[_HEADER.size:]
    try:
        tensors = load_tensors(payload)
        header_len = struct.unpack_from("<Q", payload)[0]
        header = json.loads(payload[8:8 + header_len])
        meta = json.loads(header["__metadata__"]["meta"])
        if not isinstance(meta, dict):
            raise ValueError("meta가 JSON 객체가 아님")
        model_id = meta.pop("model_id")
    except (SafetensorError, KeyError, ValueError) as e:
        raise CheckpointError(f"체크포인트 payload 해석 실패: {source} ({e})")
    return Checkpoint(model_id, tensors, meta, version)


def write_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(checkpoint))
    logger.info(f"체크포인트 저장 완료: {path}")
    return path


def save_checkpoint(model: HybridModel, meta: Dict[str, Any], path: Path) -> Path:
    """모델 파라미터와 메타데이터를 체크포인트 파일로 저장"""
    return write_checkpoint(Checkpoint.from_model(model, meta), path)


def load_checkpoint(path: Path, expected_model_id: str = None) -> Checkpoint:
    """체크포인트 로드 (버전/길이/다이제스트 검증)"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"체크포인트를 읽을 수 없습니다: {path} ({e})")
    checkpoint = _decode(data, str(path))
    if expected_model_id is not None and checkpoint.model_id != expected_model_id.lower():
        raise CheckpointError(f"체크포인트 모델 {checkpoint.model_id} != 요청한 모델 {expected_model_id}")
    return checkpoint


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
