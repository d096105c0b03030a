"""
하이브리드 QNN 툴킷 공통 예외 정의

각 예외는 CLI에서 사용할 종료 코드(exit_code)를 가지고 있다.
"""


class HybridQNNError(Exception):
    """툴킷 예외의 최상위 클래스"""

    exit_code = 1


class UsageError(HybridQNNError):
    """잘못된 명령행 사용"""

    exit_code = 1


class ShapeError(HybridQNNError, ValueError):
    """텐서 형상 불일치"""

    exit_code = 1


class ArityError(HybridQNNError, ValueError):
    """인자 개수 불일치 (바인딩 수, 모델 수, 라벨 길이 등)"""

    exit_code = 1


class ContractError(HybridQNNError, ValueError):
    """사전 조건 위반 (정규화되지 않은 확률, 비유한 각도 등)"""

    exit_code = 1


class InvalidStateError(HybridQNNError, RuntimeError):
    """forward 캐시 없이 backward 호출 등 잘못된 상태"""

    exit_code = 1


class UnsupportedGateError(HybridQNNError, ValueError):
    """parameter-shift를 적용할 수 없는 게이트"""

    exit_code = 1


class DataError(HybridQNNError):
    """데이터셋 읽기/파싱/디코딩 오류"""

    exit_code = 2


class EmptyDatasetError(DataError):
    """처리할 샘플이 없음"""


class AlignmentError(DataError):
    """예측 레코드 파일 간 샘플 순서 불일치"""


class NumericError(HybridQNNError, ArithmeticError):
    """학습 중 비유한(NaN/Inf) 손실 발생"""

    exit_code = 3


class CheckpointError(HybridQNNError):
    """체크포인트 형식/버전/무결성 오류"""

    exit_code = 4
