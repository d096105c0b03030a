import os
from dotenv import load_dotenv

load_dotenv()

# 학습 설정 (NLL 손실, Adam, 100 에폭)
DEFAULT_EPOCHS = int(os.getenv('HQNN_EPOCHS', '100'))
# 학습률과 배치 크기는 표준 기본값
DEFAULT_LEARNING_RATE = float(os.getenv('HQNN_LR', '0.001'))
DEFAULT_BATCH_SIZE = int(os.getenv('HQNN_BATCH', '4'))
DEFAULT_SEED = int(os.getenv('HQNN_SEED', '42'))

# Adam 하이퍼파라미터
ADAM_BETA1 = float(os.getenv('HQNN_ADAM_BETA1', '0.9'))
ADAM_BETA2 = float(os.getenv('HQNN_ADAM_BETA2', '0.999'))
ADAM_EPSILON = float(os.getenv('HQNN_ADAM_EPSILON', '1e-8'))

# 드롭아웃 비율 (M1: conv 블록 뒤, M3: 각 conv 뒤)
M1_DROPOUT_RATE = float(os.getenv('HQNN_M1_DROPOUT', '0.25'))
M3_DROPOUT_RATE = float(os.getenv('HQNN_M3_DROPOUT', '0.25'))

# NLL 로그 클램프
NLL_EPSILON = 1e-12

# 양자 헤드 모드: analytic 또는 shots:N
DEFAULT_HEAD_MODE = os.getenv('HQNN_HEAD', 'analytic')

# 데이터셋 설정
# BreakHis 경로 입력 예시 : ./BreaKHis_v1/histology_slides/breast
DEFAULT_DATA_ROOT = os.getenv('HQNN_DATA_ROOT', './data')
DEFAULT_OUTPUT_DIR = os.getenv('HQNN_OUTPUT_DIR', './runs')
MAGNIFICATION = int(os.getenv('HQNN_MAGNIFICATION', '400'))
IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.tif', '.tiff', '.bmp')

# 평가/이미지 로딩 병렬 워커 수
EVAL_WORKERS = int(os.getenv('HQNN_EVAL_WORKERS', '4'))
LOAD_WORKERS = int(os.getenv('HQNN_LOAD_WORKERS', '4'))

# 체크포인트 형식
CHECKPOINT_MAGIC = b'HQNNCKPT'
CHECKPOINT_FORMAT_VERSION = 1
