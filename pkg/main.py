#!/usr/bin/env python3
"""
하이브리드 양자-고전 CNN 실험 실행 스크립트

서브커맨드: train, eval, ensemble, predict, synth-data, split
종료 코드: 0 성공, 1 사용법 오류, 2 데이터 오류, 3 수치 오류, 4 체크포인트 오류
"""

import argparse
import json
import logging
from typing import List, Optional

from config import DEFAULT_DATA_ROOT, DEFAULT_SEED
from dataset import SPLIT_NAMES, write_synthetic_dataset
from errors import HybridQNNError, UsageError
from ensemble import METHODS
from hybrid import MODEL_BUILDERS
from log_manager import RunLogManager
import trainer


# 로깅 설정
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class ExperimentArgumentParser(argparse.ArgumentParser):
    """argparse 오류를 UsageError(종료 코드 1)로 전달"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = ExperimentArgumentParser(description='하이브리드 양자-고전 CNN (BreakHis 400X 이진 분류)')
    parser.add_argument('--verbose', action='store_true', help='DEBUG 로그 출력')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ExperimentArgumentParser)

    train = commands.add_parser('train', help='모델 학습')
    train.add_argument('--config', help='KEY=VALUE 형식 설정 파일 (플래그가 우선)')
    train.add_argument('--model', choices=list(MODEL_BUILDERS), help='모델 ID')
    train.add_argument('--data-root', help='데이터셋 루트 디렉토리')
    train.add_argument('--seed', type=int, help='난수 시드')
    train.add_argument('--epochs', type=int, help='에폭 수')
    train.add_argument('--lr', type=float, help='학습률')
    train.add_argument('--batch', type=int, help='배치 크기')
    train.add_argument('--head', help='양자 헤드 모드 (analytic | shots:N)')
    train.add_argument('--out', help='출력 디렉토리')
    train.add_argument('--manifest', help='분할 매니페스트 (없으면 새로 생성)')
    train.add_argument('--workers', type=int, help='평가 스레드 수')

    evaluate = commands.add_parser('eval', help='체크포인트 평가')
    evaluate.add_argument('--config', help='KEY=VALUE 형식 설정 파일 (플래그가 우선)')
    evaluate.add_argument('--checkpoint', help='체크포인트 파일')
    evaluate.add_argument('--model', choices=list(MODEL_BUILDERS), help='기대하는 모델 ID')
    evaluate.add_argument('--split', choices=list(SPLIT_NAMES), help='평가 분할 (기본 test)')
    evaluate.add_argument('--data-root', help='데이터셋 루트 디렉토리 (기본: 학습 설정)')
    evaluate.add_argument('--manifest', help='분할 매니페스트 (기본: 학습 때 기록된 매니페스트)')
    evaluate.add_argument('--out', help='출력 디렉토리')
    evaluate.add_argument('--workers', type=int, help='평가 스레드 수')

    ensemble = commands.add_parser('ensemble', help='예측 레코드 앙상블')
    ensemble.add_argument('predictions', nargs='+', help='모델별 예측 레코드 파일 (JSONL)')
    ensemble.add_argument('--config', help='KEY=VALUE 형식 설정 파일 (플래그가 우선)')
    ensemble.add_argument('--method', choices=list(METHODS), help='앙상블 방법 (기본 average)')
    ensemble.add_argument('--weight-from', nargs='+', help='가중치 계산용 검증 예측 파일 (predictions와 같은 순서)')
    ensemble.add_argument('--table', action='store_true', default=None, help='모든 조합 × 방법 표 출력')
    ensemble.add_argument('--out', help='출력 디렉토리')

    predict = commands.add_parser('predict', help='단일 이미지 추론')
    predict.add_argument('--checkpoint', required=True, help='체크포인트 파일')
    predict.add_argument('--image', required=True, help='이미지 파일')

    synth = commands.add_parser('synth-data', help='합성 데이터셋 생성')
    synth.add_argument('--out', required=True, help='데이터셋 루트 디렉토리')
    synth.add_argument('--n-per-class', type=int, default=16, help='클래스당 이미지 수')
    synth.add_argument('--seed', type=int, default=DEFAULT_SEED, help='난수 시드')
    synth.add_argument('--image-size', type=int, default=64, help='이미지 한 변 픽셀 수')

    split = commands.add_parser('split', help='분할 매니페스트만 생성')
    split.add_argument('--data-root', default=DEFAULT_DATA_ROOT, help='데이터셋 루트 디렉토리')
    split.add_argument('--seed', type=int, default=DEFAULT_SEED, help='분할 시드')
    split.add_argument('--manifest', required=True, help='매니페스트 출력 경로')
    return parser


def run_train(args) -> int:
    overrides = {
        'model': args.model, 'data_root': args.data_root, 'seed': args.seed, 'epochs': args.epochs,
        'lr': args.lr, 'batch': args.batch, 'head': args.head, 'out': args.out,
        'manifest': args.manifest, 'workers': args.workers,
    }
    config = trainer.load_config(overrides, args.config)
    logger.info(f"학습 설정: {json.dumps(config.model_dump(), ensure_ascii=False, sort_keys=True)}")
    outcome = trainer.train(config)
    for split, metrics in outcome.reports.items():
        print(f"=== {config.model} {split} ===")
        print(metrics.format())
    print(f"checkpoint: {outcome.checkpoint_path}")
    return 0


def run_eval(args) -> int:
    overrides = {
        'checkpoint': args.checkpoint, 'model': args.model, 'split': args.split, 'data_root': args.data_root,
        'manifest': args.manifest, 'out': args.out, 'workers': args.workers,
    }
    config = trainer.load_config(overrides, args.config, schema=trainer.EvalConfig)
    metrics, _ = trainer.evaluate(config.checkpoint, config.split, config.data_root, config.manifest,
                                  config.out, model_id=config.model, workers=config.workers)
    print(metrics.format())
    return 0


def run_ensemble(args) -> int:
    overrides = {'method': args.method, 'weight_from': args.weight_from, 'table': args.table, 'out': args.out}
    config = trainer.load_config(overrides, args.config, schema=trainer.EnsembleConfig)
    logs = RunLogManager(config.out)
    if config.table:
        table = trainer.ensemble_table(args.predictions, config.weight_from)
        print(table.to_string(index=False))
        table.to_csv(logs.out_dir / "ensemble_table.csv", index=False)
        return 0
    metrics, records = trainer.ensemble_eval(args.predictions, config.method, config.weight_from)
    split = trainer.prediction_split(args.predictions[0])
    logs.write_predictions(records, logs.predictions_path(split, f"ensemble_{config.method}"))
    logs.write_report(f"ensemble_{config.method}_{split}", metrics.to_dict())
    print(metrics.format())
    return 0


def run_predict(args) -> int:
    result = trainer.predict(args.checkpoint, args.image)
    print(json.dumps(result, ensure_ascii=False))
    return 0


def run_synth(args) -> int:
    if args.n_per_class < 1 or args.image_size < 1:
        raise UsageError("--n-per-class와 --image-size는 1 이상이어야 합니다")
    written = write_synthetic_dataset(args.out, args.n_per_class, args.seed, args.image_size)
    print(f"{len(written)}개 이미지 생성: {args.out}")
    return 0


def run_split(args) -> int:
    splits = trainer.write_split_manifest(args.data_root, args.seed, args.manifest)
    for name, records in splits.items():
        print(f"{name}: {len(records)}")
    return 0


COMMANDS = {
    'train': run_train,
    'eval': run_eval,
    'ensemble': run_ensemble,
    'predict': run_predict,
    'synth-data': run_synth,
    'split': run_split,
}


def main(argv: Optional[List[str]] = None) -> int:
    """메인 함수"""
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        return COMMANDS[args.command](args)
    except HybridQNNError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("사용자에 의해 중단되었습니다.")
        return 1


if __name__ == "__main__":
    exit(main())
