import numpy as np
import pytest

from dataset import write_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synthetic_root(tmp_path):
    """클래스당 10장짜리 BreakHis 형식 합성 데이터셋 디렉토리"""
    root = tmp_path / "breakhis"
    write_synthetic_dataset(root, n_per_class=10, seed=7, image_size=16)
    return root
