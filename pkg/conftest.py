"""
Shared fixtures: a tiny synthetic dataset and a matching run configuration
"""

import pytest
import torch

from src.config import RunConfig, SyntheticConfig
from src.synthetic import generate_synthetic

SMALL_DATA = {
    'image_size': 32,
    'train_images': 8,
    'test_images': 6,
    'min_object_size': 8,
    'max_object_size': 16,
    'clutter': 1.0,
    'occlusion_density': 1.0,
}
DATA_SEED = 7


@pytest.fixture(scope='session')
def synthetic_root(tmp_path_factory):
    """Synthetic dataset written once per session (8 train / 6 test, 32px)"""
    root = tmp_path_factory.mktemp('synthetic') / 'data'
    generate_synthetic(str(root), SyntheticConfig(**SMALL_DATA), seed=DATA_SEED)
    return str(root)


@pytest.fixture
def run_config(synthetic_root, tmp_path):
    """RunConfig pointing at the session dataset with a fresh output directory"""
    values = {key: str(value) for key, value in SMALL_DATA.items()}
    values.update({
        'data_root': synthetic_root,
        'out_dir': str(tmp_path / 'run'),
        'batch_size': '4',
        'epochs': '1',
        'seed': '0',
        'learning_rate': '0.001',
    })
    return RunConfig.from_mapping(values)


@pytest.fixture(autouse=True)
def _single_thread():
    """Keep torch reductions in a fixed order so reruns are bit-identical"""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
