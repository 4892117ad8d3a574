import numpy as np
import pytest

from tailforge.nnkernel import init_params
from tailforge.synthbench import DatasetSpec, gen_dataset


def make_params(num_classes=4, channels=(4, 8), d_emb=8, dtype=np.float64, seed=0,
                randomize=True):
    """Small network; ``randomize`` also perturbs the tensors that start at
    constants so gradients through them are non-trivial."""
    rng = np.random.default_rng(seed)
    p = init_params(num_classes, rng, channels, d_emb, dtype=dtype)
    if randomize:
        p.classifier_w = rng.normal(0, 0.5, p.classifier_w.shape).astype(dtype)
        p.bn_gamma = rng.uniform(0.5, 1.5, d_emb).astype(dtype)
        p.bn_beta = rng.normal(0, 0.3, d_emb).astype(dtype)
        p.conv_b = [rng.normal(0, 0.1, b.shape).astype(dtype) for b in p.conv_b]
    return p


@pytest.fixture
def params():
    return make_params()


@pytest.fixture(scope="session")
def small_data():
    return gen_dataset(DatasetSpec(num_classes=6, max_count=30, imbalance_ratio=10,
                                   val_per_class=5, seed=3))


def small_settings(epochs=15):
    from tailforge.optim import OptimConfig
    from tailforge.training import ModelConfig, TrainSettings

    return TrainSettings(
        model=ModelConfig(channels=(8, 16), d_emb=16),
        optim=OptimConfig(base_lr_per_256=0.4, batch_size=16, warmup_epochs=1,
                          decay_epochs=[10, 13], total_epochs=epochs),
    )


@pytest.fixture(scope="session")
def small_noisy():
    """Five-class noisy long-tailed split plus a model trained on it."""
    from tailforge.training import train_model

    train, val = gen_dataset(DatasetSpec(num_classes=5, max_count=60, imbalance_ratio=5,
                                         noise_rate=0.2, val_per_class=10, seed=0))
    settings = small_settings()
    params = train_model(train.images, train.labels, 5, settings, np.random.default_rng(0))
    return train, val, settings, params
