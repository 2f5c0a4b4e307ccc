"""
Fixtures compartidas de las pruebas
"""
import numpy as np
import pytest

from models import TrainConfig
from services.volume_service import volume_service


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Configuración mínima: preset tiny, parche 8x32x32, un ítem por lote"""
    return TrainConfig(
        preset="tiny",
        patch=(8, 32, 32),
        batch_size=1,
        steps=2,
        seed=0,
        checkpoint_every=2,
        log_every=1,
        prefetch=1,
    )


@pytest.fixture
def phantoms():
    """Dos fantomas normalizados de 16x48x48"""
    volumes = volume_service.phantom_generate(seed=7, n=2, extents=(16, 48, 48))
    return [volume_service.normalize_zscore(v) for v in volumes]
