import pytest
import torch

from pfcm.core.schema import RunConfig
from pfcm.field.schema import ArchDescriptor
from pfcm.field.service import IdealPointDenoiser, build_meta
from pfcm.phantoms.schema import DoseModel, PhantomSpec
from pfcm.phantoms.service import generate_dataset, generate_phantom
from pfcm.settings import Settings


@pytest.fixture
def settings():
    return Settings(SEED=None, DEVICE='cpu', LOG_LEVEL='WARNING', WORKERS=0)


@pytest.fixture
def spec():
    return PhantomSpec(n=16, n_ellipses_range=(2, 3))


@pytest.fixture
def dose():
    return DoseModel(dose_factor=0.25)


@pytest.fixture
def samples(spec, dose):
    return generate_dataset(spec, dose, count=4, seed=0)


@pytest.fixture
def x0(spec):
    return generate_phantom(spec, seed=3)


@pytest.fixture
def config():
    """Cria uma U-Net pequena em patches 16 x 16 com agenda de 8 níveis."""
    return RunConfig(
        d=128.0,
        n_steps=8,
        sigma_max=80.0,
        width=8,
        levels=1,
        batch=2,
        patch=16,
        iters=3,
        lr=1e-3,
        checkpoint_every=2,
        seed=0,
    )


@pytest.fixture
def toy_arch():
    return ArchDescriptor(kind='toy')


@pytest.fixture
def phi_point(config, x0):
    meta = build_meta(config, 'pfgmpp', 'edm')
    return IdealPointDenoiser(x0, meta)


@pytest.fixture
def theta_point(config, x0):
    meta = build_meta(config, 'pfcm', 'consistency')
    return IdealPointDenoiser(x0, meta)


@pytest.fixture
def noisy(x0):
    generator = torch.Generator().manual_seed(11)
    return (x0 + 0.05 * torch.randn(x0.shape, generator=generator)).clamp(
        0, 1
    )
