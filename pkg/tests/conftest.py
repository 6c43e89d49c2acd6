import numpy as np
import pytest

from app.core.config import settings
from app.models.config import FactorConfig, HelixConfig
from latent_response.data import gen_factors, gen_helix
from latent_response.vae import constant_decoder_vae, identity_vae, supervised_linear_vae


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """日志只输出到控制台，错误记录写入临时目录"""
    monkeypatch.setattr(settings, "LOG_FILE", "")
    monkeypatch.setattr(settings, "ERROR_LOG_DIR", str(tmp_path / "errors"))
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(tmp_path / "runs"))


@pytest.fixture
def identity_model():
    return identity_vae(2, log_sigma=-6.0)


@pytest.fixture
def radial_model():
    """h(z) = 0，因此 u(z) = −z"""
    return constant_decoder_vae(2, np.zeros(2))


@pytest.fixture
def factor_config():
    return FactorConfig(cardinalities=[3, 3, 3], obs_dim=32, code_dim=4, hidden_dim=32, embed_seed=0)


@pytest.fixture
def factor_dataset(factor_config):
    return gen_factors(factor_config)


@pytest.fixture
def disentangled_model(factor_dataset):
    return supervised_linear_vae(factor_dataset)


@pytest.fixture
def helix_dataset():
    return gen_helix(HelixConfig(n=256, sigma=0.1, seed=7))
