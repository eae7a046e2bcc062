import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from pointdenoise.model import DualDenoiser, ModelConfig
from pointdenoise.schedule import NoiseSchedule

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def tiny_config(**kw):
    base = dict(dim=32, enc_blocks=2, dec_blocks=1, heads=2, teacher_dim=16, G=4, K=4, patch_width=16, freq_dim=32)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float32, sched=None, **kw):
    torch.manual_seed(seed)
    return DualDenoiser(tiny_config(**kw), sched or NoiseSchedule()).to(dtype)


def perturb_zero_init(model, seed=0, scale=0.05):
    """Give zero-initialized projections small random values so every path is active."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if not p.any():
                p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append "CRITERION n PASS|FAIL ..." lines here
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
