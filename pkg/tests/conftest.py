import os
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from rfm.data import GaussianMixture
from rfm.flow import TrainConfig, pretrain_cfm, FlowModel

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cache_root(request) -> Path:
    """Persistent cache (under .pytest_cache) for pretrained checkpoints."""
    return Path(request.config.cache.mkdir("rfm-priors"))


PRIOR_SPECS = {
    "left": (GaussianMixture.gaussian(-1.0, 1.0), 11),
    "right": (GaussianMixture.gaussian(1.0, 1.0), 12),
    "standard": (GaussianMixture.gaussian(0.0, 1.0), 13),
    "bimodal": (GaussianMixture.build([[-2.0], [2.0]], stds=[0.6, 0.6]), 14),
}

PRIOR_TRAIN = TrainConfig(steps=6000, batch=256, lr=1e-3, lr_final=1e-5, late_fraction=0.5)


@pytest.fixture(scope="session")
def priors(cache_root):
    """Session-wide 1D pretrained flows keyed by name: (model, mixture)."""
    out = {}
    for name, (gm, seed) in PRIOR_SPECS.items():
        path = cache_root / f"unit-{name}-{seed}-{PRIOR_TRAIN.steps}.json"
        if path.exists():
            model = FlowModel.load(path)
        else:
            model = pretrain_cfm(gm.sample, 1, seed, PRIOR_TRAIN)
            model.save(path)
        out[name] = (model, gm)
    return out


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance suite's one-line verdicts, if it ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
