import numpy as np
import pytest

from dcvit.encoder import ChannelBatch, ModelConfig, init_model


def tiny_config(**kw):
    base = dict(
        c_max=4,
        img_size=4,
        patch_size=2,
        dim=8,
        depth=2,
        heads=2,
        channel_layers=(2,),
        num_classes=3,
        mlp_ratio=2.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def spread(model, seed=0, scale=0.3):
    """Perturb a fresh model so it is far from the near-zero init."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith(("alpha", "gamma")):
            continue
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return model


def tiny_model(seed=0, dtype=np.float64, **kw):
    return spread(init_model(tiny_config(**kw), seed=seed, dtype=dtype), seed)


def random_batch(B=2, C=3, side=4, seed=0, labels=3):
    rng = np.random.default_rng(seed)
    return ChannelBatch(rng.standard_normal((B, C, side, side)), labels=rng.integers(0, labels, size=B))


@pytest.fixture
def batch():
    return random_batch()


# verdict lines collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criterion")
    config.addinivalue_line("markers", "slow: multi-minute training experiment")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
