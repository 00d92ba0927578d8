import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memo_tta import nn
from memo_tta.cli import build_test_set, build_train_set
from memo_tta.config import RunConfig

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def tiny_conv(seed=0, num_classes=3, dtype=np.float32, pool="avg"):
    """A convsmall small enough for finite differences."""
    m = nn.build_model({"arch": "convsmall", "input_shape": [1, 8, 8], "num_classes": num_classes,
                        "widths": [3, 4], "pool": pool}, seed)
    return _perturb_bn(m, seed).astype(dtype)


def tiny_mlp(seed=0, num_classes=3, dtype=np.float32):
    m = nn.build_model({"arch": "mlp_bn", "input_shape": [1, 4, 4], "num_classes": num_classes,
                        "hidden": [6, 5]}, seed)
    return _perturb_bn(m, seed).astype(dtype)


def _perturb_bn(model, seed):
    # non-trivial running statistics and affine parameters, as after training
    rng = np.random.default_rng(seed + 100)
    for bn in model.bn_layers():
        bn.running_mean[:] = rng.normal(0, 0.3, bn.channels)
        bn.running_var[:] = rng.uniform(0.5, 2.0, bn.channels)
        bn.gamma.data[:] = rng.uniform(0.7, 1.3, bn.channels)
        bn.beta.data[:] = rng.normal(0, 0.2, bn.channels)
    return model


@pytest.fixture
def conv_model():
    return tiny_conv()


@pytest.fixture
def mlp_model():
    return tiny_mlp()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _source_digest() -> str:
    src = Path(nn.__file__).parent
    h = hashlib.sha256()
    for f in sorted(src.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_model(request):
    """ConvSmall trained with the default run config, cached across sessions by source digest."""
    cfg = RunConfig()
    cache_dir = Path(request.config.cache.mkdir("memo_tta_models"))
    path = cache_dir / f"convsmall-{_source_digest()}.ckpt"
    if path.exists():
        try:
            return nn.load_checkpoint(path)[0]
        except nn.CheckpointError:
            path.unlink()
    train = build_train_set(cfg)
    model = nn.build_model(cfg.model.to_arch(train.input_shape, train.num_classes), cfg.seed)
    t = cfg.train
    model, _ = nn.train_supervised(model, train, t.epochs, t.lr, cfg.seed, t.batch_size, t.momentum,
                                   t.weight_decay, t.augment)
    nn.save_checkpoint(model, path)
    return model


@pytest.fixture(scope="session")
def desk_test_set():
    return build_test_set(RunConfig())


ACCEPTANCE_LINES: list = []


def report_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
