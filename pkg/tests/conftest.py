import numpy as np
import pytest

from certdistill.nn import BatchNorm, Dense, Network, ReLU

# Acceptance criteria report one line each; collected here and printed at the end.
ACCEPTANCE_LINES: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def identity_net(dim: int) -> Network:
    net = Network([Dense(dim, dim)])
    net.layers[0].params["weight"][:] = np.eye(dim)
    return net


@pytest.fixture
def small_net():
    return Network.build(6, [8, 5], 3, seed=0)


def random_net(rng, input_dim, widths, classes, bn_mode):
    """Random small network with non-trivial BN parameters and statistics."""
    net = Network.build(input_dim, widths, classes, seed=int(rng.integers(1 << 30)), bn_mode=bn_mode)
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            layer.params["scale"][:] = rng.uniform(0.5, 1.5, layer.input_dim)
            layer.params["shift"][:] = rng.normal(0, 0.3, layer.input_dim)
            layer.buffers["running_mean"][:] = rng.normal(0, 0.5, layer.input_dim)
            layer.buffers["running_var"][:] = rng.uniform(0.5, 2.0, layer.input_dim)
        elif isinstance(layer, Dense):
            layer.params["bias"][:] = rng.normal(0, 0.1, layer.output_dim)
    return net





@pytest.fixture(scope="session")
def default_sources():
    """Source backbones for seeds 0-3 under the default experiment config."""
    from certdistill import harness
    config = harness.ExperimentConfig()
    return config, {seed: harness.train_source(config, seed) for seed in config.seeds}
