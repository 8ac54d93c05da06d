import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_tasks(window=4, horizon=3, seed=0, days=60):
    from vta.grpo import make_tasks
    from vta.market import Regime, make_windows, synth_market
    s = synth_market(seed, days, Regime(drift=0.003, volatility=0.01))
    return make_tasks(make_windows(s, window, horizon, 1, "T"))


@pytest.fixture(scope="session")
def tiny_policy():
    from vta.policy import ToyPolicyConfig, ToyReasoningPolicy
    return ToyReasoningPolicy(ToyPolicyConfig(horizon=3, window=4, n_reason=2, levels=9, grid_low=-0.5,
                                              grid_high=1.5, init_noise=0.3))


@pytest.fixture(scope="session")
def tiny_task():
    return tiny_tasks()[30]


def module_fd_check(module, loss_fn, h=1e-5):
    """Relative error between autograd and central differences over every parameter of ``module``."""
    import torch
    from torch.nn.utils import parameters_to_vector, vector_to_parameters

    import oracles
    module.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in module.parameters()]).numpy().copy()
    base = parameters_to_vector(module.parameters()).detach().clone()

    def f(v):
        with torch.no_grad():
            vector_to_parameters(torch.as_tensor(v), module.parameters())
            return float(loss_fn())

    numeric = oracles.central_diff(f, base.numpy(), h)
    with torch.no_grad():
        vector_to_parameters(base, module.parameters())
    return oracles.rel_error(analytic, numeric)


def tiny_backbone(seed=0):
    from vta.backbone import BackboneConfig, EmbeddingMatrix, build_backbone
    cfg = BackboneConfig(window=4, horizon=3, d_model=8, heads=2, n_blocks=1, pca_k=4, seed=seed)
    return build_backbone(cfg, EmbeddingMatrix.synthetic(16, 8, seed=seed, clusters=4))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def acceptance_line(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
