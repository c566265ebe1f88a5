import numpy as np
import pytest
import torch


def central_difference(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(fn(x))
            flat[i] = orig - step
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
