import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def central_difference_check(fn, x: torch.Tensor, rel: float = 1e-3, h: float = 1e-6):
    """Compare autograd with central differences of scalar ``fn`` at double-precision ``x``.

    Returns ``(relative_error, analytic, numeric)``.
    """
    x = x.detach().double().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = torch.zeros_like(x)
    flat = x.detach().clone().view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn(flat.view_as(x)).detach())
        flat[i] = orig - h
        fm = float(fn(flat.view_as(x)).detach())
        flat[i] = orig
        numeric.view(-1)[i] = (fp - fm) / (2 * h)
    err = float((analytic - numeric).norm() / analytic.norm().clamp_min(1e-30))
    return err, analytic, numeric


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
