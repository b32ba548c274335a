import numpy as np
import pytest
import torch


def finite_difference_errors(model: torch.nn.Module, loss_fn, step: float = 1e-4, floor: float = 1e-6) -> dict[str, float]:
    """Relative L2 error between autograd and central differences, per parameter tensor.

    ``loss_fn(model)`` must return a scalar. The model should already be float64.
    Some parameters have an exactly zero gradient (a key bias under softmax, a
    per-channel bias ahead of per-channel normalization), so the denominator is
    floored at ``floor`` to keep rounding noise from reading as a large error.
    """
    model.zero_grad()
    loss_fn(model).backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn(model).item()
                flat[i] = orig - step
                down = loss_fn(model).item()
                flat[i] = orig
                numeric.view(-1)[i] = (up - down) / (2 * step)
        scale = max(analytic.norm().item(), numeric.norm().item(), floor)
        errors[name] = (analytic - numeric).norm().item() / scale
    return errors


@pytest.fixture
def fd_errors():
    return finite_difference_errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = pytest.StashKey[list]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    passed = outcome.get_result().passed
    item.config.stash.setdefault(_criteria, []).append((number, title, passed, call.duration, detail))


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(_criteria, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, duration, detail in sorted(rows):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status}  {title}  ({duration:.1f}s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
