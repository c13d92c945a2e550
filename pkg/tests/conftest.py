import numpy as np
import pytest
import torch

from smunet.engine import TrainConfig
from smunet.phantom import PhantomConfig, generate_phantom
from smunet.unet import UNetConfig

TINY_UNET = UNetConfig(base_width=4, norm_groups=2)


@pytest.fixture(scope="session")
def phantoms16():
    return generate_phantom(PhantomConfig((16, 16, 16), num_volumes=4, seed=3))


@pytest.fixture(scope="session")
def phantoms32():
    return generate_phantom(PhantomConfig((32, 32, 32), num_volumes=3, seed=7))


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=1, seed=5, spatial_size=(16, 16, 16), unet=TINY_UNET)


def central_difference(f, tensor, index, h=1e-6):
    """Central finite difference of scalar ``f()`` w.r.t. ``tensor[index]`` (in place)."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(f())
        tensor[index] = orig - h
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_coords(tensors, n, rng):
    """``n`` (tensor, flat-index) pairs drawn across a list of tensors."""
    sizes = np.array([t.numel() for t in tensors])
    picks = rng.choice(sizes.sum(), size=n, replace=False)
    offsets = np.cumsum(sizes) - sizes
    out = []
    for p in picks:
        k = int(np.searchsorted(offsets, p, side="right") - 1)
        out.append((tensors[k], int(p - offsets[k])))
    return out


def fd_check(loss_fn, tensors, n, seed, h=1e-6):
    """Max relative error between autograd and central differences on ``n`` coordinates."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    grads = [t.grad.detach().clone().reshape(-1) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, flat in random_coords(tensors, n, rng):
        k = next(i for i, u in enumerate(tensors) if u is t)
        view = t.data.view(-1)
        numeric = central_difference(loss_fn, view, flat, h)
        worst = max(worst, relative_error(grads[k][flat].item(), numeric))
    return worst


# --- acceptance summary -------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, title: str, failures: list[str], detail: str = ""):
    """Store the outcome of one acceptance criterion and fail the test if needed."""
    ok = not failures
    note = detail if ok else "; ".join(failures)
    ACCEPTANCE_RESULTS[number] = (ok, f"{title}: {note}" if note else title)
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {ACCEPTANCE_RESULTS[number][1]}"
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")
