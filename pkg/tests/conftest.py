import numpy as np
import pytest

from calibsmooth.numerics import Layer, MlpModel


def random_model(rng, sizes=(3, 5, 4, 3), activation="tanh", dropout_rate=0.0, split_index=None):
    model = MlpModel.init(list(sizes), activation=activation, rng=rng, dropout_rate=dropout_rate, split_index=split_index)
    for layer in model.layers:
        # nonzero biases keep ReLU pre-activations off the kink
        layer.bias += rng.uniform(0.05, 0.3, layer.bias.shape)
    return model


def central_diff(fn, arr, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = fn()
        arr[idx] = old - h
        down = fn()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_model():
    # identity feature layer on R^2 followed by a 2-class softmax head
    return MlpModel(
        [Layer(np.eye(2), np.zeros(2), "linear"), Layer(np.eye(2), np.zeros(2), "softmax")],
        split_index=1,
    )


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
