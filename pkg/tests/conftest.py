import numpy as np
import pytest

from resquant import Activation, Conv2D, Dense, Network


def random_mlp(rng, sizes, act="relu", bias=True):
    """He-initialised MLP; the last layer is linear."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))
        b = rng.normal(0.0, 0.1, n_out) if bias else None
        layers.append(Dense(w, b))
        if i < len(sizes) - 2:
            layers.append(Activation(act))
    return Network(tuple(layers), (sizes[0],))


def random_cnn(rng, channels=(2, 4), size=6, classes=3, act="relu"):
    c_in, c_mid = channels
    conv = Conv2D(rng.normal(0, np.sqrt(2 / (9 * c_in)), (c_mid, c_in, 3, 3)),
                  rng.normal(0, 0.1, c_mid), stride=1, padding="same")
    flat = c_mid * size * size
    dense = Dense(rng.normal(0, np.sqrt(2 / flat), (classes, flat)), rng.normal(0, 0.1, classes))
    return Network((conv, Activation(act), dense), (c_in, size, size))


def unit_inputs(rng, n, shape):
    xs = rng.standard_normal((n,) + tuple(shape))
    norms = np.linalg.norm(xs.reshape(n, -1), axis=1)
    return xs / norms.reshape((n,) + (1,) * len(shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "seconds": 0.0})
    entry["seconds"] += report.duration
    if report.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {number}: {status}  {entry['title']}  ({entry['seconds']:.2f}s)")
