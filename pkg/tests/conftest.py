import numpy as np
import pytest

from idaa_lab.data import synth_dataset
from idaa_lab.models import ModelSpec, save_weights, train


def rel_err(analytic, numeric):
    """Max abs difference scaled by the largest numeric magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion gate")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        num, title = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        item.config._criteria[num] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = config._criteria
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(crit):
        title, ok, detail = crit[num]
        line = f"criterion {num} [{'PASS' if ok else 'FAIL'}] {title}"
        if detail:
            line += f" :: {detail}"
        terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# small shared world for fast harness tests
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def tiny_data():
    # 12x12, 4 classes: big enough for every transform, small enough to attack quickly
    return synth_dataset(seed=11, n_classes=4, per_class=30, size=12)


@pytest.fixture(scope="session")
def tiny_models(tiny_data):
    out = {}
    for arch, seed in (("mlp-2", 1), ("cnn-small", 2)):
        spec = ModelSpec(arch, tiny_data.shape, tiny_data.n_classes)
        out[arch] = train(spec, tiny_data, epochs=15, lr=0.1, seed=seed)
    return out


@pytest.fixture(scope="session")
def tiny_model_files(tiny_models, tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_models")
    paths = {}
    for arch, w in tiny_models.items():
        p = d / f"{arch}.advw"
        save_weights(w, p)
        paths[arch] = str(p)
    return paths
