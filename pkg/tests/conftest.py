import collections

import numpy as np
import pytest
import torch

from cpce.data import DataConfig, make_dataset
from cpce.losses import random_feature_extractor

# criterion id -> (title, [outcomes])
_CRITERIA: dict[int, list] = collections.OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    n, title = marks
    _CRITERIA.setdefault(n, [title, []])[1].append((report.nodeid.split("::")[-1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, results = _CRITERIA[n]
        ok = all(o == "passed" for _, o in results)
        detail = ", ".join(f"{name}={o}" for name, o in results)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_config():
    return DataConfig(n_volumes=2, n_val_volumes=1, n_slices=4, size=64,
                      train_patches=256, val_patches=64, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return make_dataset(tiny_config)


@pytest.fixture(scope="session")
def extractor():
    return random_feature_extractor(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
