import numpy as np
import pytest

from morphobench.data import Dataset, SampleMeta
from morphobench.models import BackboneConfig
from morphobench.synthetic import SyntheticConfig, generate_synthetic


def make_meta(i, cell_line="CL01", drug="DMSO", level=0, t=0.0):
    label = "control" if drug == "DMSO" else "drug"
    return SampleMeta(f"s{i:05d}", cell_line, drug, level, t, label)


def random_dataset(n_drug=20, n_control=20, seed=0, cell_lines=("CL01",)):
    rng = np.random.default_rng(seed)
    meta = []
    for i in range(n_drug + n_control):
        drug = "MTX" if i < n_drug else "DMSO"
        meta.append(make_meta(i, cell_lines[i % len(cell_lines)], drug, 4 if drug != "DMSO" else 0, 72.0))
    images = rng.uniform(0, 1, size=(len(meta), 64, 64)).astype(np.float32)
    return Dataset(images, tuple(meta))


@pytest.fixture
def tiny_dataset():
    return random_dataset()


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = SyntheticConfig(images_per_condition=4, drug_names=["MTX", "PTX", "DRUG03"], seed=3)
    return generate_synthetic(cfg)


@pytest.fixture
def micro_backbone():
    return BackboneConfig(conv_blocks=[(4, 3, 2), (4, 3, 2)], latent_dim=8, input_size=8)


@pytest.fixture
def small_backbone():
    return BackboneConfig(conv_blocks=[(4, 3, 2), (8, 3, 2), (8, 3, 2)], latent_dim=16)


# ---------------------------------------------------------------------------
# acceptance reporting: one pass/fail line per criterion at the end of the session

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    entry["ok"] = entry["ok"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA, key=lambda n: (int(n.rstrip("ab")), n)):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>3}: {status}  {e['title']}")
