import pytest
import torch

from xmod.dataset import PhantomSpec, generate_phantom_dataset

# keep CPU runs reproducible and avoid oversubscription in CI
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantoms(tmp_path_factory):
    """Small A/B phantom sets shared by the training and pipeline tests."""
    root = tmp_path_factory.mktemp("phantoms")
    a = generate_phantom_dataset(PhantomSpec(image_size=64, n_slices=20), 1, root / "a")
    b = generate_phantom_dataset(PhantomSpec(image_size=64, n_slices=20, modality_contrast="B_style"), 2, root / "b")
    test = generate_phantom_dataset(PhantomSpec(image_size=64, n_slices=6, modality_contrast="B_style"), 3, root / "test")
    return {"root": root, "a": a, "b": b, "test": test}


@pytest.fixture
def deterministic_env(monkeypatch):
    monkeypatch.setenv("XMOD_DETERMINISTIC", "1")
    yield
    torch.use_deterministic_algorithms(False)


# --- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    pending = getattr(item.module, "_notes", None)
    if pending:
        _NOTES.setdefault(n, []).extend(pending)
        pending.clear()
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "FAIL"
        prev = _CRITERIA.get(n)
        if prev is None or prev[0] == "PASS":
            _CRITERIA[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
        for text in _NOTES.get(n, []):
            terminalreporter.write_line(f"              {text}")
