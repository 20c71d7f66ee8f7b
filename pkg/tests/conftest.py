import json
import os
from pathlib import Path

import numpy as np
import pytest

from modguard.imageops import ImageTensor, encode_png

_acceptance = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _acceptance.append((marker.args[0], rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _acceptance:
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{status}] {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, height, width):
    return ImageTensor(rng.uniform(size=(height, width, 3)))


def write_fixture_dir(root, count, seed=7, sizes=((64, 64), (48, 80), (90, 60))):
    """Deterministic folder of PNG images named img_000.png, img_001.png, ..."""
    gen = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        h, w = sizes[i % len(sizes)]
        img = ImageTensor(gen.uniform(size=(h, w, 3)))
        path = root / f"img_{i:03d}.png"
        path.write_bytes(encode_png(img))
        paths.append(path)
    return paths


GOLDEN_DIR = Path(__file__).parent / "golden"


def mask_timings(obj):
    """Drop wall-clock fields so reports can be compared across runs."""
    if isinstance(obj, dict):
        return {k: mask_timings(v) for k, v in obj.items() if k not in ("timings_ms", "latency_ms")}
    if isinstance(obj, list):
        return [mask_timings(v) for v in obj]
    return obj


def assert_close_tree(got, want, tol=1e-9, where="$"):
    if isinstance(want, dict):
        assert isinstance(got, dict) and list(got) == list(want), f"{where}: keys differ"
        for k in want:
            assert_close_tree(got[k], want[k], tol, f"{where}.{k}")
    elif isinstance(want, list):
        assert isinstance(got, list) and len(got) == len(want), f"{where}: length differs"
        for i, (g, w) in enumerate(zip(got, want)):
            assert_close_tree(g, w, tol, f"{where}[{i}]")
    elif isinstance(want, float) and not isinstance(got, bool):
        assert abs(got - want) <= tol, f"{where}: {got} != {want}"
    else:
        assert got == want, f"{where}: {got!r} != {want!r}"


def check_golden(name, data):
    """Compare ``data`` with tests/golden/<name>.json (floats to 1e-9).

    Set MODGUARD_REGEN_GOLDEN=1 to rewrite the file instead.
    """
    path = GOLDEN_DIR / f"{name}.json"
    data = json.loads(json.dumps(data))
    if os.environ.get("MODGUARD_REGEN_GOLDEN") == "1":
        GOLDEN_DIR.mkdir(exist_ok=True)
        path.write_text(json.dumps(data, indent=2) + "\n")
    assert_close_tree(data, json.loads(path.read_text()))
