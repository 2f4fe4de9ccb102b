import hashlib
import json

import pytest
import torch

from dynpatch.datasets import synthetic_scenes
from dynpatch.victim import load_detector, save_detector, train_toy_detector

torch.set_num_threads(1)

DETECTOR_RECIPE = {"train": (2000, 1), "holdout": (300, 2), "epochs": 20, "seed": 0, "occlusion": 0.02,
                   "width": 16, "context_dilation": 2}


def _recipe_key(recipe) -> str:
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def toy_detector(request):
    """The reference toy detector, trained once and cached between sessions.

    Set ``--cache-clear`` to force a retrain.
    """
    r = DETECTOR_RECIPE
    cache = request.config.cache.mkdir("dynpatch-detector")
    path = cache / f"detector-{_recipe_key(r)}.pt"
    if path.exists():
        return load_detector(path)
    det = train_toy_detector(synthetic_scenes(*r["train"]), r["epochs"], r["seed"],
                             holdout=synthetic_scenes(*r["holdout"]), min_ap=0.0, occlusion=r["occlusion"],
                             width=r["width"], context_dilation=r["context_dilation"])
    save_detector(det, path)
    return load_detector(path)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, [title, True, []])
    if rep.failed:
        entry[1] = False
        entry[2].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, failed = _CRITERIA[number]
        tail = "" if ok else f"  (failed: {', '.join(failed)})"
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}{tail}")
