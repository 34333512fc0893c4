import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ctmr.data import Manifest, kfold_by_subject, make_phantom_corpus  # noqa: E402
from ctmr.pipeline import ExperimentConfig, run_experiment  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Five subjects, 32 px, 2-3 slices: enough to exercise every file path quickly."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = make_phantom_corpus(5, 1, 32, (2, 3), seed=3, out_dir=root)
    split = root / "split.json"
    kfold_by_subject(Manifest.load(manifest).subject_ids(), 5, 0).save(split)
    return manifest, split


def tiny_config(manifest, split, out, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(manifest=str(manifest), split=str(split), out=str(out), seed=5,
                           cgan_epochs=1, fcn_epochs=1, base_width=4, resnet_blocks=1,
                           d_widths=[4, 8, 8, 8], fcn_widths=[4, 8, 8])
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tmp_path_factory):
    """One complete small experiment, shared read-only by the pipeline and CLI tests."""
    manifest, split = tiny_corpus
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(manifest, split, out)
    reports = run_experiment(cfg)
    return cfg, reports


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------
_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["ran"] else ("FAIL" if not entry["ok"] else "SKIP")
        terminalreporter.write_line(f"CRITERION {number:>2} {status}  {entry['title']}")
