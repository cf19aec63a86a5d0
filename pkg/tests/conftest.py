import sys

import pytest

from fpcascade.phantom import make_corpus
from fpcascade.pipeline import fit_pet_stats, gsm_slices, prepare
from fpcascade.preprocess import PreprocessConfig


@pytest.fixture(scope="session")
def toy_prepared():
    """Eight preprocessed 32x32x16 phantom studies, one of them healthy."""
    studies, _ = make_corpus(8, 0.125, seed=3, extents=(32, 32, 16))
    cfg = fit_pet_stats(studies, PreprocessConfig(patch_xy=32))
    return prepare(studies, cfg)


@pytest.fixture(scope="session")
def toy_slices(toy_prepared):
    return gsm_slices(toy_prepared)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
