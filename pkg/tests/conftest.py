"""Shared fixtures: a dataset with a small test split and quickly trained models.

The full-scale pipeline lives in test_acceptance.py; these fixtures keep the
unit tests fast while still exercising trained (not random) networks.
"""
import sys

import numpy as np
import pytest

from graybox import synth
from graybox.zoo import detector as det
from graybox.zoo import public as pub
from graybox.zoo.classifier import EXTRACTORS, FUSIONS, train_classifier


@pytest.fixture(scope="session")
def small_dataset():
    return synth.generate_dataset(11, n_train=2000, n_test=100, confounder_fraction=0.5)


@pytest.fixture(scope="session")
def generic():
    return synth.generic_scenes(2, 2000), synth.generic_scenes(2, 500, "generic-heldout")


@pytest.fixture(scope="session")
def small_detector(generic):
    (images, glyphs), heldout = generic
    return det.pretrain_detector(images, glyphs, 5, heldout=heldout)


@pytest.fixture(scope="session")
def small_publics(generic):
    (images, glyphs), heldout = generic
    return [pub.train_public(f"public-{i}", arch, images, glyphs, 20 + i, heldout=heldout, epochs=4)
            for i, arch in enumerate(pub.ARCHITECTURES)]


@pytest.fixture(scope="session")
def small_models(small_dataset, small_detector):
    return {f"{e}-{f}": train_classifier(small_dataset, e, f, 3, detector=small_detector,
                                         epochs=30, floor=0.0)
            for e in EXTRACTORS for f in FUSIONS}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
