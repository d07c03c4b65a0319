import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from jamlab import jamgen  # noqa: E402
from jamlab.specfeat import PROFILES, extract_features  # noqa: E402

# filled by test_acceptance.py: criterion -> (passed, detail)
ACCEPTANCE = {}


def build_features(classes, per_class, jnrs=(10,), seed=7, profile="desk"):
    """Small in-memory feature set (tf, psd, labels) straight from the generator."""
    prof = PROFILES[profile]
    tf, psd, labels = [], [], []
    for c in classes:
        for i in range(per_class):
            _, x, _ = jamgen.generate(seed, c, jnrs[i % len(jnrs)], i)
            a, b = extract_features(x, prof)
            tf.append(a)
            psd.append(b)
            labels.append(c)
    return np.array(tf), np.array(psd), np.array(labels)


@pytest.fixture(scope="session")
def tiny_set():
    return build_features((1, 3, 5), 16)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
