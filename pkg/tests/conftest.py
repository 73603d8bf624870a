import numpy as np
import pytest

from cfa_forge.data import ImageRgb, PatchDataset, extract_patches
from cfa_forge.synth import dead_leaves


def toy_dataset(count=200, n=4, seed=0):
    """``count`` patches of edge 3n cut from small dead-leaves images."""
    rng = np.random.default_rng(seed)
    patches, prov = [], []
    i = 0
    while len(patches) < count:
        img = ImageRgb(dead_leaves(15 * n, 15 * n, rng), f"toy{i}")
        for p in extract_patches(img, n):
            patches.append(p)
            prov.append(img.source_id)
        i += 1
    return PatchDataset(n, np.stack(patches[:count]), prov[:count])


@pytest.fixture(scope="session")
def toy():
    return toy_dataset()


# acceptance verdicts, one line per criterion, echoed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
