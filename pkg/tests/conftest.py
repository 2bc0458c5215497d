import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from adascale.detcore import Annotation, Detection
from adascale.geometry import BoundingBox

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@st.composite
def boxes(draw, lo=0.0, hi=200.0, min_side=0.5):
    x0 = draw(st.floats(lo, hi - min_side, allow_nan=False))
    y0 = draw(st.floats(lo, hi - min_side, allow_nan=False))
    w = draw(st.floats(min_side, hi - x0, allow_nan=False))
    h = draw(st.floats(min_side, hi - y0, allow_nan=False))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def random_box(rng, extent=100.0, min_side=1.0, max_side=40.0):
    w, h = rng.uniform(min_side, max_side, size=2)
    x0 = rng.uniform(0, extent - w)
    y0 = rng.uniform(0, extent - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def scores_for(cls: int, conf: float, n_classes: int) -> tuple[float, ...]:
    """Probability vector whose argmax is ``cls`` with value ``conf``."""
    rest = (1.0 - conf) / n_classes
    out = [rest] * (n_classes + 1)
    out[cls] = conf
    out[0] = 1.0 - conf - rest * (n_classes - 1)
    return tuple(out)


def random_detection(rng, n_classes=3, extent=100.0, **kw) -> Detection:
    cls = int(rng.integers(1, n_classes + 1))
    conf = float(rng.uniform(0.3, 1.0))
    return Detection(random_box(rng, extent, **kw), scores_for(cls, conf, n_classes))


def random_annotation(rng, n_classes=3, extent=100.0, **kw) -> Annotation:
    return Annotation(random_box(rng, extent, **kw), int(rng.integers(1, n_classes + 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request, capsys):
    """Print and record one PASS/FAIL line for an acceptance criterion."""
    def emit(number: int, ok: bool, elapsed: float, limit: float, detail: str) -> bool:
        timely = elapsed < limit
        status = "PASS" if ok and timely else "FAIL"
        line = f"criterion {number}: {status}  ({elapsed:.1f}s / limit {limit:g}s)  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok and timely
    return emit
