import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def sinusoid_map(freq=1.2, fs=30.0, frames=900, regions=4, base=128.0, amp=10.0, phase=0.0):
    """RGB map whose every trace is ``base + amp * sin(2 pi f t)``."""
    from fastbvp.stmap import SpatialTemporalMap

    t = np.arange(frames) / fs
    trace = base + amp * np.sin(2 * np.pi * freq * t + phase)
    return SpatialTemporalMap(np.broadcast_to(trace, (regions, 3, frames)).copy(), fs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_stmap_csv(tmp_path):
    """Write a raw value matrix (frames x 3I) as a map CSV and return the path."""

    def _write(values, name="clip.csv", header=None):
        values = np.asarray(values, dtype=float)
        regions = values.shape[1] // 3
        if header is None:
            header = ["frame"] + [f"r{i}_{c}" for i in range(1, regions + 1) for c in "RGB"]
        path = tmp_path / name
        lines = [",".join(header)]
        for n, row in enumerate(values):
            lines.append(",".join([str(n)] + [repr(float(v)) for v in row]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write


# --- acceptance reporting ---------------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``(criterion, ok, detail)`` line; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number, ok, detail):
        lines.append((number, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
