import numpy as np
import pytest

from spectralfp4.precision import FP4_MAGNITUDES


def _e4m3_positive():
    # Enumerate every positive finite E4M3 value from its bit fields.
    vals = []
    for e in range(16):
        for m in range(8):
            if e == 15 and m == 7:
                continue  # NaN encoding
            if e == 0:
                vals.append(m / 8 * 2.0**-6)
            else:
                vals.append((1 + m / 8) * 2.0 ** (e - 7))
    return np.array(sorted(v for v in vals if v > 0))


E4M3_POSITIVE = _e4m3_positive()
FP4_SIGNED = np.unique(np.r_[-FP4_MAGNITUDES, FP4_MAGNITUDES])


def nearest_even_oracle(x: float, grid: np.ndarray) -> float:
    """Nearest point of a sorted non-negative grid (sign-symmetric), ties to
    the point with even index, which is the even-mantissa neighbour."""
    a = abs(x)
    if a >= grid[-1]:
        return float(np.copysign(grid[-1], x))
    i = int(np.searchsorted(grid, a))
    if grid[i] == a:
        return float(np.copysign(a, x))
    lo, hi = grid[i - 1], grid[i]
    if a - lo < hi - a:
        r = lo
    elif hi - a < a - lo:
        r = hi
    else:
        r = lo if (i - 1) % 2 == 0 else hi
    return float(np.copysign(r, x))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict; it is echoed in the terminal
    summary as a single pass/fail line."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        store[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        title, passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
