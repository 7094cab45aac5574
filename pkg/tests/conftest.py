import numpy as np
import pytest

from dwarf.autograd import precision


@pytest.fixture
def f64():
    with precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv2d_loops(x, w, b, stride=1, dilation=1, padding=0):
    """Direct nested-loop convolution used as an independent oracle."""
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[co]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += w[co, ci, i, j] * xp[bi, ci, y * stride + i * dilation, xx * stride + j * dilation]
                    out[bi, co, y, xx] = acc
    return out


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
