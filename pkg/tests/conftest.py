import numpy as np
import pytest


def naive_conv(x, kernel, bias=None, pads=(0, 0, 0, 0), stride=1, groups=1):
    """Brute-force float64 convolution straight from the definition."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = x.shape
    o, cpg, kh, kw = kernel.shape
    top, bottom, left, right = pads
    oh = (h + top + bottom - kh) // stride + 1
    ow = (w + left + right - kw) // stride + 1
    opg = o // groups
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            g = oc // opg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cpg):
                        for a in range(kh):
                            u = i * stride + a - top
                            if not 0 <= u < h:
                                continue
                            for bb in range(kw):
                                v = j * stride + bb - left
                                if 0 <= v < w:
                                    acc += x[b, g * cpg + ci, u, v] * kernel[oc, ci, a, bb]
                    out[b, oc, i, j] = acc + (0.0 if bias is None else bias[oc])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
