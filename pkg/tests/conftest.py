import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b=None, stride=(1, 1), dilation=(1, 1), groups=1, padding=(0, 0)):
    """Direct-summation grouped dilated cross-correlation; independent of lrnnet."""
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    ph, pw = padding
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - dilation[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * pw - dilation[1] * (kw - 1) - 1) // stride[1] + 1
    cog = co // groups
    out = np.zeros((n, co, ho, wo))
    for bn in range(n):
        for o in range(co):
            grp = o // cog
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, ci, i, j] * xp[bn, grp * cig + ci,
                                                           r * stride[0] + i * dilation[0],
                                                           s * stride[1] + j * dilation[1]]
                    out[bn, o, r, s] = acc + (0.0 if b is None else b[o])
    return out


# (criterion, status, detail) rows filled by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {status:<8} {detail}")
