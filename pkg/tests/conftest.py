import numpy as np
import pytest
import torch

from lilac.numerics import configure_determinism

configure_determinism()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv1d(x, w, b, stride=1):
    """Reference same-padded cross-correlation written as explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c_out, c_in, k = w.shape
    t_in = x.shape[-1]
    half = (k - 1) // 2
    t_out = t_in // stride
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            acc = 0.0 if b is None else float(b[o])
            for i in range(c_in):
                for j in range(k):
                    src = t * stride + j - half
                    if 0 <= src < t_in:
                        acc += w[o, i, j] * x[i, src]
            out[o, t] = acc
    return out


@pytest.fixture
def t64():
    def make(a):
        return torch.as_tensor(np.asarray(a), dtype=torch.float64)
    return make


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """``criterion -> (passed, detail)``; printed one line each after the run."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
