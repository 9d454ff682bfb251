"""Shared converged runs for the acceptance suite and the per-criterion summary."""

import hashlib
import inspect

import pytest

from ldglab import domain, flow, sym3core
from ldglab.domain import BoundarySpec, Grid2D
from ldglab.flow import load_checkpoint, run_flow, save_checkpoint

ACCEPTANCE_LINES = {}


def _source_key():
    h = hashlib.sha256()
    for mod in (sym3core, domain, flow):
        h.update(inspect.getsource(mod).encode())
    return h.hexdigest()[:16]


class RunCache:
    """Converged states keyed by parameters, kept on disk between sessions.

    The key includes a hash of the solver sources, so any change to the
    solver invalidates old entries.
    """

    def __init__(self, root):
        self.root = root
        self.mem = {}
        self.src = _source_key()

    def get(self, N=513, epsilon=0.01, beta=2.0, delta1=0.3, delta2=0.2):
        key = (N, epsilon, beta, delta1, delta2)
        if key not in self.mem:
            name = f"{self.src}_N{N}_e{epsilon:g}_b{beta:g}_d{delta1:g}_{delta2:g}.ckpt"
            path = self.root / name
            if path.exists():
                state = load_checkpoint(path)
            else:
                state = run_flow(Grid2D(N), BoundarySpec(delta1, delta2), epsilon, beta)
                save_checkpoint(path, state)
            self.mem[key] = state
        return self.mem[key]


@pytest.fixture(scope="session")
def runs(request):
    return RunCache(request.config.cache.mkdir("ldglab-runs"))


@pytest.fixture
def report():
    """Record the one-line outcome of an acceptance criterion."""

    def _record(number, ok, detail, extra=()):
        ACCEPTANCE_LINES[number] = (ok, detail, list(extra))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        ok, detail, extra = ACCEPTANCE_LINES[n]
        tr.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        for line in extra:
            tr.write_line(f"              {line}")
