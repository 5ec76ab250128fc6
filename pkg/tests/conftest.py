import numpy as np
import pytest

from beamkam.series import Series, SeriesMeta


def random_series(meta, rng, n_terms=12, max_order=None, kmax=2, momentum=False, real=False):
    """Random truncated series over ``meta`` with small exponents."""
    max_order = meta.degree_cap if max_order is None else max_order
    rows, cs = [], []
    while len(rows) < n_terms:
        row = np.zeros(meta.width, np.int64)
        row[: meta.n] = rng.integers(-kmax, kmax + 1, meta.n)
        budget = int(rng.integers(0, max_order + 1))
        while budget > 0:
            col = int(rng.integers(meta.n, meta.width))
            step = 2 if col < 2 * meta.n else 1
            if step > budget:
                break
            row[col] += 1
            budget -= step
        if np.abs(row[: meta.n]).sum() > meta.fourier_cap:
            continue
        rows.append(row)
        cs.append(complex(rng.normal(), rng.normal()))
    W = Series(meta, np.array(rows), np.array(cs))
    if momentum:
        from beamkam.series import momentum_residual

        W = W.select((momentum_residual(W) == 0).all(axis=1))
    if real:
        W = (W + W.conj_partner()) * 0.5
    return W


@pytest.fixture
def meta2():
    # d=2, n=1, a handful of normal sites
    return SeriesMeta(1, ((1, 0),), ((0, 0), (-1, 0), (0, 1), (0, -1), (1, 1)), 5, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record_acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
