import pytest

CRITERIA = {
    1: "pixel shuffle / deconvolution equivalence",
    2: "gradient suite",
    3: "pooled coverage",
    4: "voxelization oracle",
    5: "multi-resolution ground truth",
    6: "upsampler ordering",
    7: "scale trend",
    8: "attention memory divergence",
    9: "freeze contract",
    10: "determinism",
}

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one acceptance line and asserts ``ok``."""
    store = request.config.stash[_VERDICTS]

    def record(n: int, ok: bool, detail: str) -> None:
        if n in store:                 # parametrized criteria: all parts must pass
            prev_ok, prev = store[n]
            store[n] = (prev_ok and bool(ok), f"{prev}; {detail}")
        else:
            store[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({CRITERIA[n]}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[_VERDICTS]
    if not store:
        return
    terminalreporter.section("acceptance")
    for n, name in CRITERIA.items():
        if n in store:
            ok, detail = store[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {n:2d} {name}: not run or errored before a verdict")
