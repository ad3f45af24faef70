import collections

import pytest
import torch

# criterion number -> list of (passed, detail); filled by tests/test_acceptance.py
_ACCEPTANCE = collections.OrderedDict()


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # bit-identical replays rely on a fixed reduction order
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def acceptance_results():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[number]
        ok = all(passed for passed, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
