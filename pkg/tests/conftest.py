import pytest
import torch


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: longer training runs")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config.acceptance_lines = {}
    torch.set_num_threads(1)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; the test still asserts."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
