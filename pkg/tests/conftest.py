import torch

from helpers import ACCEPTANCE

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {k}: {detail}")
