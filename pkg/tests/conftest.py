import torch
from hypothesis import settings

# one core shared with long training runs: wall-clock deadlines are meaningless
settings.register_profile("snnbd", deadline=None, derandomize=True)
settings.load_profile("snnbd")
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
