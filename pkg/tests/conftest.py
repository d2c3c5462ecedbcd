from pathlib import Path

# filled by test_acceptance.report(); one line per criterion
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
    Path(__file__).resolve().parent.parent.joinpath("acceptance_summary.txt").write_text(
        "\n".join(sorted(ACCEPTANCE_LINES)) + "\n")
