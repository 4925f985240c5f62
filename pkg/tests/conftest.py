VERDICTS = []


def record_verdict(line):
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("-", "acceptance verdicts")
    for line in sorted(VERDICTS):
        terminalreporter.write_line(line)
