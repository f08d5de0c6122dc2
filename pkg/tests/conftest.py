def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
