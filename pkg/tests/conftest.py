import helpers


def pytest_terminal_summary(terminalreporter):
  if helpers.ACCEPTANCE:
    terminalreporter.section('acceptance criteria')
    for line in helpers.ACCEPTANCE:
      terminalreporter.write_line(line)
