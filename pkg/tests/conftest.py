"""Collects acceptance outcomes and prints one summary line per criterion."""
_results: dict[int, list] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n = mark.args[0]
    notes = [v for k, v in item.user_properties if k == "evidence"]
    _results.setdefault(n, []).append((item.name, call.excinfo is None, notes))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        ok = all(passed for _, passed, _ in runs)
        notes = "; ".join(x for _, _, ns in runs for x in ns)
        failed = [name for name, passed, _ in runs if not passed]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if notes:
            line += f" ({notes})"
        if failed:
            line += f" failing: {', '.join(failed)}"
        tr.write_line(line)
