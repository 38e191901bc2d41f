"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES = {}


def record(criterion: int, ok, detail: str) -> str:
    status = {True: "PASS", False: "FAIL"}.get(ok, ok)
    line = f"criterion {criterion}: {status} | {detail}"
    LINES[criterion] = line
    print(line)
    return line
