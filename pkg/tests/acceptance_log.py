"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: list = []


def report(name: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    LINES.append(line)
    print(line)
    return passed
