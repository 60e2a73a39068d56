"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import sys

LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    LINES.append(line)
    print(line, file=sys.stderr)
    assert ok, line
