"""Collects one summary line per acceptance criterion for the terminal report."""

RESULTS: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    RESULTS[number] = line
    print(line)
    return line
