"""Shared record of acceptance outcomes, printed at the end of the session."""

RESULTS = {}


def record(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    return line
