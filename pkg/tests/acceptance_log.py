"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: dict[int, str] = {}


def check(number: int, title: str, ok: bool, detail: str) -> None:
    """Record the outcome of criterion ``number`` and fail the test if ``ok`` is false."""
    LINES[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} -- {detail}"
    print(LINES[number])
    assert ok, LINES[number]
