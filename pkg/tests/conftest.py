"""Shared fixtures and the acceptance summary printed at the end of the run."""

from __future__ import annotations

import pytest

# criterion number -> list of (part label, passed, detail)
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, passed: bool, detail: str, part: str = "") -> None:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
    status = "PASS" if passed else "FAIL"
    label = f"{criterion}{part}"
    print(f"criterion {label}: {status} {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{label + ': ' if label else ''}{d}" for label, _, d in parts)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
