"""Collects one verdict per acceptance criterion for the end-of-run summary."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), title, detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}: {detail}")
    assert ok, f"criterion {n} ({title}): {detail}"
