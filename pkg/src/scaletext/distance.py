"""Unit-cost Levenshtein distance, case-insensitive."""

from __future__ import annotations


def edit_distance(a: str, b: str) -> int:
    """Minimum number of single-character insertions, deletions and
    substitutions turning `a` into `b`; comparison is case-insensitive."""
    a = a.lower()
    b = b.lower()
    if a == b:
        return 0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[len(b)]
