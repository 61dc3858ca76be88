"""Shared fixtures and reporting hooks for the test suite.

Acceptance tests record a one-line verdict per criterion through
`record_acceptance`; the terminal-summary hook replays those lines at
the end of the run so they are visible even when pytest captures stdout.
"""

import numpy as np
import pytest

from diffcf import dataset

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_matrix(user_items: list[list[int]], num_items: int | None = None,
                tags: list[list[int]] | None = None) -> dataset.InteractionMatrix:
    """Build an InteractionMatrix from per-user item lists (sorted for you)."""
    order = [np.argsort(items, kind="stable") for items in user_items]
    indptr = np.zeros(len(user_items) + 1, dtype=np.uint64)
    np.cumsum([len(r) for r in user_items], out=indptr[1:])
    indices = np.concatenate(
        [np.asarray(items, dtype=np.uint32)[o] for items, o in zip(user_items, order)]
        or [np.empty(0, dtype=np.uint32)])
    if tags is None:
        tag_arr = np.zeros(indices.size, dtype=np.uint8)
    else:
        tag_arr = np.concatenate(
            [np.asarray(t, dtype=np.uint8)[o] for t, o in zip(tags, order)])
    if num_items is None:
        num_items = int(indices.max()) + 1 if indices.size else 1
    return dataset.InteractionMatrix(len(user_items), num_items, indptr,
                                     indices, tag_arr)


@pytest.fixture
def ratings_file(tmp_path):
    """Factory writing an interactions file and returning its path."""

    def write(lines: list[str], name: str = "ratings.txt"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write
