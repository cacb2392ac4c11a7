import time
from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterator

from tabulate import tabulate


class PhaseTimer:
    """Accumulates wall time and call counts per named phase of one command."""

    def __init__(self) -> None:
        self.timings: Dict[str, float] = defaultdict(float)
        self.counts: Dict[str, int] = defaultdict(int)

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] += time.perf_counter() - t0
            self.counts[name] += 1

    def summary(self) -> str:
        rows = []
        for key, total in self.timings.items():
            count = self.counts.get(key, 0)
            avg = total / count if count else 0.0
            rows.append([key, f"{total:.3f}", count, f"{avg:.4f}"])
        return tabulate(
            rows, headers=["Phase", "Total [s]", "Count", "Avg [s]"], tablefmt="grid"
        )
