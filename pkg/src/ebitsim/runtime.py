"""Workload model and per-replication metrics.

Applications are closed-loop: each keeps exactly one end-to-end request
outstanding, consumes a delivered ebit immediately and reissues (after an
optional hold time). Delivered-ebit metrics are stamped at the destination's
correction-completion instant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy import stats

from ebitsim.core import ENTANGLEMENT_THRESHOLD


@dataclass(frozen=True)
class Application:
    """One source/destination port pair driving repeated ebit requests."""

    app_id: int
    src_port: int
    dst_port: int
    hold_time_s: float = 0.0


def make_applications(n: int, hold_time_s: float = 0.0) -> list[Application]:
    return [Application(i, i, i, hold_time_s) for i in range(n)]


@dataclass
class RunMetrics:
    """Everything one replication reports."""

    duration_s: float
    attempts: int = 0
    successes: int = 0
    failures_stale: int = 0
    failures_bsm: int = 0
    failures_le: int = 0          # slotted baseline only
    abandoned: int = 0
    retries: int = 0

    fidelity_sum: float = 0.0
    fidelity_min: float = math.inf
    low_fidelity_count: int = 0   # deliveries below the entanglement threshold

    waits_count: int = 0
    wait_total_s: float = 0.0
    wait_max_s: float = 0.0

    pairs_generated: int = 0
    pairs_stored: int = 0         # summed over both endpoint sides
    pairs_overwritten: int = 0
    pairs_dropped: int = 0
    # (link_id, side) -> (generated, stored, overwritten, dropped)
    link_counters: dict[tuple[int, str], tuple[int, int, int, int]] = field(default_factory=dict)

    unroutable_messages: int = 0  # late replies for unknown attempts (bug surface)
    lanes: int = 0                # slotted baseline only
    slots: int = 0

    def record_delivery(self, fidelity: float) -> None:
        self.successes += 1
        self.fidelity_sum += fidelity
        self.fidelity_min = min(self.fidelity_min, fidelity)
        if fidelity < ENTANGLEMENT_THRESHOLD:
            self.low_fidelity_count += 1

    def record_failure(self, cause: str) -> None:
        if cause == "stale-cell":
            self.failures_stale += 1
        elif cause == "bsm":
            self.failures_bsm += 1
        elif cause == "le":
            self.failures_le += 1
        else:
            raise ValueError(f"unknown failure cause {cause!r}")

    def record_wait(self, seconds: float) -> None:
        self.waits_count += 1
        self.wait_total_s += seconds
        self.wait_max_s = max(self.wait_max_s, seconds)

    @property
    def failures(self) -> int:
        return self.failures_stale + self.failures_bsm + self.failures_le

    @property
    def throughput(self) -> float:
        return self.successes / self.duration_s

    @property
    def mean_fidelity(self) -> float | None:
        return self.fidelity_sum / self.successes if self.successes else None

    @property
    def mean_wait_s(self) -> float:
        return self.wait_total_s / self.waits_count if self.waits_count else 0.0

    def check_conservation(self) -> None:
        assert self.successes + self.failures + self.abandoned == self.attempts, (
            f"attempt ledger broken: {self.successes} + {self.failures} + "
            f"{self.abandoned} != {self.attempts}"
        )


def aggregate(values: list[float], confidence: float = 0.95) -> tuple[float, float]:
    """Sample mean and Student-t confidence half-width (n - 1 dof)."""
    n = len(values)
    if n == 0:
        raise ValueError("nothing to aggregate")
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    if var == 0.0:
        return mean, 0.0
    quantile = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1))
    return mean, quantile * math.sqrt(var / n)
