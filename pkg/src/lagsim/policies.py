"""Scheduling policies: ordering keys, wakeup preemption, and the RR class.

A policy decides three things: how entities are ordered inside a run queue,
whether a freshly woken task preempts the one currently running, and how
round-robin real-time tasks are served ahead of the fair classes.

Keys are (tier, value, id) tuples. CFS orders by virtual runtime. EEVDF
orders eligible entities (non-negative lag) by virtual deadline and pushes
ineligible ones behind them, closest-to-eligible first. Latency-aware group
scheduling keys flagged function-group entities by their group's Load
Credit; everything else keeps the CFS key, so flagged groups sort ahead of
unflagged siblings and the policy degenerates to CFS when nothing is
flagged.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:
    from .core import SchedEntity

CFS = "cfs"
EEVDF = "eevdf"
RR = "rr"
LAGS = "lags"

POLICY_KINDS = (CFS, EEVDF, RR, LAGS)

RT_WINDOW_US = 1_000_000


@dataclass(frozen=True)
class PolicyKind:
    """A policy selection plus its tunables."""

    kind: str = CFS
    rr_quantum_us: int = 100_000
    rr_bandwidth_cap: float = 0.95
    wakeup_granularity_us: int = 4000
    eevdf_base_slice_us: int = 3000

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind: {self.kind!r}")
        if not (0.0 < self.rr_bandwidth_cap <= 1.0):
            raise ValueError(f"rr_bandwidth_cap must be in (0, 1]: {self.rr_bandwidth_cap}")
        if self.rr_quantum_us <= 0:
            raise ValueError(f"rr_quantum_us must be positive: {self.rr_quantum_us}")


def ordering_key(entity: "SchedEntity", policy: PolicyKind) -> tuple:
    """Run-queue sort key for ``entity`` under ``policy`` (ties break on id)."""
    if policy.kind == EEVDF:
        if entity.lag >= 0.0:
            return (0, entity.vdeadline, entity.id)
        # Ineligible: behind every eligible entity, smallest deficit first.
        return (1, -entity.lag, entity.id)
    if policy.kind == LAGS:
        group = entity.child_group
        if group is not None and group.latency_awareness:
            return (0, group.credit.load_avg_ema, entity.id)
        return (1, entity.vruntime, entity.id)
    # CFS; RR entities never reach a fair run queue.
    return (0, entity.vruntime, entity.id)


def _common_level(curr: "SchedEntity", woken: "SchedEntity", core: int):
    """Walk both hierarchy chains and return the sibling entities at the
    deepest run queue the two tasks share."""
    curr_by_group = {}
    ent = curr
    group = curr.tg
    while group is not None:
        curr_by_group[id(group)] = ent
        ent = group.per_core[core].gse if group.parent is not None else None
        group = group.parent

    ent = woken
    group = woken.tg
    while group is not None:
        match = curr_by_group.get(id(group))
        if match is not None:
            return match, ent
        ent = group.per_core[core].gse
        group = group.parent
    raise RuntimeError("tasks do not share a hierarchy root")


def check_preempt_wakeup(curr: "SchedEntity", woken: "SchedEntity", policy: PolicyKind) -> bool:
    """Should ``woken`` preempt ``curr`` on the core that enqueued it?"""
    if woken.is_rt:
        return not curr.is_rt
    if curr.is_rt:
        return False

    if policy.kind == LAGS:
        curr_fn = curr.tg.function_group
        woken_fn = woken.tg.function_group
        if curr_fn is not None and woken_fn is not None:
            # Credit moves on a seconds-scale window; no microsecond margin.
            return woken_fn.credit.load_avg_ema < curr_fn.credit.load_avg_ema

    curr_ent, woken_ent = _common_level(curr, woken, woken.core)
    gran = policy.wakeup_granularity_us
    if policy.kind == EEVDF:
        return woken_ent.vdeadline < curr_ent.vdeadline - gran
    return woken_ent.vruntime < curr_ent.vruntime - gran


@dataclass
class RtCoreState:
    """Per-core round-robin class: FIFO queue plus bandwidth throttling.

    The class may consume at most ``cap`` of every one-second window; once
    exhausted, fair-class tasks run until the window rolls over.
    """

    policy: PolicyKind
    window_start: int = 0
    consumed: int = 0
    queue: deque = field(default_factory=deque)

    @property
    def cap_us(self) -> int:
        return int(self.policy.rr_bandwidth_cap * RT_WINDOW_US)

    def replenish(self, now: int) -> bool:
        """Roll the bandwidth window forward; True if fresh budget appeared."""
        if now - self.window_start >= RT_WINDOW_US:
            periods = (now - self.window_start) // RT_WINDOW_US
            self.window_start += periods * RT_WINDOW_US
            had_no_budget = self.consumed >= self.cap_us
            self.consumed = 0
            return had_no_budget and bool(self.queue)
        return False

    def throttled(self, now: int) -> bool:
        self.replenish(now)
        return self.consumed >= self.cap_us

    def budget_left(self, now: int) -> int:
        self.replenish(now)
        return max(0, self.cap_us - self.consumed)

    def next_replenish(self, now: int) -> int:
        self.replenish(now)
        return self.window_start + RT_WINDOW_US

    def charge(self, delta: int) -> None:
        self.consumed += delta

    def enqueue(self, task: "SchedEntity") -> None:
        task.on_rq = True
        self.queue.append(task)

    def requeue(self, task: "SchedEntity") -> None:
        """Quantum expiry sends the task to the tail, RR style."""
        task.on_rq = True
        self.queue.append(task)

    def schedule(self, now: int) -> Optional["SchedEntity"]:
        """Head of the RR queue, unless empty or the class is throttled."""
        if not self.queue or self.throttled(now):
            return None
        task = self.queue.popleft()
        task.on_rq = False
        return task
