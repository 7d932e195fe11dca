"""Hierarchical scheduler mechanics shared by the fair-class policies.

The model mirrors the kernel's per-cgroup, per-core structure: every task
group owns one run queue per core, represented inside its parent's queue by
a group entity. The chain of entities from the top-level queue down to the
running task is marked "current" and removed from the ordered sets while it
runs; a context switch reinserts the part of the old chain that does not
lead to the next task and descends into the new one. The number of
reinsertions and descents is what the switch-cost model charges.

All times are integer microseconds except virtual runtime, which is a
weight-scaled float.
"""

from __future__ import annotations

from itertools import count
from typing import Iterator, Optional

from sortedcontainers import SortedKeyList

from .pelt import LoadCreditState, PeltState
from .policies import EEVDF, PolicyKind, ordering_key

DEFAULT_WEIGHT = 1024
SCHED_LATENCY_US = 6000
MIN_GRANULARITY_US = 750

_entity_ids = count()


class SchedulingError(RuntimeError):
    """Engine bookkeeping violated a run-queue invariant."""


def sched_period_us(nr_running: int) -> int:
    """Round-robin window over ``nr_running`` tasks, floored at 6ms."""
    return max(SCHED_LATENCY_US, nr_running * MIN_GRANULARITY_US)


class SchedEntity:
    """A task or a per-core group entity living in one run queue."""

    __slots__ = (
        "id", "name", "is_group", "is_rt", "weight",
        "vruntime", "lag", "vdeadline", "slice_us", "sum_exec",
        "load", "on_rq", "tg", "child_group", "core", "my_rq",
        "sort_key", "curr_start_exec", "slice_start_exec",
        # Task-side simulation state (unused for group entities).
        "remaining_us", "request", "fnrt", "wait_start", "rq_wait_us",
        "sleeping",
    )

    def __init__(self, tg: "TaskGroup", *, name: str = "", is_group: bool = False,
                 child_group: Optional["TaskGroup"] = None, core: int = -1,
                 weight: int = DEFAULT_WEIGHT, slice_us: int = 3000,
                 is_rt: bool = False) -> None:
        self.id = next(_entity_ids)
        self.name = name or f"se{self.id}"
        self.is_group = is_group
        self.is_rt = is_rt
        self.weight = weight
        self.vruntime = 0.0
        self.lag = 0.0
        self.vdeadline = 0.0
        self.slice_us = slice_us
        self.sum_exec = 0
        self.load = PeltState()
        self.on_rq = False
        self.tg = tg
        self.child_group = child_group
        self.core = core
        self.my_rq: Optional[CfsRq] = None
        self.sort_key: tuple = ()
        self.curr_start_exec = 0
        self.slice_start_exec = 0
        self.remaining_us = 0
        self.request = None
        self.fnrt = None
        self.wait_start = -1
        self.rq_wait_us = 0
        self.sleeping = True

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        kind = "gse" if self.is_group else "task"
        return f"<{kind} {self.name} vr={self.vruntime:.0f}>"


class GroupCore:
    """Per-core slice of a task group: its entity, queue and runnable count."""

    __slots__ = ("gse", "rq", "subtree_runnable")

    def __init__(self, gse: Optional[SchedEntity], rq: "CfsRq") -> None:
        self.gse = gse
        self.rq = rq
        self.subtree_runnable = 0


class TaskGroup:
    """A cgroup node: tree links, per-core queues and load aggregates."""

    __slots__ = ("id", "parent", "children", "latency_awareness", "depth",
                 "function_group", "per_core", "load_avg", "credit",
                 "pelt_active")

    def __init__(self, id: str, parent: Optional["TaskGroup"] = None, *,
                 latency_awareness: bool = False,
                 credit_window_ticks: int = 1000) -> None:
        if latency_awareness and parent is None:
            raise ValueError("the root group cannot be latency aware")
        self.id = id
        self.parent = parent
        self.children: list[TaskGroup] = []
        self.latency_awareness = latency_awareness
        self.depth = 0 if parent is None else parent.depth + 1
        self.function_group: Optional[TaskGroup] = None
        if latency_awareness:
            self.function_group = self
        elif parent is not None:
            self.function_group = parent.function_group
        self.per_core: list[GroupCore] = []
        self.load_avg = 0.0
        self.credit = LoadCreditState(window_ticks=credit_window_ticks)
        self.pelt_active = False
        if parent is not None:
            parent.children.append(self)

    def attach_cores(self, n_cores: int) -> None:
        for core in range(n_cores):
            gse = None
            if self.parent is not None:
                gse = SchedEntity(self.parent, name=f"{self.id}@{core}",
                                  is_group=True, child_group=self, core=core)
            self.per_core.append(GroupCore(gse, CfsRq(self, core)))

    def add_child(self, id: str, *, latency_awareness: bool = False,
                  credit_window_ticks: Optional[int] = None) -> "TaskGroup":
        window = self.credit.window_ticks if credit_window_ticks is None else credit_window_ticks
        child = TaskGroup(id, self, latency_awareness=latency_awareness,
                          credit_window_ticks=window)
        child.attach_cores(len(self.per_core))
        return child

    def walk(self) -> Iterator["TaskGroup"]:
        yield self
        for child in self.children:
            yield from child.walk()


class CfsRq:
    """One ordered run queue: entities sorted by (key, id) plus a current slot."""

    __slots__ = ("group", "core", "entities", "curr", "min_vruntime")

    def __init__(self, group: TaskGroup, core: int) -> None:
        self.group = group
        self.core = core
        self.entities: SortedKeyList = SortedKeyList(key=_sort_key_of)
        self.curr: Optional[SchedEntity] = None
        self.min_vruntime = 0.0

    @property
    def nr_running(self) -> int:
        return len(self.entities) + (1 if self.curr is not None else 0)

    def first(self) -> Optional[SchedEntity]:
        return self.entities[0] if self.entities else None

    def add(self, entity: SchedEntity, policy: PolicyKind) -> None:
        if entity.on_rq:
            raise SchedulingError(f"double enqueue of {entity.name}")
        entity.sort_key = ordering_key(entity, policy)
        entity.on_rq = True
        entity.my_rq = self
        self.entities.add(entity)

    def remove(self, entity: SchedEntity) -> None:
        if entity is self.curr:
            self.curr = None
        else:
            self.entities.remove(entity)
        entity.on_rq = False
        entity.my_rq = None

    def ordered(self) -> list[SchedEntity]:
        return list(self.entities)

    def advance_min_vruntime(self, policy: PolicyKind) -> None:
        """Monotonically track the served-vruntime floor of this queue."""
        floor = None
        if self.curr is not None:
            floor = self.curr.vruntime
        head = self.first()
        if head is not None and policy.kind != EEVDF:
            # Under vruntime-style keys the leftmost entity bounds the floor.
            floor = head.vruntime if floor is None else min(floor, head.vruntime)
        if floor is not None and floor > self.min_vruntime:
            self.min_vruntime = floor


def _sort_key_of(entity: SchedEntity) -> tuple:
    return entity.sort_key


def place_entity(rq: CfsRq, entity: SchedEntity, core_nr_running: int) -> None:
    """Sleeper normalization: an entity whose vruntime trails the queue floor
    by more than one base scheduling period re-enters half a period behind
    it, so returning sleepers run soon but cannot monopolize the queue.

    The clamp uses the 6ms period floor rather than the runnable-scaled
    period; scaling it would let sleepers leapfrog arbitrarily deep queues.
    """
    if entity.vruntime < rq.min_vruntime - SCHED_LATENCY_US:
        entity.vruntime = rq.min_vruntime - SCHED_LATENCY_US / 2.0


def enqueue_entity(rq: CfsRq, entity: SchedEntity, policy: PolicyKind,
                   core_nr_running: int = 1, fresh: bool = True) -> None:
    """Insert one entity into ``rq`` at its policy position.

    ``fresh`` distinguishes wakeups (sleeper normalization applies and an
    EEVDF entity starts a new slice) from put-backs of preempted entities,
    which keep their virtual state untouched.
    """
    if fresh:
        place_entity(rq, entity, core_nr_running)
        if policy.kind == EEVDF:
            entity.slice_start_exec = entity.sum_exec
            entity.vdeadline = entity.vruntime + entity.slice_us * (DEFAULT_WEIGHT / entity.weight)
    rq.add(entity, policy)


class CoreSched:
    """Per-core hierarchy operations: enqueue, pick, put and accounting."""

    __slots__ = ("core", "root", "policy", "current", "total_runnable")

    def __init__(self, core: int, root: TaskGroup, policy: PolicyKind) -> None:
        self.core = core
        self.root = root
        self.policy = policy
        self.current: Optional[SchedEntity] = None
        self.total_runnable = 0

    # -- enqueue / dequeue -------------------------------------------------

    def enqueue_task(self, task: SchedEntity) -> list[TaskGroup]:
        """Make ``task`` runnable on this core.

        Ancestor group entities are enqueued transitively. Returns the groups
        whose per-core queues went from empty to non-empty (the caller owns
        the load-tracking transition for those).
        """
        if task.on_rq:
            raise SchedulingError(f"double enqueue of task {task.name}")
        core = self.core
        task.core = core
        self.total_runnable += 1

        woken_groups: list[TaskGroup] = []
        group = task.tg
        while group is not None:
            pc = group.per_core[core]
            pc.subtree_runnable += 1
            if pc.subtree_runnable == 1:
                woken_groups.append(group)
            group = group.parent

        enqueue_entity(task.tg.per_core[core].rq, task, self.policy, self.total_runnable)

        group = task.tg
        while group.parent is not None:
            pc = group.per_core[core]
            if not pc.gse.on_rq:
                enqueue_entity(group.parent.per_core[core].rq, pc.gse,
                               self.policy, self.total_runnable)
            group = group.parent
        return woken_groups

    def dequeue_task(self, task: SchedEntity) -> list[TaskGroup]:
        """Remove ``task``; ancestors with empty subtrees are dequeued too.

        Returns the groups whose per-core queues went idle.
        """
        core = self.core
        if task.my_rq is None and task.tg.per_core[core].rq.curr is not task:
            raise SchedulingError(f"dequeue of task not on a queue: {task.name}")
        self.total_runnable -= 1
        task.tg.per_core[core].rq.remove(task)
        if self.current is task:
            self.current = None

        idled: list[TaskGroup] = []
        group = task.tg
        while group is not None:
            pc = group.per_core[core]
            pc.subtree_runnable -= 1
            if pc.subtree_runnable == 0:
                idled.append(group)
                if group.parent is not None and pc.gse.on_rq:
                    group.parent.per_core[core].rq.remove(pc.gse)
            group = group.parent
        return idled

    # -- runtime accounting --------------------------------------------------

    def update_curr(self, delta_exec: int) -> None:
        """Charge ``delta_exec`` of real time to the running chain."""
        task = self.current
        if task is None:
            raise SchedulingError("update_curr with no running task")
        if delta_exec <= 0:
            raise SchedulingError(f"update_curr with delta_exec={delta_exec}")
        eevdf = self.policy.kind == EEVDF
        core = self.core

        ent: Optional[SchedEntity] = task
        group = task.tg
        while ent is not None:
            ent.sum_exec += delta_exec
            ent.vruntime += delta_exec * (DEFAULT_WEIGHT / ent.weight)
            rq = group.per_core[core].rq
            if rq.curr is not ent:
                raise SchedulingError(f"update_curr: {ent.name} is not current")
            if eevdf:
                self._eevdf_account(rq, ent, delta_exec)
            rq.advance_min_vruntime(self.policy)
            if group.parent is None:
                break
            ent = group.per_core[core].gse
            group = group.parent

    def _eevdf_account(self, rq: CfsRq, running: SchedEntity, delta: int) -> None:
        """Lag bookkeeping: everyone on the queue earns their fair share of
        ``delta``, the running entity pays for what it received."""
        total_w = running.weight + sum(e.weight for e in rq.entities)
        running.lag += delta * (running.weight / total_w) - delta
        for ent in rq.entities:
            ent.lag += delta * (ent.weight / total_w)
        if running.sum_exec - running.slice_start_exec >= running.slice_us:
            running.slice_start_exec = running.sum_exec
            running.vdeadline = running.vruntime + running.slice_us * (DEFAULT_WEIGHT / running.weight)

    # -- pick / put ----------------------------------------------------------

    def current_chain(self) -> list[SchedEntity]:
        """Entities marked current, from the top level downward."""
        chain: list[SchedEntity] = []
        rq = self.root.per_core[self.core].rq
        while rq.curr is not None:
            ent = rq.curr
            chain.append(ent)
            if not ent.is_group:
                break
            rq = ent.child_group.per_core[self.core].rq
        return chain

    def peek_next(self) -> Optional[list[SchedEntity]]:
        """The chain the next pick would select, top-down, without mutating."""
        policy = self.policy
        core = self.core
        rq = self.root.per_core[core].rq
        chain: list[SchedEntity] = []
        while True:
            best = rq.first()
            curr = rq.curr
            if curr is not None and self._entity_runnable(curr):
                curr_key = ordering_key(curr, policy)
                if best is None or curr_key < best.sort_key:
                    best = curr
            if best is None:
                if chain:
                    raise SchedulingError(
                        f"group {rq.group.id} enqueued with an empty queue")
                return None
            chain.append(best)
            if not best.is_group:
                return chain
            rq = best.child_group.per_core[core].rq

    def _entity_runnable(self, ent: SchedEntity) -> bool:
        if ent.is_group:
            return ent.child_group.per_core[self.core].subtree_runnable > 0
        return True

    def dispatch(self, chain: list[SchedEntity]) -> tuple[int, int]:
        """Switch the current chain to ``chain``.

        Old entities below the shared prefix are reinserted (or dropped when
        no longer runnable); new ones are removed from their sets and marked
        current. Returns (reinsert_levels, descent_levels): reinsertions
        count the task and every group entity put back, descents count the
        group levels newly entered.
        """
        core = self.core
        policy = self.policy
        old = self.current_chain()

        shared = 0
        while shared < len(old) and shared < len(chain) and old[shared] is chain[shared]:
            shared += 1

        reinsert = 0
        for ent in reversed(old[shared:]):
            rq = self.rq_of(ent)
            rq.curr = None
            ent.on_rq = False
            ent.my_rq = None
            if self._entity_runnable(ent):
                enqueue_entity(rq, ent, policy, self.total_runnable, fresh=False)
                reinsert += 1

        descent = 0
        for ent in chain[shared:]:
            rq = self.rq_of(ent)
            if rq.curr is not ent:
                rq.entities.remove(ent)
                rq.curr = ent
            ent.curr_start_exec = ent.sum_exec
            if ent.is_group:
                descent += 1

        task = chain[-1]
        self.current = task
        return reinsert, descent

    def rq_of(self, ent: SchedEntity) -> CfsRq:
        owner = ent.child_group.parent if ent.is_group else ent.tg
        return owner.per_core[self.core].rq

    def put_prev(self, keep: tuple[SchedEntity, ...] = ()) -> int:
        """Reinsert the current chain, keeping entities on the ``keep`` path
        in place. With an empty ``keep`` the whole chain is put back."""
        keep_set = {id(e) for e in keep}
        old = self.current_chain()
        reinsert = 0
        for ent in reversed(old):
            if id(ent) in keep_set:
                continue
            rq = self.rq_of(ent)
            rq.curr = None
            ent.on_rq = False
            ent.my_rq = None
            if self._entity_runnable(ent):
                enqueue_entity(rq, ent, self.policy, self.total_runnable, fresh=False)
                reinsert += 1
        self.current = None
        return reinsert


def _is_curr(ent: SchedEntity) -> bool:
    owner = ent.child_group.parent if ent.is_group else ent.tg
    return owner.per_core[ent.core].rq.curr is ent


# -- spec-level operation wrappers -------------------------------------------

def update_curr(entity: SchedEntity, delta_exec: int, sched: CoreSched) -> None:
    """Charge execution time to ``entity``, which must be running on ``sched``."""
    if sched.current is not entity:
        raise SchedulingError(f"{entity.name} is not the running task")
    sched.update_curr(delta_exec)


def pick_next_task(sched: CoreSched) -> Optional[tuple[SchedEntity, int]]:
    """Select and dispatch the next task; returns (task, descent_levels)."""
    chain = sched.peek_next()
    if chain is None:
        return None
    _, descent = sched.dispatch(chain)
    return chain[-1], descent


def put_prev_task(sched: CoreSched, task: SchedEntity,
                  next_task: Optional[SchedEntity] = None) -> int:
    """Reinsert the preempted ``task`` and its still-runnable ancestors.

    When the next task is known, entities on the shared ancestor path stay
    in place, matching how switches between siblings touch only one level.
    """
    if sched.current is not task:
        raise SchedulingError(f"put_prev_task: {task.name} was not running")
    keep: tuple[SchedEntity, ...] = ()
    if next_task is not None:
        keep_list: list[SchedEntity] = []
        group = next_task.tg
        while group.parent is not None:
            gse = group.per_core[sched.core].gse
            if _is_curr(gse):
                keep_list.append(gse)
            group = group.parent
        keep = tuple(keep_list)
    return sched.put_prev(keep)


def build_root(n_cores: int, *, credit_window_ticks: int = 1000) -> TaskGroup:
    """A fresh root group with per-core top-level queues attached."""
    root = TaskGroup("root", credit_window_ticks=credit_window_ticks)
    root.attach_cores(n_cores)
    return root
