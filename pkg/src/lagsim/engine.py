"""The discrete-event loop: clocks, ticks, preemption, switch costs,
task-to-core placement and work-conserving load balancing.

Functions are modeled as keep-alive sandboxes: each one owns a small pool of
persistent worker tasks and an ingress queue. A request wakes a sleeping
worker (or waits its turn); a worker whose queue still holds work continues
into the next request without a context switch, which is exactly the case
where no scheduling cost arises. Every dispatch of a *different* task
charges the switch-cost model with the number of run-queue levels the switch
had to touch.

Time is integer microseconds throughout; a run is deterministic given
(config, workload, seed).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Optional

from .config import RunConfig
from .core import (CoreSched, SchedEntity, SchedulingError, TaskGroup,
                   build_root, sched_period_us, DEFAULT_WEIGHT)
from .metrics import RunMetrics
from .pelt import pelt_update, update_load_credit, update_tg_load_avg
from .policies import (CFS, EEVDF, LAGS, PolicyKind, RtCoreState,
                       check_preempt_wakeup)
from .workloads import Request, Workload

# Event kinds; the numeric value is the tie-break order at equal timestamps.
COMPLETION = 0
SLICE_EXPIRY = 1
TICK = 2
ARRIVAL = 3
WAKEUP = 4
BALANCE = 5

INF = math.inf

FAIR_KIND = {"cfs": CFS, "eevdf": EEVDF, "lags": LAGS, "lags-static": CFS, "rr": CFS}
DEFAULT_STATIC_RT_BANDS = (1, 2, 3)


@dataclass(frozen=True)
class SwitchCostModel:
    """Dispatch cost: a base charge plus one per run-queue level touched."""

    base_cost_us: int = 2
    per_level_cost_us: int = 3

    def cost(self, reinsert_levels: int, descent_levels: int) -> int:
        return self.base_cost_us + self.per_level_cost_us * (reinsert_levels + descent_levels)


class CoreState:
    """One simulated core: fair-class fabric, RR class and time accounting."""

    __slots__ = ("id", "sched", "rt", "current", "last_account", "switch_debt",
                 "dispatch_seq", "idle_since", "cached_current_credit",
                 "busy_us", "overhead_us", "fair_tasks")

    def __init__(self, core_id: int, sched: CoreSched, rt: RtCoreState) -> None:
        self.id = core_id
        self.sched = sched
        self.rt = rt
        self.current: Optional[SchedEntity] = None
        self.last_account = 0
        self.switch_debt = 0
        self.dispatch_seq = 0
        self.idle_since: Optional[int] = 0
        self.cached_current_credit = INF
        self.busy_us = 0
        self.overhead_us = 0
        self.fair_tasks: set[SchedEntity] = set()

    @property
    def nr_running(self) -> int:
        return self.sched.total_runnable + len(self.rt.queue) + (
            1 if self.current is not None and self.current.is_rt else 0)


class FunctionRuntime:
    """Engine-side state of one function sandbox: worker pool plus ingress."""

    __slots__ = ("spec", "leaf_group", "fn_group", "workers", "free", "ingress")

    def __init__(self, spec, leaf_group: TaskGroup) -> None:
        self.spec = spec
        self.leaf_group = leaf_group
        self.fn_group = leaf_group.function_group
        self.workers: list[SchedEntity] = []
        self.free: deque[SchedEntity] = deque()
        self.ingress: deque[Request] = deque()


class Simulator:
    """One simulation run over a built cgroup tree and a workload."""

    def __init__(self, cfg: RunConfig, workload: Workload) -> None:
        cfg.validate()
        self.cfg = cfg
        self.workload = workload
        self.policy = PolicyKind(
            kind=FAIR_KIND[cfg.policy],
            rr_quantum_us=cfg.rr_quantum_us,
            rr_bandwidth_cap=cfg.rr_bandwidth_cap,
            wakeup_granularity_us=cfg.wakeup_granularity_us,
            eevdf_base_slice_us=cfg.eevdf_base_slice_us,
        )
        self.cost_model = SwitchCostModel(cfg.switch_base_cost_us,
                                          cfg.switch_per_level_cost_us)
        self.track_credit = self.policy.kind == LAGS

        rt_bands: set[int] = set()
        if cfg.policy == "lags-static":
            rt_bands = set(cfg.rt_bands or DEFAULT_STATIC_RT_BANDS)
        rt_all = cfg.policy == "rr"

        self.root = build_root(cfg.cores, credit_window_ticks=cfg.load_credit_window_ticks)
        parent = self.root
        wl = cfg.workload
        for i in range(wl.shared_levels):
            parent = parent.add_child(f"slice-{i}")

        self.runtimes: list[FunctionRuntime] = []
        for spec in workload.specs:
            spec.rt = rt_all or (spec.demand_band in rt_bands)
            group = parent.add_child(spec.name, latency_awareness=spec.flagged)
            for lvl in range(1, wl.function_levels):
                group = group.add_child(f"{spec.name}.l{lvl}")
            self.runtimes.append(FunctionRuntime(spec, group))

        self.cores = [CoreState(i, CoreSched(i, self.root, self.policy),
                                RtCoreState(self.policy))
                      for i in range(cfg.cores)]

        self.now = 0
        self.tick_index = 0
        self._seq = 0
        self.heap: list = []
        self.rq_wait_total = 0
        self.switches = 0
        self.switch_cost_total = 0
        self.active_groups: dict[TaskGroup, set[int]] = {}
        self._latency_samples: list = []
        self.event_log: Optional[list] = None  # set to [] to record the schedule
        # Diagnostics: switch-level histogram and cause counters.
        self.switch_levels: dict[int, int] = {}
        self.counters = {"wakeups": 0, "preempt_checks": 0, "preempts": 0,
                         "continuations": 0, "migrations": 0, "idle_dispatch": 0}

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: int, kind: int, data) -> None:
        self._seq += 1
        heappush(self.heap, (time, kind, self._seq, data))

    # -- public entry ----------------------------------------------------------

    def run(self) -> RunMetrics:
        cfg = self.cfg
        for req in self.workload.arrivals:
            if req.arrival < cfg.horizon_us:
                self._push(req.arrival, ARRIVAL, req)
        self._push(cfg.tick_us, TICK, None)
        self._push(cfg.balance_interval_us, BALANCE, None)

        horizon = cfg.horizon_us
        heap = self.heap
        while heap:
            time, kind, _, data = heappop(heap)
            if time >= horizon:
                break
            self.now = time
            if kind == COMPLETION:
                self._handle_completion(data[0], data[1], time)
            elif kind == ARRIVAL:
                self._handle_arrival(data, time)
            elif kind == TICK:
                self._handle_tick(time)
            elif kind == SLICE_EXPIRY:
                self._handle_slice_expiry(data[0], data[1], time)
            elif kind == BALANCE:
                self._handle_balance(time)
            elif kind == WAKEUP:
                self._handle_wakeup(data, time)

        metrics = RunMetrics(horizon=horizon, cores=cfg.cores)
        for core in self.cores:
            self._account(core, horizon)
            # Tasks still waiting at the end accrued queue time up to the horizon.
            for task in core.fair_tasks:
                if task.wait_start >= 0 and task is not core.sched.current:
                    self.rq_wait_total += horizon - task.wait_start
            for task in core.rt.queue:
                if task.wait_start >= 0:
                    self.rq_wait_total += horizon - task.wait_start
            metrics.busy.append(core.busy_us)
            metrics.overhead.append(core.overhead_us)
            idle = horizon - core.busy_us - core.overhead_us
            if idle < 0:
                raise SchedulingError(f"core {core.id}: negative idle time {idle}")
            metrics.idle.append(idle)
        metrics.switches = self.switches
        metrics.switch_cost_total = self.switch_cost_total
        metrics.rq_wait_total = self.rq_wait_total
        metrics.latency_samples = self._latency_samples
        metrics.check_accounting()
        return metrics

    # -- accounting ------------------------------------------------------------

    def _account(self, core: CoreState, now: int) -> None:
        """Attribute [last_account, now) to overhead (pending switch debt)
        and task progress, in that order."""
        delta = now - core.last_account
        if delta <= 0:
            return
        core.last_account = now
        task = core.current
        if task is None:
            return
        if core.switch_debt:
            paid = delta if delta < core.switch_debt else core.switch_debt
            core.switch_debt -= paid
            core.overhead_us += paid
            delta -= paid
            if delta == 0:
                return
        core.busy_us += delta
        task.remaining_us -= delta
        if task.is_rt:
            task.sum_exec += delta
            core.rt.charge(delta)
        else:
            core.sched.update_curr(delta)

    # -- arrivals and wakeups ----------------------------------------------------

    def _handle_arrival(self, req: Request, now: int) -> None:
        fnrt = self.runtimes[req.fn_id]
        fnrt.ingress.append(req)
        self._try_assign(fnrt, now)

    def _try_assign(self, fnrt: FunctionRuntime, now: int) -> None:
        """Hand queued requests to free pool workers, in FIFO order. A request
        needing several parallel workers waits until that many are free."""
        while fnrt.ingress:
            req = fnrt.ingress[0]
            capacity = len(fnrt.free) + max(0, self.workload.pool_size(fnrt.spec.id)
                                            - len(fnrt.workers))
            if capacity < req.workers:
                return
            fnrt.ingress.popleft()
            for _ in range(req.workers):
                worker = self._take_worker(fnrt)
                self._wake_worker(worker, req, now)

    def _take_worker(self, fnrt: FunctionRuntime) -> SchedEntity:
        if fnrt.free:
            return fnrt.free.popleft()
        worker = SchedEntity(fnrt.leaf_group,
                             name=f"{fnrt.spec.name}/w{len(fnrt.workers)}",
                             is_rt=fnrt.spec.rt,
                             slice_us=self.policy.eevdf_base_slice_us)
        worker.fnrt = fnrt
        fnrt.workers.append(worker)
        return worker

    def _wake_worker(self, worker: SchedEntity, req: Request, now: int) -> None:
        worker.request = req
        worker.remaining_us = req.demand_us
        worker.sleeping = False
        core = self.select_task_rq(worker)
        worker.wait_start = now
        if worker.is_rt:
            worker.core = core.id
            core.rt.enqueue(worker)
            if core.current is None or not core.current.is_rt:
                self._reschedule(core, now)
            return
        self._fair_enqueue(core, worker, now)
        self.counters["wakeups"] += 1
        if core.current is None:
            self._reschedule(core, now)
        else:
            self.counters["preempt_checks"] += 1
            if check_preempt_wakeup(core.current, worker, self.policy):
                self.counters["preempts"] += 1
                self._reschedule(core, now)

    def _handle_wakeup(self, task: SchedEntity, now: int) -> None:
        # Programmatic wakeup of a prepared task (used by tests and tools).
        core = self.select_task_rq(task)
        task.wait_start = now
        task.sleeping = False
        if task.is_rt:
            task.core = core.id
            core.rt.enqueue(task)
            if core.current is None or not core.current.is_rt:
                self._reschedule(core, now)
            return
        self._fair_enqueue(core, task, now)
        if core.current is None or check_preempt_wakeup(core.current, task, self.policy):
            self._reschedule(core, now)

    def _fair_enqueue(self, core: CoreState, task: SchedEntity, now: int) -> None:
        woken = core.sched.enqueue_task(task)
        core.fair_tasks.add(task)
        for group in woken:
            if group.latency_awareness:
                self._pelt_touch(group, core.id, now, was_runnable=False)

    def _fair_dequeue(self, core: CoreState, task: SchedEntity, now: int) -> None:
        idled = core.sched.dequeue_task(task)
        core.fair_tasks.discard(task)
        for group in idled:
            if group.latency_awareness:
                self._pelt_touch(group, core.id, now, was_runnable=True)

    def _pelt_touch(self, group: TaskGroup, core_id: int, now: int,
                    was_runnable: bool) -> None:
        if not self.track_credit:
            return
        gse = group.per_core[core_id].gse
        pelt_update(gse.load, now, 1.0 if was_runnable else 0.0, DEFAULT_WEIGHT)
        self.active_groups.setdefault(group, set()).add(core_id)

    # -- placement ---------------------------------------------------------------

    def select_task_rq(self, task: SchedEntity) -> CoreState:
        """Pick the core a woken task should run on.

        Work conservation first: any idle core wins (lowest id). Under
        latency-aware scheduling a flagged task then goes to the first core
        whose cached running credit exceeds its own group's, i.e. a core
        doing less urgent work; everyone else falls back to least loaded.
        """
        cores = self.cores
        for core in cores:
            if core.current is None:
                return core
        if (self.policy.kind == LAGS and not task.is_rt
                and task.tg.function_group is not None):
            credit = task.tg.function_group.credit.load_avg_ema
            for core in cores:
                if core.cached_current_credit > credit:
                    return core
        best = cores[0]
        best_nr = best.nr_running
        for core in cores[1:]:
            nr = core.nr_running
            if nr < best_nr:
                best, best_nr = core, nr
        return best

    # -- dispatching ---------------------------------------------------------------

    def _reschedule(self, core: CoreState, now: int, *, rt_rotate: bool = False) -> None:
        self._account(core, now)
        prev = core.current
        rt = core.rt

        if prev is not None and prev.is_rt:
            if not rt_rotate and not rt.throttled(now):
                return  # RR current keeps the core until quantum expiry or throttle
            prev.on_rq = True
            if rt_rotate:
                rt.queue.append(prev)
            else:
                rt.queue.appendleft(prev)

        nxt: Optional[SchedEntity] = None
        chain = None
        if rt.queue and not rt.throttled(now):
            nxt = rt.queue.popleft()
            nxt.on_rq = False
        else:
            chain = core.sched.peek_next()
            if chain is not None:
                nxt = chain[-1]

        if nxt is prev and nxt is not None:
            core.current = nxt
            if nxt.is_rt:
                self._arm_rt_slice(core, now)
            elif chain is not None:
                # Re-affirmed pick: grant a fresh share of the period.
                for ent in chain:
                    ent.curr_start_exec = ent.sum_exec
            return

        # A real switch (possibly to or from idle).
        core.dispatch_seq += 1
        if nxt is None:
            core.sched.put_prev()
            core.current = None
            core.idle_since = now
            core.cached_current_credit = INF
            self._balance_idle(core, now)
            return

        if nxt.is_rt:
            reinsert = core.sched.put_prev() if core.sched.current_chain() else 0
            descent = 0
        else:
            reinsert, descent = core.sched.dispatch(chain)

        cost = self.cost_model.cost(reinsert, descent)
        self.switches += 1
        self.switch_cost_total += cost
        core.switch_debt += cost
        levels = reinsert + descent
        self.switch_levels[levels] = self.switch_levels.get(levels, 0) + 1
        if prev is None:
            self.counters["idle_dispatch"] += 1
        if self.event_log is not None:
            self.event_log.append((now, core.id, nxt.name))

        if nxt.wait_start >= 0:
            self.rq_wait_total += now - nxt.wait_start
            nxt.wait_start = -1
        if prev is not None and prev is not nxt and prev.on_rq:
            prev.wait_start = now

        core.current = nxt
        core.idle_since = None
        if nxt.is_rt or nxt.tg.function_group is None:
            core.cached_current_credit = INF
        else:
            core.cached_current_credit = nxt.tg.function_group.credit.load_avg_ema
        self._arm_completion(core, now)
        if nxt.is_rt:
            self._arm_rt_slice(core, now)

    def _arm_completion(self, core: CoreState, now: int) -> None:
        end = now + core.switch_debt + core.current.remaining_us
        if end < self.cfg.horizon_us:
            self._push(end, COMPLETION, (core.id, core.dispatch_seq))

    def _arm_rt_slice(self, core: CoreState, now: int) -> None:
        allowance = min(self.policy.rr_quantum_us, core.rt.budget_left(now))
        end = now + core.switch_debt + allowance
        if end < self.cfg.horizon_us:
            self._push(end, SLICE_EXPIRY, (core.id, core.dispatch_seq))

    # -- completions -----------------------------------------------------------------

    def _handle_completion(self, core_id: int, seq: int, now: int) -> None:
        core = self.cores[core_id]
        if seq != core.dispatch_seq:
            return  # stale: the dispatch this event belonged to was preempted
        self._account(core, now)
        worker = core.current
        if worker is None or worker.request is None:
            raise SchedulingError(f"completion fired on core {core_id} with no request")
        if worker.remaining_us != 0:
            raise SchedulingError(
                f"completion fired with {worker.remaining_us}us left on {worker.name}")
        req = worker.request
        worker.request = None
        req.done_workers += 1
        fnrt: FunctionRuntime = worker.fnrt

        if req.done_workers == req.workers:
            req.completion = now
            self._latency_samples.append((req.fn_id, now - req.arrival))
            for follow_up in self.workload.on_complete(req, now):
                self._push(now, ARRIVAL, follow_up)

        # Keep-alive continuation: the worker takes the next single-worker
        # request immediately, with no scheduler involvement.
        if fnrt.ingress and fnrt.ingress[0].workers == 1:
            nxt = fnrt.ingress.popleft()
            worker.request = nxt
            worker.remaining_us = nxt.demand_us
            self.counters["continuations"] += 1
            self._arm_completion(core, now)
            return

        worker.sleeping = True
        if not worker.is_rt:
            self._fair_dequeue(core, worker, now)
        core.current = None
        fnrt.free.append(worker)
        if fnrt.ingress:
            self._try_assign(fnrt, now)
        self._reschedule(core, now)

    # -- ticks ---------------------------------------------------------------------

    def _handle_tick(self, now: int) -> None:
        self.tick_index += 1
        for core in self.cores:
            self.tick(core, now)
        if self.track_credit:
            self._credit_pass(now)
        nxt = now + self.cfg.tick_us
        if nxt < self.cfg.horizon_us:
            self._push(nxt, TICK, None)

    def tick(self, core: CoreState, now: int) -> bool:
        """Per-core tick: account, then preempt an exhausted current task.

        Returns True when the tick led to a reschedule.
        """
        task = core.current
        rt = core.rt
        if task is None:
            if rt.queue and not rt.throttled(now):
                self._reschedule(core, now)
                return True
            return False
        self._account(core, now)
        if task.is_rt:
            if rt.throttled(now):
                self._reschedule(core, now)
                return True
            return False
        if rt.queue and not rt.throttled(now):
            self._reschedule(core, now)  # RR preempts fair as soon as budget returns
            return True
        if self._share_exhausted(core):
            self._reschedule(core, now)
            return True
        return False

    def _share_exhausted(self, core: CoreState) -> bool:
        chain = core.sched.current_chain()
        if not chain:
            return False
        period = sched_period_us(core.sched.total_runnable)
        eevdf = self.policy.kind == EEVDF
        for ent in chain:
            rq = core.sched.rq_of(ent)
            local = rq.nr_running
            if local < 2:
                continue
            if eevdf and not ent.is_group:
                if ent.sum_exec - ent.slice_start_exec >= ent.slice_us:
                    return True
                continue
            if ent.sum_exec - ent.curr_start_exec >= period // local:
                return True
        return False

    def _credit_pass(self, now: int) -> None:
        dead: list[TaskGroup] = []
        for group, hot in self.active_groups.items():
            for core_id in sorted(hot):
                pc = group.per_core[core_id]
                runnable = pc.subtree_runnable > 0
                pelt_update(pc.gse.load, now, 1.0 if runnable else 0.0, DEFAULT_WEIGHT)
                if not runnable and pc.gse.load.load_avg < 1e-4:
                    pc.gse.load.load_avg = 0.0
                    hot.discard(core_id)
            update_tg_load_avg(group)
            update_load_credit(group, self.tick_index)
            if not hot and group.load_avg == 0.0 and group.credit.load_avg_ema < 1e-9:
                dead.append(group)
        for group in dead:
            del self.active_groups[group]

    # -- RR slice expiry --------------------------------------------------------------

    def _handle_slice_expiry(self, core_id: int, seq: int, now: int) -> None:
        core = self.cores[core_id]
        if seq != core.dispatch_seq:
            return
        task = core.current
        if task is None or not task.is_rt:
            return
        self._reschedule(core, now, rt_rotate=not core.rt.throttled(now))

    # -- load balancing ------------------------------------------------------------------

    def _handle_balance(self, now: int) -> None:
        self.load_balance(now)
        nxt = now + self.cfg.balance_interval_us
        if nxt < self.cfg.horizon_us:
            self._push(nxt, BALANCE, None)

    def load_balance(self, now: int) -> int:
        """Idle cores pull one waiting task each from the busiest core.

        Under latency-aware scheduling the pulled task is the one whose
        function group holds the lowest Load Credit on the source core; the
        fair baseline pulls the lowest-vruntime waiter. No migration happens
        while the imbalance is below the threshold. Returns migrations done.
        """
        moved = 0
        while True:
            progressed = False
            for core in self.cores:
                if core.current is not None or core.sched.total_runnable > 0:
                    continue
                if core.rt.queue and not core.rt.throttled(now):
                    self._reschedule(core, now)
                    progressed = True
                    continue
                if self._pull_into(core, now):
                    moved += 1
                    progressed = True
            if not progressed:
                return moved

    def _balance_idle(self, core: CoreState, now: int) -> None:
        # A core that just went idle tries an immediate pull.
        self._pull_into(core, now)

    def _pull_into(self, dst: CoreState, now: int) -> bool:
        src = None
        src_nr = 0
        for core in self.cores:
            if core is dst:
                continue
            nr = core.sched.total_runnable
            if nr > src_nr:
                src, src_nr = core, nr
        if src is None or src_nr - dst.sched.total_runnable < self.cfg.imbalance_threshold:
            return False
        task = self._pick_migration(src)
        if task is None:
            return False
        self._fair_dequeue(src, task, now)
        task.core = dst.id
        self._fair_enqueue(dst, task, now)
        self.counters["migrations"] += 1
        self._reschedule(dst, now)
        return True

    def _pick_migration(self, src: CoreState) -> Optional[SchedEntity]:
        running = src.sched.current
        best = None
        best_key = None
        lags = self.policy.kind == LAGS
        for task in src.fair_tasks:
            if task is running:
                continue
            if lags and task.tg.function_group is not None:
                key = (0, task.tg.function_group.credit.load_avg_ema,
                       task.vruntime, task.id)
            else:
                key = (1, task.vruntime, 0.0, task.id)
            if best_key is None or key < best_key:
                best, best_key = task, key
        return best

def simulate(cfg: RunConfig, workload: Workload) -> RunMetrics:
    """Build and run one simulation; the main programmatic entry point."""
    return Simulator(cfg, workload).run()
