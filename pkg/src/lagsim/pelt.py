"""Per-entity load tracking and the Load Credit moving average.

Load is tracked the way the kernel's PELT does it: runnable time is
accumulated in 1024us periods and decayed geometrically so that 32 idle
periods halve the average. On top of that, each task group keeps a much
slower exponential moving average of its aggregate load (the "Load
Credit"), updated once per scheduler tick over a configurable window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PELT_PERIOD_US = 1024
PELT_HALF_LIFE_PERIODS = 32
# y ** 32 == 1/2
PELT_DECAY = 0.5 ** (1.0 / PELT_HALF_LIFE_PERIODS)

DEFAULT_CREDIT_WINDOW_TICKS = 1000


@dataclass
class PeltState:
    """Decayed runnable-time average for one scheduling entity.

    ``load_avg`` stays in [0, weight]; a fully runnable entity converges
    toward its weight, a blocked one decays with a 32-period half life.
    """

    load_avg: float = 0.0
    last_update: int = 0
    period_contrib: int = 0
    period_runnable: float = 0.0


def pelt_update(state: PeltState, now: int, runnable_fraction: float, weight: float) -> PeltState:
    """Advance ``state`` to ``now`` assuming a constant runnable fraction.

    The elapsed time is folded into 1024us periods: each full period applies
    one decay step and accrues ``runnable_fraction * weight`` scaled by the
    per-period gain, partial periods carry over. Rejects time going backwards.
    """
    if now < state.last_update:
        raise ValueError(f"time went backwards: {now} < {state.last_update}")
    delta = now - state.last_update
    state.last_update = now
    if delta == 0:
        return state

    # Close out the partially filled period first.
    room = PELT_PERIOD_US - state.period_contrib
    if delta < room:
        state.period_contrib += delta
        state.period_runnable += runnable_fraction * delta
        return state

    state.period_runnable += runnable_fraction * room
    frac = state.period_runnable / PELT_PERIOD_US
    state.load_avg = state.load_avg * PELT_DECAY + frac * weight * (1.0 - PELT_DECAY)
    delta -= room

    # Whole periods at constant fraction have a geometric closed form.
    periods, rem = divmod(delta, PELT_PERIOD_US)
    if periods:
        decay_n = PELT_DECAY ** periods
        state.load_avg = state.load_avg * decay_n + runnable_fraction * weight * (1.0 - decay_n)

    state.period_contrib = rem
    state.period_runnable = runnable_fraction * rem
    return state


@dataclass
class LoadCreditState:
    """EMA of a group's aggregate load over a window of scheduler ticks.

    ``window_ticks == 0`` means an infinite window: the credit becomes the
    running mean of the observed load, which orders groups by total
    attained service (the least-attained-service limit).
    """

    load_avg_ema: float = 0.0
    window_ticks: int = DEFAULT_CREDIT_WINDOW_TICKS
    last_tick: int = -1
    samples: int = field(default=0, repr=False)

    def update(self, load_avg: float, tick: int) -> float:
        if self.window_ticks == 0:
            self.samples += 1
            self.load_avg_ema += (load_avg - self.load_avg_ema) / self.samples
        else:
            alpha = 2.0 / (self.window_ticks + 1)
            self.load_avg_ema += alpha * (load_avg - self.load_avg_ema)
        self.last_tick = tick
        return self.load_avg_ema


def update_tg_load_avg(group) -> float:
    """Refresh ``group.load_avg`` as the sum of its per-core entity loads."""
    total = 0.0
    for pc in group.per_core:
        if pc.gse is not None:
            total += pc.gse.load.load_avg
    group.load_avg = total
    return total


def update_load_credit(group, tick: int) -> float:
    """Fold the group's current aggregate load into its Load Credit EMA."""
    return group.credit.update(group.load_avg, tick)
