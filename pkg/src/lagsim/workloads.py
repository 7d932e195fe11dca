"""Function populations, arrival processes and service demand models.

Functions are drawn equally from ten demand bands whose mean request rates
follow a heavy-tailed profile: most functions see tens to low hundreds of
requests per second, the top band carries the bulk of the load. Per-band
rates are scaled so that the aggregate CPU demand of a density-9 population
saturates the simulated machine, which anchors where throughput peaks.

Arrival kinds:

* ``steady``   - closed loop; each function keeps a fixed number of
                 outstanding requests, re-issuing on completion, with the
                 concurrency self-tuned during warmup to a latency target.
* ``azure``    - open loop; per-function Poisson arrivals whose rate is
                 modulated per segment (doubly stochastic) to mimic bursty
                 production traces.
* ``random``   - open loop; per-function Poisson with rates drawn uniformly
                 from [0, 5] requests per second.
* ``trace``    - verbatim replay of an ingested CSV.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from typing import Optional

N_BANDS = 10

# Relative mean-rate weights for bands 1..10. The last band is the heavy
# tail; bands 1-9 rise gently (Fig. 2-style skew at desk scale).
DEFAULT_BAND_WEIGHTS = (2.0, 3.0, 4.0, 6.0, 9.0, 13.0, 18.0, 25.0, 35.0, 60.0)


class WorkloadError(ValueError):
    pass


# -- service models -----------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    demand_us: int

    def sample(self, rng: random.Random) -> tuple[int, int]:
        return 1, self.demand_us


@dataclass(frozen=True)
class Mix:
    points: tuple[tuple[float, int], ...]  # (probability, demand_us)

    def __post_init__(self):
        total = sum(p for p, _ in self.points)
        if abs(total - 1.0) > 1e-9:
            raise WorkloadError(f"mix probabilities sum to {total}, not 1")

    def sample(self, rng: random.Random) -> tuple[int, int]:
        x = rng.random()
        acc = 0.0
        for prob, demand in self.points:
            acc += prob
            if x < acc:
                return 1, demand
        return 1, self.points[-1][1]


@dataclass(frozen=True)
class Parallel:
    workers: int
    per_worker_us: int

    def __post_init__(self):
        if self.workers < 1:
            raise WorkloadError(f"parallel workers must be >= 1: {self.workers}")

    def sample(self, rng: random.Random) -> tuple[int, int]:
        return self.workers, self.per_worker_us


ServiceModel = Fixed | Mix | Parallel


def service_demand(model: ServiceModel, rng: random.Random) -> tuple[int, int]:
    """Sample one request's (workers, per-worker demand in us)."""
    return model.sample(rng)


# -- population ---------------------------------------------------------------

@dataclass
class FunctionSpec:
    id: int
    demand_band: int
    rate_rps: float
    service: ServiceModel
    flagged: bool = True
    concurrency: int = 2
    rt: bool = False  # serviced by the round-robin class (static preset)

    @property
    def name(self) -> str:
        return f"func-{self.id}"


@dataclass
class Request:
    fn_id: int
    arrival: int
    demand_us: int
    workers: int
    id: int
    done_workers: int = 0
    completion: Optional[int] = None


def synth_population(n_functions: int, band_profile, seed: int, *,
                     service: ServiceModel = Fixed(100_000),
                     aggregate_rps: Optional[float] = None,
                     concurrency: int = 2,
                     flagged: bool = True) -> list[FunctionSpec]:
    """Draw ``n_functions`` equally from the ten demand bands.

    ``band_profile`` is a sequence of ten relative weights (or absolute mean
    rps when ``aggregate_rps`` is None). With ``aggregate_rps`` given, the
    profile is scaled so the population's total mean rate matches it.
    """
    if n_functions < 1:
        raise WorkloadError("need at least one function")
    profile = list(band_profile)
    if len(profile) != N_BANDS:
        raise WorkloadError(f"band profile needs {N_BANDS} entries, got {len(profile)}")
    if any(w <= 0 for w in profile):
        raise WorkloadError("band profile entries must be positive")
    if sorted(profile) != profile:
        raise WorkloadError("band means must be non-decreasing from band 1 to 10")

    bands = [(i * N_BANDS) // n_functions + 1 for i in range(n_functions)]
    if aggregate_rps is not None:
        weight_total = sum(profile[b - 1] for b in bands)
        scale = aggregate_rps / weight_total
    else:
        scale = 1.0

    rng = random.Random(seed)
    specs = []
    for i, band in enumerate(bands):
        # Mild within-band spread keeps the sorted-rate curve smooth.
        jitter = math.exp(rng.gauss(0.0, 0.25) - 0.03125)
        specs.append(FunctionSpec(
            id=i, demand_band=band, rate_rps=profile[band - 1] * scale * jitter,
            service=service, flagged=flagged, concurrency=concurrency,
        ))
    return specs


def load_band_profile(path: str) -> list[float]:
    """Read a ``band,mean_rps`` CSV with one row per band."""
    means: dict[int, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["band", "mean_rps"]:
            raise WorkloadError(f"bad band profile header: {reader.fieldnames}")
        for row in reader:
            means[int(row["band"])] = float(row["mean_rps"])
    if sorted(means) != list(range(1, N_BANDS + 1)):
        raise WorkloadError(f"band profile must cover bands 1..{N_BANDS}")
    return [means[b] for b in range(1, N_BANDS + 1)]


# -- arrival generation -------------------------------------------------------

def _poisson_times(rng: random.Random, rate_rps: float, start: int, end: int) -> list[int]:
    if rate_rps <= 0.0:
        return []
    out = []
    t = float(start)
    mean_gap = 1e6 / rate_rps
    while True:
        t += rng.expovariate(1.0) * mean_gap
        if t >= end:
            return out
        out.append(int(t))


def gen_open_arrivals(specs: list[FunctionSpec], horizon_us: int, seed: int, *,
                      bursty: bool = True, segment_us: int = 5_000_000,
                      burst_sigma: float = 1.2) -> list[Request]:
    """Open-loop request stream, time ordered, independent of the simulator.

    With ``bursty`` each function's rate is modulated per segment by a
    lognormal multiplier with unit mean, so load arrives in clumps the way
    trace-driven workloads do; otherwise plain Poisson.
    """
    if horizon_us <= 0:
        raise WorkloadError("horizon must be positive")
    rng = random.Random(seed)
    arrivals: list[tuple[int, int, int, int]] = []  # (time, fn, workers, demand)
    mu = -0.5 * burst_sigma * burst_sigma
    for spec in specs:
        frng = random.Random(rng.randrange(2 ** 62))
        t = 0
        while t < horizon_us:
            seg_end = min(t + segment_us, horizon_us)
            rate = spec.rate_rps
            if bursty:
                rate *= math.exp(frng.gauss(mu, burst_sigma))
            for at in _poisson_times(frng, rate, t, seg_end):
                workers, demand = spec.service.sample(frng)
                arrivals.append((at, spec.id, workers, demand))
            t = seg_end
    arrivals.sort()
    return [Request(fn_id=fn, arrival=at, demand_us=demand, workers=workers, id=i)
            for i, (at, fn, workers, demand) in enumerate(arrivals)]


def gen_random_arrivals(specs: list[FunctionSpec], horizon_us: int, seed: int) -> list[Request]:
    """Worst-case pattern: every function Poisson with rate ~ U(0, 5) rps."""
    rng = random.Random(seed)
    arrivals = []
    for spec in specs:
        frng = random.Random(rng.randrange(2 ** 62))
        rate = frng.uniform(0.0, 5.0)
        for at in _poisson_times(frng, rate, 0, horizon_us):
            workers, demand = spec.service.sample(frng)
            arrivals.append((at, spec.id, workers, demand))
    arrivals.sort()
    return [Request(fn_id=fn, arrival=at, demand_us=demand, workers=workers, id=i)
            for i, (at, fn, workers, demand) in enumerate(arrivals)]


def read_trace_csv(path: str) -> list[tuple[int, int]]:
    """Ingest ``function_id,timestamp_us`` rows; timestamps must not regress
    within a function."""
    rows: list[tuple[int, int]] = []
    last_seen: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["function_id", "timestamp_us"]:
            raise WorkloadError(f"bad trace header: {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            fn = int(row["function_id"])
            ts = int(row["timestamp_us"])
            if fn in last_seen and ts < last_seen[fn]:
                raise WorkloadError(
                    f"line {lineno}: timestamp {ts} regresses for function {fn}")
            last_seen[fn] = ts
            rows.append((fn, ts))
    return rows


def gen_trace_replay(specs: list[FunctionSpec], path: str, seed: int) -> list[Request]:
    rng = random.Random(seed)
    rows = read_trace_csv(path)
    by_id = {s.id: s for s in specs}
    arrivals = []
    for i, (fn, ts) in enumerate(sorted(rows, key=lambda r: (r[1], r[0]))):
        if fn not in by_id:
            raise WorkloadError(f"trace names unknown function {fn}")
        workers, demand = by_id[fn].service.sample(rng)
        arrivals.append(Request(fn_id=fn, arrival=ts, demand_us=demand,
                                workers=workers, id=i))
    return arrivals


# -- workload containers ------------------------------------------------------

class Workload:
    """Open-loop workload: a pre-generated, simulator-independent stream."""

    closed_loop = False

    def __init__(self, specs: list[FunctionSpec], arrivals: list[Request]):
        self.specs = specs
        self.arrivals = arrivals

    def on_complete(self, req: Request, now: int) -> list[Request]:
        return []

    def pool_size(self, fn_id: int) -> int:
        return self.specs[fn_id].concurrency


class SteadyWorkload(Workload):
    """Closed loop with warmup self-tuning toward a latency target.

    Each function starts with one outstanding request; while warming up the
    concurrency level steps up while latency stays under the target and back
    down when it overshoots, then freezes.
    """

    closed_loop = True

    def __init__(self, specs: list[FunctionSpec], *, latency_target_us: int = 100_000,
                 warmup_us: int = 5_000_000, max_concurrency: int = 8):
        arrivals = [Request(fn_id=s.id, arrival=0, demand_us=self._demand(s),
                            workers=self._workers(s), id=i)
                    for i, s in enumerate(specs)]
        super().__init__(specs, arrivals)
        self.latency_target_us = latency_target_us
        self.warmup_us = warmup_us
        self.max_concurrency = max_concurrency
        self._next_id = len(arrivals)
        self._concurrency = {s.id: 1 for s in specs}
        self._lat_ewma: dict[int, float] = {}
        self._rng = random.Random(0xC0FFEE)

    @staticmethod
    def _workers(spec: FunctionSpec) -> int:
        return spec.service.workers if isinstance(spec.service, Parallel) else 1

    def _demand(self, spec: FunctionSpec) -> int:
        if isinstance(spec.service, Fixed):
            return spec.service.demand_us
        if isinstance(spec.service, Parallel):
            return spec.service.per_worker_us
        return spec.service.sample(random.Random(spec.id))[1]

    def _issue(self, spec: FunctionSpec, now: int) -> Request:
        workers, demand = spec.service.sample(self._rng)
        req = Request(fn_id=spec.id, arrival=now, demand_us=demand,
                      workers=workers, id=self._next_id)
        self._next_id += 1
        return req

    def pool_size(self, fn_id: int) -> int:
        return max(self._concurrency[fn_id],
                   self._workers(self.specs[fn_id]))

    def on_complete(self, req: Request, now: int) -> list[Request]:
        spec = self.specs[req.fn_id]
        latency = now - req.arrival
        ewma = self._lat_ewma.get(req.fn_id, float(latency))
        ewma += 0.3 * (latency - ewma)
        self._lat_ewma[req.fn_id] = ewma

        out = [self._issue(spec, now)]
        if now < self.warmup_us:
            k = self._concurrency[req.fn_id]
            if ewma < 0.8 * self.latency_target_us and k < self.max_concurrency:
                self._concurrency[req.fn_id] = k + 1
                out.append(self._issue(spec, now))
            elif ewma > 1.5 * self.latency_target_us and k > 1:
                self._concurrency[req.fn_id] = k - 1
                out.pop()
        return out


# -- config-driven construction -------------------------------------------------

def _service_from_config(wl) -> ServiceModel:
    if wl.service == "mix":
        return Mix(tuple(wl.mix))
    if wl.service == "parallel":
        return Parallel(wl.parallel_workers, wl.demand_us)
    return Fixed(wl.demand_us)


def build_workload(cfg) -> Workload:
    """Materialize the workload a RunConfig describes.

    Open-loop rate profiles are anchored so that a density-9 population's
    aggregate demand equals ``aggregate_util`` of the machine's capacity;
    populations at other densities keep the same per-band rates, scaling the
    offered load proportionally.
    """
    wl = cfg.workload
    n = cfg.n_functions
    service = _service_from_config(wl)
    profile = (load_band_profile(wl.band_profile_path)
               if wl.band_profile_path else DEFAULT_BAND_WEIGHTS)

    if wl.kind == "steady":
        specs = synth_population(n, profile, cfg.seed, service=service,
                                 concurrency=wl.concurrency, flagged=wl.flagged)
        return SteadyWorkload(specs, latency_target_us=wl.latency_target_us,
                              warmup_us=wl.warmup_us)

    mean_demand = _mean_demand_us(service)
    capacity_rps = cfg.cores * 1e6 / mean_demand
    aggregate = (n / (9.0 * cfg.cores)) * capacity_rps * wl.aggregate_util
    anchor = None if wl.band_profile_path else aggregate
    specs = synth_population(n, profile, cfg.seed, service=service,
                             aggregate_rps=anchor,
                             concurrency=wl.concurrency, flagged=wl.flagged)

    if wl.kind == "azure":
        arrivals = gen_open_arrivals(specs, cfg.horizon_us, cfg.seed,
                                     bursty=True, segment_us=wl.segment_us,
                                     burst_sigma=wl.burst_sigma)
    elif wl.kind == "random":
        arrivals = gen_random_arrivals(specs, cfg.horizon_us, cfg.seed)
    elif wl.kind == "trace":
        arrivals = gen_trace_replay(specs, wl.trace_path, cfg.seed)
    else:  # pragma: no cover - config validation rejects this earlier
        raise WorkloadError(f"unhandled workload kind {wl.kind!r}")
    return Workload(specs, arrivals)


def _mean_demand_us(service: ServiceModel) -> float:
    if isinstance(service, Fixed):
        return float(service.demand_us)
    if isinstance(service, Parallel):
        return float(service.per_worker_us * service.workers)
    return sum(p * us for p, us in service.points)
