"""Per-run metric accumulators and cross-run comparison tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

SUMMARY_COLUMNS = [
    "policy", "density", "cores", "median_us", "p95_us", "p99_us",
    "throughput_rps", "overhead_pct", "mean_switch_cost_us", "switch_rate_hz",
    "rq_wait_s", "util_effective_pct", "util_perceived_pct", "seed",
]

CDF_COLUMNS = ["policy", "density", "latency_us", "cum_prob"]


@dataclass
class RunMetrics:
    """Raw accumulators for one simulation run."""

    horizon: int
    cores: int
    latency_samples: list = field(default_factory=list)  # (fn_id, latency_us)
    switches: int = 0
    switch_cost_total: int = 0
    busy: list = field(default_factory=list)      # us per core
    idle: list = field(default_factory=list)
    overhead: list = field(default_factory=list)
    rq_wait_total: int = 0
    completions_within_target: int = 0

    def check_accounting(self) -> None:
        """busy + idle + overhead must tile each core's timeline exactly."""
        for c in range(self.cores):
            total = self.busy[c] + self.idle[c] + self.overhead[c]
            if total != self.horizon:
                raise AssertionError(
                    f"core {c}: busy+idle+overhead = {total} != horizon {self.horizon}")


@dataclass
class Summary:
    policy: str
    density: float
    cores: int
    seed: int
    completions: int
    median_us: float
    p95_us: float
    p99_us: float
    throughput_rps: float
    overhead_pct: float
    mean_switch_cost_us: float
    switch_rate_hz: float
    rq_wait_s: float
    util_effective_pct: float
    util_perceived_pct: float
    zero_throughput: bool
    no_switches: bool
    cdf: list  # (latency_us, cum_prob)

    def row(self) -> dict:
        return {
            "policy": self.policy,
            "density": f"{self.density:g}",
            "cores": self.cores,
            "median_us": f"{self.median_us:.0f}",
            "p95_us": f"{self.p95_us:.0f}",
            "p99_us": f"{self.p99_us:.0f}",
            "throughput_rps": f"{self.throughput_rps:.3f}",
            "overhead_pct": f"{self.overhead_pct:.4f}",
            "mean_switch_cost_us": f"{self.mean_switch_cost_us:.3f}",
            "switch_rate_hz": f"{self.switch_rate_hz:.1f}",
            "rq_wait_s": f"{self.rq_wait_s:.3f}",
            "util_effective_pct": f"{self.util_effective_pct:.2f}",
            "util_perceived_pct": f"{self.util_perceived_pct:.2f}",
            "seed": self.seed,
        }


def percentile(sorted_values: list, q: float) -> float:
    """Nearest-rank percentile of pre-sorted values (0 when empty)."""
    if not sorted_values:
        return 0.0
    n = len(sorted_values)
    idx = max(0, min(n - 1, int(q * n + 0.999999) - 1))
    return float(sorted_values[idx])


def summarize(metrics: RunMetrics, *, latency_target_us: int = 1_000_000,
              policy: str = "cfs", density: float = 0.0, seed: int = 0,
              cdf_points: int = 256) -> Summary:
    """Reduce raw accumulators to the per-run summary record.

    A run with zero completions is a legitimate (overloaded) outcome and is
    flagged rather than rejected; so is a run that never context switched.
    """
    lat = sorted(us for _, us in metrics.latency_samples)
    n = len(lat)
    horizon_s = metrics.horizon / 1e6
    within = sum(1 for us in lat if us <= latency_target_us)
    metrics.completions_within_target = within

    capacity_us = metrics.horizon * metrics.cores
    busy = sum(metrics.busy)
    overhead = sum(metrics.overhead)

    cdf: list[tuple[float, float]] = []
    if n:
        step = max(1, n // cdf_points)
        for i in range(step - 1, n, step):
            cdf.append((float(lat[i]), (i + 1) / n))
        if cdf[-1][1] != 1.0:
            cdf.append((float(lat[-1]), 1.0))

    return Summary(
        policy=policy,
        density=density,
        cores=metrics.cores,
        seed=seed,
        completions=n,
        median_us=percentile(lat, 0.50),
        p95_us=percentile(lat, 0.95),
        p99_us=percentile(lat, 0.99),
        throughput_rps=within / horizon_s,
        overhead_pct=overhead / capacity_us,
        mean_switch_cost_us=(metrics.switch_cost_total / metrics.switches
                             if metrics.switches else 0.0),
        switch_rate_hz=metrics.switches / horizon_s,
        rq_wait_s=metrics.rq_wait_total / 1e6,
        util_effective_pct=100.0 * busy / capacity_us,
        util_perceived_pct=100.0 * (busy + overhead) / capacity_us,
        zero_throughput=(within == 0),
        no_switches=(metrics.switches == 0),
        cdf=cdf,
    )


def write_summary_csv(path: str, summaries: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for s in summaries:
            writer.writerow(s.row())


def write_cdf_csv(path: str, summaries: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CDF_COLUMNS)
        for s in summaries:
            for latency_us, prob in s.cdf:
                writer.writerow([s.policy, f"{s.density:g}", f"{latency_us:.0f}",
                                 f"{prob:.6f}"])


@dataclass
class ComparisonRow:
    policy: str
    density: float
    summary: Summary
    degradation_pct: float  # throughput drop vs this policy's peak density


class ComparisonError(ValueError):
    pass


def compare(summaries: list) -> list[ComparisonRow]:
    """Align runs into a per-policy, per-density table with derived deltas.

    Every policy must have been run on the same density axis; the
    degradation column is each run's throughput shortfall against the peak
    throughput its own policy achieved anywhere on the axis.
    """
    if len(summaries) < 2:
        raise ComparisonError("compare needs at least two runs")
    by_policy: dict[str, dict[float, Summary]] = {}
    for s in summaries:
        by_policy.setdefault(s.policy, {})[s.density] = s
    axes = {p: tuple(sorted(d)) for p, d in by_policy.items()}
    unique_axes = set(axes.values())
    if len(unique_axes) != 1:
        raise ComparisonError(f"mismatched sweep axes across policies: {axes}")

    rows = []
    for policy, runs in by_policy.items():
        peak = max(s.throughput_rps for s in runs.values())
        for density in sorted(runs):
            s = runs[density]
            deg = 0.0 if peak <= 0 else 100.0 * (peak - s.throughput_rps) / peak
            rows.append(ComparisonRow(policy, density, s, deg))
    rows.sort(key=lambda r: (r.density, r.policy))
    return rows


def render_comparison(rows: list) -> str:
    header = (f"{'density':>8} {'policy':>12} {'thr_rps':>10} {'degr%':>7} "
              f"{'median_ms':>10} {'p95_ms':>10} {'p99_ms':>10} "
              f"{'ovh%':>6} {'sw_cost_us':>10} {'rq_wait_s':>10}")
    lines = [header, "-" * len(header)]
    for r in rows:
        s = r.summary
        lines.append(
            f"{r.density:>8g} {r.policy:>12} {s.throughput_rps:>10.1f} "
            f"{r.degradation_pct:>7.1f} {s.median_us / 1000:>10.2f} "
            f"{s.p95_us / 1000:>10.2f} {s.p99_us / 1000:>10.2f} "
            f"{100 * s.overhead_pct:>6.2f} {s.mean_switch_cost_us:>10.2f} "
            f"{s.rq_wait_s:>10.2f}")
    return "\n".join(lines)


def write_comparison_csv(path: str, rows: list) -> None:
    cols = SUMMARY_COLUMNS + ["degradation_pct"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            row = r.summary.row()
            row["degradation_pct"] = f"{r.degradation_pct:.2f}"
            writer.writerow(row)
