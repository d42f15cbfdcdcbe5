"""Discrete-event simulation of the batch-service queue under a fixed policy.

The server is idle at every decision epoch: either a batch just finished
or a request arrived to an idle server. Requests are served FIFO and leave
at the end of their batch; the number in system counts the batch in service.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .exceptions import ConfigError, InstabilityError
from .policies import Policy
from .profile import ServiceProfile, Weights, Workload

WARMUP_FRACTION = 0.05
N_BLOCKS = 20
MAX_QUEUE = 1_000_000

# kernel exit codes
_DONE, _UNSTABLE = 0, 1


@dataclass
class SimReport:
    """Time averages over the measurement window ``[warmup, horizon]``.

    ``block_area`` and ``block_energy`` hold the integral of the number in
    system and the energy spent per equal-length time block; they give
    batch-means standard errors.
    """

    avg_queue_len: float
    avg_response_time: float
    avg_power: float
    energy_per_task: float
    throughput: float
    arrival_rate: float
    weighted_cost_rate: float
    batch_histogram: np.ndarray
    epoch_counts: np.ndarray
    n_arrivals: int
    n_served: int
    in_system_at_end: int
    horizon: float
    warmup: float
    seed: int
    lam: float
    block_area: np.ndarray = field(repr=False)
    block_energy: np.ndarray = field(repr=False)

    @property
    def window(self) -> float:
        return self.horizon - self.warmup

    def epoch_frequencies(self) -> np.ndarray:
        total = self.epoch_counts.sum()
        return self.epoch_counts / total if total else self.epoch_counts.astype(float)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("batch_histogram", "epoch_counts", "block_area", "block_energy"):
            out[key] = np.asarray(out[key]).tolist()
        return out


@njit(cache=True)
def _add_area(blocks, t0, t1, level, start, width):
    # integrate a constant level over [t0, t1] clipped to the block grid
    n = blocks.shape[0]
    end = start + n * width
    lo = max(t0, start)
    hi = min(t1, end)
    if hi <= lo or level == 0:
        return
    b = min(int((lo - start) / width), n - 1)
    while lo < hi and b < n:
        edge = min(hi, start + (b + 1) * width)
        blocks[b] += level * (edge - lo)
        lo = edge
        b += 1


@njit(cache=True)
def _run(arrivals, horizon, warm, actions, s_max, tau, zeta, n_blocks, max_queue):
    n_arr = arrivals.shape[0]
    width = (horizon - warm) / n_blocks
    area = np.zeros(n_blocks)
    energy = np.zeros(n_blocks)
    hist = np.zeros(tau.shape[0], dtype=np.int64)
    epochs = np.zeros(s_max + 2, dtype=np.int64)
    resp_sum = 0.0
    resp_n = 0
    served_window = 0
    served_total = 0
    energy_total_window = 0.0

    t = 0.0
    head = 0  # oldest request still in system
    nxt = 0   # next arrival not yet in system
    status = 0
    while True:
        q = nxt - head
        if q > max_queue:
            status = 1
            break
        if t >= warm:
            epochs[min(q, s_max + 1)] += 1
        a = actions[min(q, s_max + 1)]
        if a == 0:
            if nxt >= n_arr or arrivals[nxt] > horizon:
                _add_area(area, t, horizon, q, warm, width)
                t = horizon
                break
            _add_area(area, t, arrivals[nxt], q, warm, width)
            t = arrivals[nxt]
            nxt += 1
            continue
        end = t + tau[a]
        if t >= warm and t < horizon:
            b = min(int((t - warm) / width), n_blocks - 1)
            energy[b] += zeta[a]
            energy_total_window += zeta[a]
            hist[a] += 1
        # arrivals during service raise the level step by step
        level = q
        cur = t
        stop = min(end, horizon)
        while nxt < n_arr and arrivals[nxt] <= stop:
            _add_area(area, cur, arrivals[nxt], level, warm, width)
            cur = arrivals[nxt]
            level += 1
            nxt += 1
        _add_area(area, cur, stop, level, warm, width)
        if end > horizon:
            t = horizon
            break
        for k in range(head, head + a):
            if end >= warm:
                resp_sum += end - arrivals[k]
                resp_n += 1
        if end >= warm:
            served_window += a
        served_total += a
        head += a
        t = end
    n_total = 0
    while n_total < n_arr and arrivals[n_total] <= horizon:
        n_total += 1
    return (status, t, area, energy, hist, epochs, resp_sum, resp_n, served_window,
            served_total, n_total, nxt - head, energy_total_window)


def _arrival_times(lam: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    t = 0.0
    chunk = max(1024, int(lam * horizon * 1.02) + 64)
    while t <= horizon:
        times = t + np.cumsum(rng.exponential(1.0 / lam, size=chunk))
        chunks.append(times)
        t = times[-1]
        chunk = max(1024, chunk // 10)
    out = np.concatenate(chunks)
    # keep one arrival past the horizon so the kernel sees the end
    last = np.searchsorted(out, horizon, side="right")
    return out[: last + 1]


def simulate(
    profile: ServiceProfile,
    workload: Workload,
    policy: Policy,
    horizon: float,
    seed: int = 0,
    weights: Weights | None = None,
    warmup_fraction: float = WARMUP_FRACTION,
    n_blocks: int = N_BLOCKS,
    max_queue: int = MAX_QUEUE,
) -> SimReport:
    """Simulate ``horizon`` ms of operation under ``policy``.

    Parameters
    ----------
    horizon : float
        Simulated time in ms; the first ``warmup_fraction`` of it is discarded.
    seed : int
        Seed of the arrival stream; equal seeds give identical reports.
    weights : Weights, optional
        When given, ``weighted_cost_rate`` is filled in.

    Raises
    ------
    InstabilityError
        If the number in system exceeds ``max_queue``; the partial report is attached.
    """
    if not (np.isfinite(horizon) and horizon > 0):
        raise ConfigError(f"horizon must be finite and > 0, got {horizon!r}")
    if not 0 <= warmup_fraction < 1:
        raise ConfigError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction!r}")
    if n_blocks < 2:
        raise ConfigError("n_blocks must be >= 2")
    if policy.b_max > profile.b_max:
        raise ConfigError(f"policy b_max={policy.b_max} exceeds profile b_max={profile.b_max}")

    rng = np.random.default_rng(seed)
    lam = workload.lam
    arrivals = _arrival_times(lam, horizon, rng)
    a_range = np.arange(profile.b_max + 1)
    tau = profile.latency(a_range)
    zeta = profile.energy(a_range)
    warm = warmup_fraction * horizon
    (status, t_end, area, energy, hist, epochs, resp_sum, resp_n, served_window,
     served_total, n_total, in_system, energy_window) = _run(
        arrivals, float(horizon), warm, policy.actions, policy.s_max, tau, zeta, int(n_blocks), int(max_queue)
    )
    window = (t_end if status == _UNSTABLE else horizon) - warm
    window = max(window, np.finfo(float).tiny)
    arrived_window = int(np.count_nonzero((arrivals > warm) & (arrivals <= min(t_end, horizon))))
    avg_q = float(area.sum()) / window
    power = energy_window / window
    report = SimReport(
        avg_queue_len=avg_q,
        avg_response_time=resp_sum / resp_n if resp_n else math.nan,
        avg_power=power,
        energy_per_task=energy_window / int(hist @ a_range) if hist.any() else math.nan,
        throughput=served_window / window,
        arrival_rate=arrived_window / window,
        weighted_cost_rate=math.nan,
        batch_histogram=hist,
        epoch_counts=epochs,
        n_arrivals=int(n_total),
        n_served=int(served_total),
        in_system_at_end=int(in_system),
        horizon=float(horizon),
        warmup=float(warm),
        seed=int(seed),
        lam=float(lam),
        block_area=area,
        block_energy=energy,
    )
    if weights is not None:
        report.weighted_cost_rate = weighted_cost_of(report, weights, workload)
    if status == _UNSTABLE:
        raise InstabilityError(
            f"number in system exceeded {max_queue} at t={t_end:.6g} ms; the policy does not stabilise the queue",
            report=report,
        )
    return report


def weighted_cost_of(report: SimReport, weights: Weights, workload: Workload) -> float:
    """Objective rate ``(w1/lam) * mean number in system + w2 * mean power``."""
    return weights.w1 / workload.lam * report.avg_queue_len + weights.w2 * report.avg_power


def weighted_cost_interval(report: SimReport, weights: Weights, workload: Workload):
    """``(mean, stderr)`` of the objective rate from time-block batch means."""
    width = report.window / report.block_area.size
    per_block = (weights.w1 / workload.lam * report.block_area + weights.w2 * report.block_energy) / width
    mean = weighted_cost_of(report, weights, workload)
    stderr = float(per_block.std(ddof=1) / math.sqrt(per_block.size))
    return mean, stderr


def _replicate(args):
    profile, workload, policy, horizon, seed, weights = args
    return simulate(profile, workload, policy, horizon, seed, weights)


def replications(
    profile: ServiceProfile,
    workload: Workload,
    policy: Policy,
    horizon: float,
    seeds,
    weights: Weights | None = None,
    n_jobs: int = 1,
):
    """Independent runs with distinct seeds.

    Returns the reports and, when ``weights`` are given, ``(mean, stderr)``
    of the weighted cost across replications.
    """
    tasks = [(profile, workload, policy, horizon, int(s), weights) for s in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            reports = list(pool.map(_replicate, tasks))
    else:
        reports = [_replicate(t) for t in tasks]
    if weights is None or not reports:
        return reports, None
    costs = np.array([r.weighted_cost_rate for r in reports])
    stderr = float(costs.std(ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else math.nan
    return reports, (float(costs.mean()), stderr)
