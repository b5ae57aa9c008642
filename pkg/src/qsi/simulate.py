"""Monte Carlo photon-count generation.

Scans draw independent Poisson counts per pixel and channel. Every
(seed, pixel, channel) triple owns a counter-based Philox stream, so the
result does not depend on how pixels are scheduled. Only the g2 histogram is
simulated at the level of individual photon arrival times.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .model import (
    Detector,
    ModelError,
    ScanGrid,
    Scene,
    accidental_rate,
    emitter_rates,
    expected_coincidences_m,
    expected_singles,
    nominal_eta,
)

CH_D1 = 0
CH_D2 = 1


@dataclass(frozen=True)
class ScanData:
    grid: ScanGrid
    singles_d1: np.ndarray
    singles_d2: np.ndarray
    coincidences: Mapping[int, np.ndarray]
    detector: Detector
    pump_angle_deg: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        shape = self.grid.shape
        for name, arr in self._arrays():
            if arr.shape != shape:
                raise ModelError(f"{name} grid has shape {arr.shape}, expected {shape}")
            if np.any(arr < 0):
                raise ModelError(f"{name} grid has negative counts")
            arr.setflags(write=False)

    def _arrays(self):
        yield "singles_d1", self.singles_d1
        yield "singles_d2", self.singles_d2
        for m, arr in self.coincidences.items():
            yield f"coincidences m={m}", arr

    @property
    def orders(self) -> list[int]:
        return sorted(self.coincidences)


@dataclass(frozen=True)
class G2Histogram:
    bin_width_ns: float
    tau_ns: np.ndarray
    counts: np.ndarray
    total_starts: int

    @property
    def bins(self) -> list[tuple[float, int]]:
        return list(zip(self.tau_ns.tolist(), self.counts.tolist()))


@dataclass(frozen=True)
class PolarizationSweep:
    x_nm: float
    y_nm: float
    angles_deg: np.ndarray
    dwell_s: float
    singles_d1: np.ndarray
    singles_d2: np.ndarray
    coincidences: np.ndarray
    detector: Detector = field(default_factory=Detector)


def _philox_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)


def stream(seed: int, index: int, channel: int, key=None) -> np.random.Generator:
    """Counter-based generator for one (pixel or sweep index, channel)."""
    key = _philox_key(seed) if key is None else key
    counter = np.array([0, 0, channel, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _draw_block(key, channel, means, start, stop, out):
    for i in range(start, stop):
        out[i] = stream(0, i, channel, key).poisson(means[i])


def _poisson_grid(seed, channel, means, workers):
    flat = np.ascontiguousarray(means, dtype=float).ravel()
    out = np.zeros(flat.size, dtype=np.int64)
    key = _philox_key(seed)
    if workers <= 1 or flat.size < 2 * workers:
        _draw_block(key, channel, flat, 0, flat.size, out)
    else:
        edges = np.linspace(0, flat.size, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            jobs = [pool.submit(_draw_block, key, channel, flat, a, b, out)
                    for a, b in zip(edges[:-1], edges[1:])]
            for j in jobs:
                j.result()
    return out.reshape(np.shape(means))


def expected_counts(s: Scene, g: ScanGrid, orders: Sequence[int]) -> dict:
    """Mean counts per pixel for every channel, keyed 'd1', 'd2' and order m."""
    for m in orders:
        if not 2 <= m <= s.n:
            raise ModelError(f"coincidence order {m} outside 2..{s.n}")
    d = s.detector
    X, Y = g.coords()
    singles = np.asarray(expected_singles(s, X, Y), dtype=float)
    out = {"d1": d.t * singles * g.dwell_s, "d2": d.r * singles * g.dwell_s}
    for m in orders:
        lam = np.asarray(expected_coincidences_m(s, m, nominal_eta(d, m, s.eta), X, Y), dtype=float)
        if m == 2:
            lam = lam + accidental_rate(d, singles - d.bg_cps)
        out[m] = lam * g.dwell_s
    return out


def expected_scan(s: Scene, g: ScanGrid, orders: Sequence[int]) -> ScanData:
    """Noise-free ScanData holding mean counts instead of samples."""
    mu = expected_counts(s, g, orders)
    return ScanData(g, mu["d1"], mu["d2"], {m: mu[m] for m in orders},
                    s.detector, s.pump_angle_deg, None)


def simulate_scan(s: Scene, g: ScanGrid, orders: Sequence[int], seed: int,
                  workers: int = 1) -> ScanData:
    mu = expected_counts(s, g, orders)
    d1 = _poisson_grid(seed, CH_D1, mu["d1"], workers)
    d2 = _poisson_grid(seed, CH_D2, mu["d2"], workers)
    coinc = {m: _poisson_grid(seed, m, mu[m], workers) for m in orders}
    return ScanData(g, d1, d2, coinc, s.detector, s.pump_angle_deg, int(seed))


def dwell_for_budget(s: Scene, g: ScanGrid, budget: float, order: int = 2) -> float:
    """Dwell time giving ``budget`` expected coincidences of ``order`` over the grid."""
    per_second = expected_counts(s, g, [order])[order].sum() / g.dwell_s
    if not per_second > 0:
        raise ModelError("scene produces no coincidences; cannot set dwell from a budget")
    return float(budget / per_second)


def _arrivals(rng, rate, duration_s, tau_a_s=None):
    n = rng.poisson(rate * duration_s)
    t = np.sort(rng.uniform(0.0, duration_s, n))
    if tau_a_s is None:
        return t
    keep = kernels.antibunched_accept(t, rng.uniform(size=n), tau_a_s)
    return t[keep.astype(bool)]


def simulate_g2(s: Scene, x_nm: float, y_nm: float, duration_s: float,
                bin_width_ns: float, seed: int, range_ns: float | None = None) -> G2Histogram:
    """Start-stop delay histogram with the spot parked at (x, y).

    Each emitter is a renewal process whose hazard recovers as
    ``1 - exp(-t/tau_a)`` after every photon. Background photons are Poisson.
    The stop channel is delayed by half the range so negative delays show.
    """
    if not duration_s > 0:
        raise ModelError("duration_s must be > 0")
    d = s.detector
    rates = np.atleast_1d(emitter_rates(s, x_nm, y_nm))
    if not rates.sum() + d.bg_cps > 0:
        raise ModelError(f"zero total rate at ({x_nm}, {y_nm})")
    tau_a = d.tau_a_ns * 1e-9
    range_ns = 20.0 * d.tau_a_ns if range_ns is None else float(range_ns)
    nbins = int(round(range_ns / bin_width_ns))
    if nbins < 1:
        raise ModelError("histogram range shorter than one bin")
    seq = np.random.SeedSequence(int(seed))
    rngs = [np.random.default_rng(c) for c in seq.spawn(len(rates) + 1)]

    trains = []
    for rng, r in zip(rngs, rates):
        if r <= 0:
            continue
        if r * tau_a >= 0.5:
            raise ModelError(f"rate {r:g} cps too high for recovery time {d.tau_a_ns} ns")
        # candidate rate compensating the mean recovery delay tau_a per photon
        trains.append((rng, _arrivals(rng, r / (1.0 - r * tau_a), duration_s, tau_a)))
    if d.bg_cps > 0:
        trains.append((rngs[-1], _arrivals(rngs[-1], d.bg_cps, duration_s)))

    d1, d2 = [], []
    for rng, t in trains:
        to_d1 = rng.uniform(size=t.size) < d.t
        d1.append(t[to_d1])
        d2.append(t[~to_d1])
    d1 = np.sort(np.concatenate(d1)) if d1 else np.zeros(0)
    d2 = np.sort(np.concatenate(d2)) if d2 else np.zeros(0)

    bw = bin_width_ns * 1e-9
    delay = 0.5 * nbins * bw
    counts, accepted = kernels.start_stop_histogram(d1, d2, delay, bw, nbins)
    tau_ns = (np.arange(nbins) + 0.5) * bin_width_ns - delay * 1e9
    return G2Histogram(float(bin_width_ns), tau_ns, np.asarray(counts), int(accepted))


def simulate_polarization_sweep(s: Scene, x_nm: float, y_nm: float, angles_deg: Sequence[float],
                                dwell_s: float, seed: int) -> PolarizationSweep:
    angles = np.asarray(angles_deg, dtype=float)
    if angles.size == 0:
        raise ModelError("empty angle list")
    if s.n < 2:
        raise ModelError("coincidence order 2 needs at least two emitters")
    key = _philox_key(seed)
    n = angles.size
    d1 = np.zeros(n, dtype=np.int64)
    d2 = np.zeros(n, dtype=np.int64)
    c2 = np.zeros(n, dtype=np.int64)
    point = ScanGrid(x_nm, y_nm, 1.0, 1, 1, dwell_s)
    for i, phi in enumerate(angles):
        mu = expected_counts(s.with_angle(phi), point, [2])
        d1[i] = stream(0, i, CH_D1, key).poisson(mu["d1"][0, 0])
        d2[i] = stream(0, i, CH_D2, key).poisson(mu["d2"][0, 0])
        c2[i] = stream(0, i, 2, key).poisson(mu[2][0, 0])
    return PolarizationSweep(float(x_nm), float(y_nm), angles, float(dwell_s), d1, d2, c2, s.detector)
