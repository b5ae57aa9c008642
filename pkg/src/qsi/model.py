"""Domain types and closed-form expectation values.

Rates are detected counts per second, lengths are nanometres and angles are
degrees at the public surface. Everything here is a pure function of frozen
inputs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class ModelError(ValueError):
    """Raised when a domain object or an operation argument is invalid."""


@dataclass(frozen=True)
class Emitter:
    x_nm: float
    y_nm: float
    alpha_cps: float
    beta_cps: float = 0.0

    def __post_init__(self):
        if not self.alpha_cps >= 0:
            raise ModelError(f"alpha_cps must be >= 0, got {self.alpha_cps}")
        if min(self.alpha_cps, self.alpha_cps + self.beta_cps) < 0:
            raise ModelError("emitter rate would be negative at some pump angle "
                             f"(alpha={self.alpha_cps}, beta={self.beta_cps})")


@dataclass(frozen=True)
class Psf:
    sigma_nm: float = 150.0

    def __post_init__(self):
        if not self.sigma_nm > 0:
            raise ModelError(f"sigma_nm must be > 0, got {self.sigma_nm}")


@dataclass(frozen=True)
class Detector:
    """Hanbury-Brown-Twiss detection chain.

    ``t`` goes to detector D1 and ``r`` to D2. ``tw_ns`` is the coincidence
    window, ``capture_frac`` the fraction of true pair events that land in it.
    """

    r: float = 0.54
    t: float = 0.46
    tw_ns: float = 2.0
    k_bunch: float = 0.0
    tau_a_ns: float = 10.0
    capture_frac: float = 1.0
    bg_cps: float = 0.0

    def __post_init__(self):
        if not (0 < self.r < 1 and 0 < self.t < 1):
            raise ModelError(f"r and t must lie in (0, 1), got r={self.r}, t={self.t}")
        if abs(self.r + self.t - 1.0) > 1e-12:
            raise ModelError(f"r + t must equal 1, got {self.r + self.t!r}")
        if not self.tw_ns > 0:
            raise ModelError("tw_ns must be > 0")
        if not self.tau_a_ns > 0:
            raise ModelError("tau_a_ns must be > 0")
        if not 0 < self.capture_frac <= 1:
            raise ModelError("capture_frac must lie in (0, 1]")
        if not self.k_bunch >= 0:
            raise ModelError("k_bunch must be >= 0")
        if not self.bg_cps >= 0:
            raise ModelError("bg_cps must be >= 0")

    @property
    def tw_s(self) -> float:
        return self.tw_ns * 1e-9


@dataclass(frozen=True)
class ScanGrid:
    x0_nm: float
    y0_nm: float
    pitch_nm: float
    nx: int
    ny: int
    dwell_s: float

    def __post_init__(self):
        if not self.pitch_nm > 0:
            raise ModelError("pitch_nm must be > 0")
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise ModelError(f"nx, ny must be positive integers, got {self.nx}, {self.ny}")
        if not self.dwell_s > 0:
            raise ModelError("dwell_s must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates as (X, Y) arrays of shape (ny, nx)."""
        xs = self.x0_nm + self.pitch_nm * np.arange(self.nx)
        ys = self.y0_nm + self.pitch_nm * np.arange(self.ny)
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class Scene:
    emitters: tuple[Emitter, ...]
    psf: Psf = field(default_factory=Psf)
    detector: Detector = field(default_factory=Detector)
    pump_angle_deg: float = 0.0
    # m-photon detection constants for m >= 3; eta_2 always comes from the detector
    eta: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "emitters", tuple(self.emitters))
        if len(self.emitters) < 1:
            raise ModelError("a scene needs at least one emitter")

    @property
    def n(self) -> int:
        return len(self.emitters)

    def with_angle(self, phi_deg: float) -> "Scene":
        return Scene(self.emitters, self.psf, self.detector, phi_deg, self.eta)


def emitter_rate(e: Emitter, phi_deg: float) -> float:
    c = math.cos(math.radians(phi_deg))
    return max(e.alpha_cps + e.beta_cps * c * c, 0.0)


def psf_rate(e: Emitter, phi_deg: float, psf: Psf, x_nm, y_nm):
    """Detected rate of one emitter with the confocal spot at (x, y).

    Accepts scalars or broadcastable arrays for the query position.
    """
    r2 = (np.asarray(x_nm, dtype=float) - e.x_nm) ** 2 + (np.asarray(y_nm, dtype=float) - e.y_nm) ** 2
    out = emitter_rate(e, phi_deg) * np.exp(-r2 / (2.0 * psf.sigma_nm ** 2))
    return out if out.ndim else float(out)


def emitter_rates(s: Scene, x_nm, y_nm) -> np.ndarray:
    """Stack of per-emitter rates, emitter axis last."""
    return np.stack([np.asarray(psf_rate(e, s.pump_angle_deg, s.psf, x_nm, y_nm), dtype=float)
                     for e in s.emitters], axis=-1)


def expected_singles(s: Scene, x_nm, y_nm):
    total = s.detector.bg_cps + emitter_rates(s, x_nm, y_nm).sum(axis=-1)
    return total if np.ndim(total) else float(total)


def eta_2(d: Detector, r1_cps: float, r2_cps: float) -> float:
    """Two-photon detection constant (seconds) from start-stop calibration."""
    if not (r1_cps > 0 and r2_cps > 0):
        raise ModelError(f"eta_2 needs positive detector rates, got {r1_cps}, {r2_cps}")
    # ratio first: equal rates then give exactly 1/4 whatever their magnitude
    tot = r1_cps + r2_cps
    split = r1_cps * r2_cps / (tot * tot)
    return 2.0 * d.tw_s * split / (d.r * d.t)


def nominal_eta(d: Detector, m: int, eta: Mapping[int, float] | None = None) -> float:
    """Detection constant for order ``m``.

    For m=2 this is the start-stop calibration evaluated at the ideal detector
    split. Higher orders use the supplied mapping, falling back to
    ``(2 t_w)**(m-1)``.
    """
    if m == 1:
        return 1.0
    if m == 2:
        return eta_2(d, d.t, d.r)
    if eta and m in eta:
        return float(eta[m])
    return (2.0 * d.tw_s) ** (m - 1)


def elementary_symmetric(values, m_max: int | None = None) -> np.ndarray:
    """Elementary symmetric polynomials e_0..e_{m_max} of the last axis.

    Uses the product-expansion recurrence e_k <- e_k + x e_{k-1}, which only
    ever adds nonnegative terms for nonnegative inputs.
    """
    x = np.asarray(values, dtype=float)
    n = x.shape[-1]
    m_max = n if m_max is None else m_max
    e = np.zeros(x.shape[:-1] + (m_max + 1,))
    e[..., 0] = 1.0
    for j in range(n):
        xj = x[..., j]
        for k in range(min(j + 1, m_max), 0, -1):
            e[..., k] += xj * e[..., k - 1]
    return e


def elementary_symmetric_bruteforce(values: Sequence[float], m: int) -> float:
    """Sum over all m-subsets. Exponential cost; kept as a reference."""
    return float(sum(math.prod(c) for c in itertools.combinations(values, m)))


def expected_coincidences_m(s: Scene, m: int, eta_m: float, x_nm, y_nm):
    """Expected m-photon coincidence rate from emitter pairs (no accidentals)."""
    if not 1 <= m <= s.n:
        raise ModelError(f"coincidence order {m} outside 1..{s.n}")
    rates = emitter_rates(s, x_nm, y_nm)
    em = elementary_symmetric(rates, m)[..., m]
    d = s.detector
    if m == 1:
        out = em
    elif m == 2:
        out = eta_m * (1.0 + d.k_bunch) * d.r * d.t * em * d.capture_frac
    else:
        out = eta_m * em * d.capture_frac
    return out if np.ndim(out) else float(out)


def accidental_rate(d: Detector, signal_cps, bg_cps=None):
    """Start-stop accidentals: pairs with at least one uncorrelated photon.

    ``signal_cps`` is the antibunched emitter part of the singles rate. Pairs
    of emitter photons are already counted by the symmetric-polynomial term.
    """
    bg = d.bg_cps if bg_cps is None else bg_cps
    s = np.asarray(signal_cps, dtype=float)
    out = 2.0 * d.tw_s * d.t * d.r * ((s + bg) ** 2 - s ** 2)
    return out if out.ndim else float(out)


def g2_tau(rates: Sequence[float], d: Detector, tau_ns):
    r = np.asarray(rates, dtype=float)
    total = r.sum()
    if not total > 0:
        raise ModelError("g2 undefined for all-zero rates")
    depth = (r ** 2).sum() / total ** 2
    out = 1.0 - depth * np.exp(-np.abs(np.asarray(tau_ns, dtype=float)) / d.tau_a_ns)
    return out if out.ndim else float(out)
