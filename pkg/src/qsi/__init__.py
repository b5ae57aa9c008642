"""Quantum statistical imaging of antibunched emitters.

Simulation of confocal photon-count scans and their inversion into
per-emitter images, positions, distances and polarization parameters.
"""
from .model import (
    Detector,
    Emitter,
    ModelError,
    Psf,
    ScanGrid,
    Scene,
    elementary_symmetric,
    emitter_rate,
    eta_2,
    expected_coincidences_m,
    expected_singles,
    g2_tau,
    psf_rate,
)
from .simulate import ScanData, simulate_g2, simulate_polarization_sweep, simulate_scan
from .reconstruct import EmitterImages, reconstruct, solve_pair, solve_symmetric, subtract_background
from .estimate import (
    ConvergenceError,
    FitError,
    bootstrap_uncertainty,
    estimate_distance,
    fit_cos2,
    fit_g2,
    fit_gaussian2d,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "Detector", "Emitter", "EmitterImages", "FitError", "ModelError", "Psf",
    "ScanData", "ScanGrid", "Scene", "bootstrap_uncertainty", "elementary_symmetric",
    "emitter_rate", "estimate_distance", "eta_2", "expected_coincidences_m", "expected_singles",
    "fit_cos2", "fit_g2", "fit_gaussian2d", "g2_tau", "psf_rate", "reconstruct",
    "simulate_g2", "simulate_polarization_sweep", "simulate_scan", "solve_pair",
    "solve_symmetric", "subtract_background",
]
