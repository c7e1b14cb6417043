"""Closed-form baseline path loss models: FSPL, Close-in and COST-231 Hata."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299792458.0

COST231_RANGES = {
    "f_mhz": (1500.0, 2000.0),
    "d_km": (1.0, 20.0),
    "h_t": (30.0, 200.0),
    "h_r": (1.0, 10.0),
}


def fspl(f_ghz, d_m):
    """Free-space path loss in dB.  Accepts scalars or arrays."""
    f = np.asarray(f_ghz, dtype=float)
    d = np.asarray(d_m, dtype=float)
    if np.any(f <= 0) or np.any(d <= 0):
        raise ValueError("fspl needs positive frequency and distance")
    out = 20.0 * np.log10(4.0 * math.pi * f * d * 1e9 / SPEED_OF_LIGHT)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CiParams:
    n: float
    sigma_db: float = 0.0
    d0: float = 1.0

    def __post_init__(self):
        if not self.d0 > 0:
            raise ValueError("d0 must be > 0")
        if not self.sigma_db >= 0:
            raise ValueError("sigma_db must be >= 0")


def ci_pathloss(params: CiParams, f_ghz, d_m, chi_db=0.0):
    """Close-in model: FSPL at d0 plus 10 n log10(d/d0) plus shadowing."""
    d = np.asarray(d_m, dtype=float)
    if np.any(d < params.d0):
        raise ValueError(f"distance below reference distance d0={params.d0}")
    out = fspl(f_ghz, params.d0) + 10.0 * params.n * np.log10(d / params.d0) + np.asarray(chi_db, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def ci_fit(d_m, pl_db, f_ghz, d0: float = 1.0) -> CiParams:
    """Minimum-sigma least-squares path loss exponent anchored at FSPL(f, d0).

    ``f_ghz`` may be a scalar or a per-sample array (multi-frequency fit).
    """
    d = np.asarray(d_m, dtype=float)
    pl = np.asarray(pl_db, dtype=float)
    if d.shape != pl.shape or d.ndim != 1:
        raise ValueError("distances and path losses must be 1-D arrays of equal length")
    if len(d) < 2:
        raise ValueError("ci_fit needs at least 2 samples")
    if np.any(d < d0):
        raise ValueError("all distances must be >= d0")
    if np.all(d == d[0]):
        raise ValueError("ci_fit needs distinct distances")
    big_d = 10.0 * np.log10(d / d0)
    if not np.any(big_d > 0):
        raise ValueError("ci_fit needs samples beyond d0")
    anchor = fspl(np.broadcast_to(np.asarray(f_ghz, dtype=float), d.shape), d0)
    a = pl - anchor
    n = float(np.dot(a, big_d) / np.dot(big_d, big_d))
    resid = a - n * big_d
    sigma = float(np.std(resid, ddof=1))
    return CiParams(n=n, sigma_db=sigma, d0=d0)


def shadow_sample(sigma_db: float, seed: int, count: int) -> np.ndarray:
    """Zero-mean Gaussian shadow fading samples in dB."""
    if sigma_db < 0:
        raise ValueError("sigma_db must be >= 0")
    if sigma_db == 0:
        return np.zeros(count)
    return np.random.default_rng(seed).normal(0.0, sigma_db, count)


@dataclass(frozen=True)
class Cost231Inputs:
    f_mhz: float
    h_t: float
    h_r: float
    d_km: float
    c_db: float = 0.0


def cost231_hata_suburban(inp: Cost231Inputs) -> tuple[float, list[str]]:
    """COST-231 Hata path loss (suburban, C = 0) and validity-range warnings."""
    for name in ("f_mhz", "h_t", "h_r", "d_km"):
        if not getattr(inp, name) > 0:
            raise ValueError(f"COST-231 input {name} must be positive")
    warnings = []
    for name, (lo, hi) in COST231_RANGES.items():
        v = getattr(inp, name)
        if v < lo:
            warnings.append(f"{name}={v:g} below validity range [{lo:g}, {hi:g}]")
        elif v > hi:
            warnings.append(f"{name}={v:g} above validity range [{lo:g}, {hi:g}]")
    return float(cost231_array(inp.f_mhz, inp.h_t, inp.h_r, inp.d_km, inp.c_db)), warnings


def cost231_array(f_mhz, h_t, h_r, d_km, c_db=0.0):
    lf = np.log10(f_mhz)
    a_hr = (1.1 * lf - 0.7) * np.asarray(h_r, dtype=float) - (1.56 * lf - 0.8)
    lht = np.log10(h_t)
    return 46.3 + 33.9 * lf - 13.82 * lht - a_hr + (44.9 - 6.55 * lht) * np.log10(d_km) + c_db


def cost231_range_warnings(f_mhz, h_t, h_r, d_km) -> list[str]:
    """Validity-range warnings summarized over arrays of inputs (one line per violated bound)."""
    vals = {"f_mhz": f_mhz, "h_t": h_t, "h_r": h_r, "d_km": d_km}
    n = max(np.size(v) for v in vals.values())
    out = []
    for name, (lo, hi) in COST231_RANGES.items():
        v = np.broadcast_to(np.asarray(vals[name], dtype=float), (n,))
        below = int(np.count_nonzero(v < lo))
        above = int(np.count_nonzero(v > hi))
        if below:
            out.append(f"{name} below validity range [{lo:g}, {hi:g}] for {below} of {n} inputs (min {v.min():g})")
        if above:
            out.append(f"{name} above validity range [{lo:g}, {hi:g}] for {above} of {n} inputs (max {v.max():g})")
    return out
