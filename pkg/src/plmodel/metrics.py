"""Error metrics and the LoS / NLoS / Total evaluation report.

MSLE uses the natural logarithm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _pair(y, yhat):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("metrics need at least one sample")
    return y.ravel(), yhat.ravel()


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return math.sqrt(float(np.mean((y - yhat) ** 2)))


def mape(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if np.any(y == 0):
        raise ValueError("MAPE is undefined for zero ground-truth values")
    return float(100.0 * np.mean(np.abs((y - yhat) / y)))


def msle(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if np.any(y <= -1) or np.any(yhat <= -1):
        raise ValueError("MSLE needs values > -1")
    return float(np.mean((np.log1p(y) - np.log1p(yhat)) ** 2))


def pearson(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    syy = float(np.dot(dy, dy))
    spp = float(np.dot(dp, dp))
    if syy == 0 or spp == 0:
        raise ValueError("correlation is undefined for a constant sequence")
    r = float(np.dot(dy, dp)) / math.sqrt(syy * spp)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class ReportRow:
    count: int
    rmse_db: float
    mape_pct: float
    msle: float
    rho: float | None


def _row(y, yhat) -> ReportRow | None:
    if len(y) == 0:
        return None
    try:
        rho = pearson(y, yhat)
    except ValueError:
        rho = None
    return ReportRow(len(y), rmse(y, yhat), mape(y, yhat), msle(y, yhat), rho)


STRATA = ("LoS", "NLoS", "Total")


@dataclass(frozen=True)
class EvaluationReport:
    rows: dict

    def __getitem__(self, stratum: str) -> ReportRow | None:
        return self.rows[stratum]

    def to_csv(self) -> str:
        lines = ["stratum,count,rmse_db,mape_pct,msle,rho"]
        for s in STRATA:
            r = self.rows[s]
            if r is None:
                lines.append(f"{s},0,,,,")
                continue
            rho = "" if r.rho is None else format(r.rho, ".17g")
            lines.append(f"{s},{r.count},{r.rmse_db:.17g},{r.mape_pct:.17g},{r.msle:.17g},{rho}")
        return "\n".join(lines) + "\n"

    def to_text(self, title: str = "") -> str:
        head = f"{'stratum':<8}{'count':>8}{'RMSE dB':>11}{'MAPE %':>10}{'MSLE':>12}{'rho':>8}"
        lines = [title] if title else []
        lines += [head, "-" * len(head)]
        for s in STRATA:
            r = self.rows[s]
            if r is None:
                lines.append(f"{s:<8}{0:>8}{'-':>11}{'-':>10}{'-':>12}{'-':>8}")
                continue
            rho = "-" if r.rho is None else f"{r.rho:.3f}"
            lines.append(f"{s:<8}{r.count:>8}{r.rmse_db:>11.3f}{r.mape_pct:>10.3f}{r.msle:>12.3e}{rho:>8}")
        lines.append("MSLE uses the natural logarithm; Total is pooled over all samples.")
        return "\n".join(lines) + "\n"


def evaluate_stratified(y, yhat, los_flags) -> EvaluationReport:
    y, yhat = _pair(y, yhat)
    los = np.asarray(los_flags).astype(bool).ravel()
    if los.shape != y.shape:
        raise ValueError("LoS flags length mismatch")
    return EvaluationReport({
        "LoS": _row(y[los], yhat[los]),
        "NLoS": _row(y[~los], yhat[~los]),
        "Total": _row(y, yhat),
    })
