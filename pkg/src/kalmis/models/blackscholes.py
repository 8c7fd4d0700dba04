"""Black-Scholes call pricing (reference formula for limit checks)."""

from __future__ import annotations

import math

__all__ = ["black_scholes_call"]


def black_scholes_call(s: float, k: float, tau: float, r: float, vol: float) -> float:
    """European call under constant volatility ``vol``.

    Degenerate cases (zero maturity or volatility) return the discounted
    intrinsic value.
    """
    if k <= 0.0:
        return s - k * math.exp(-r * tau)
    if tau <= 0.0 or vol <= 0.0:
        return max(s - k * math.exp(-r * tau), 0.0)
    srt = vol * math.sqrt(tau)
    d1 = (math.log(s / k) + (r + 0.5 * vol * vol) * tau) / srt
    d2 = d1 - srt
    return s * _norm_cdf(d1) - k * math.exp(-r * tau) * _norm_cdf(d2)


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))
