"""Model families: factories plus a small name-based registry."""

from __future__ import annotations

from ..statespace import ModelSpec
from .ar1 import Ar1Params, make_ar1
from .sqrtdrift import SqrtDriftParams, make_sqrt_drift
from .heston import (
    HestonParams,
    ObservationGrid,
    cir_cond_mean,
    cir_cond_var,
    cir_transition_sample,
    heston_call_price,
    make_heston,
)
from .blackscholes import black_scholes_call

__all__ = [
    "Ar1Params",
    "HestonParams",
    "ObservationGrid",
    "SqrtDriftParams",
    "black_scholes_call",
    "build_model",
    "cir_cond_mean",
    "cir_cond_var",
    "cir_transition_sample",
    "heston_call_price",
    "make_ar1",
    "make_heston",
    "make_sqrt_drift",
    "registry",
]


def registry() -> dict:
    from . import ar1, heston, sqrtdrift

    return {"ar1": ar1.build, "sqrt": sqrtdrift.build, "heston": heston.build}


def build_model(family: str, theta0, options: dict | None = None) -> ModelSpec:
    """Build a model family by name from a theta vector plus options."""
    builders = registry()
    if family not in builders:
        raise ValueError(
            f"unknown model family {family!r}; known: {sorted(builders)}"
        )
    return builders[family](theta0, options or {})
