"""Worst-case super-hedging engine.

Price a target claim under adverse drift/volatility/rate uncertainty by
solving the associated worst-case parabolic equation, build certified smooth
supersolutions by coefficient shaking + inf-convolution + mollification,
derive feedback hedges, and cross-check by adversarial simulation and a
regression Monte Carlo dual.
"""

from .model import (
    DerivativePack,
    FinanceSpec,
    HedgeGameError,
    ModelError,
    ModelSpec,
    ValidationReport,
    make_finance_model,
    make_payoff,
    make_single_rate_model,
    model_from_config,
    mu_Y_hat,
    operator_H_eps,
    operator_L,
    operator_La,
    rho,
    shake_lattice,
    u_hat_finance,
    validate_assumptions,
)

__version__ = "0.1.0"

__all__ = [
    "DerivativePack",
    "FinanceSpec",
    "HedgeGameError",
    "ModelError",
    "ModelSpec",
    "ValidationReport",
    "make_finance_model",
    "make_payoff",
    "make_single_rate_model",
    "model_from_config",
    "mu_Y_hat",
    "operator_H_eps",
    "operator_L",
    "operator_La",
    "rho",
    "shake_lattice",
    "u_hat_finance",
    "validate_assumptions",
    "__version__",
]
