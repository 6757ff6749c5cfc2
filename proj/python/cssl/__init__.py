"""Continuous self-supervised learning simulator (bindings to the C++ core)."""

from ._cssl import (
    ConfigError,
    DomainError,
    InsufficientDataError,
    IoError,
    NumericalError,
    ReplayBuffer,
    batch_correlation,
    compare_runs,
    correlation_likelihood,
    correlation_likelihood_exact,
    correlation_likelihood_monte_carlo,
    fifo_reduction,
    generate_stream,
    resolve_config,
    run_experiment,
    simsiam_loss,
    validate_config,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "InsufficientDataError",
    "IoError",
    "NumericalError",
    "ReplayBuffer",
    "batch_correlation",
    "compare_runs",
    "correlation_likelihood",
    "correlation_likelihood_exact",
    "correlation_likelihood_monte_carlo",
    "fifo_reduction",
    "generate_stream",
    "resolve_config",
    "run_experiment",
    "simsiam_loss",
    "validate_config",
]
