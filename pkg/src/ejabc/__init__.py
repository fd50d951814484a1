"""Early-rejection ABC samplers with a Gaussian-process discrepancy surrogate."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    KernelSpec,
    Marginal,
    PriorSpec,
    ProposalSpec,
    RngStream,
    kernel_eval,
)
