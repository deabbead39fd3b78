"""Post-processing pipeline for entanglement-based quantum oblivious transfer.

Modules, roughly in data-flow order: ``qsim`` (raw events), ``commitment``
and ``otcore`` (commit/open estimation, index separation), ``cascade``
(position-hiding reconciliation), ``pa`` (Toeplitz hashing), ``auth`` and
``qkdlane`` (authentication and its key supply), ``pipeline`` and
``transport`` (the two-party sessions), ``mpc`` (applications) and
``params`` (security and rate calculus).
"""
from .errors import ABORT_REASONS, ProtocolAbort
from .params import ProtocolParams

__version__ = "0.1.0"
__all__ = ["ABORT_REASONS", "ProtocolAbort", "ProtocolParams", "__version__"]
