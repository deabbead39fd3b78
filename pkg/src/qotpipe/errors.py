"""Abort reasons shared by every protocol stage."""
from __future__ import annotations

ABORT_REASONS = (
    "commitment",
    "p_exceeded",
    "check_size",
    "insufficient_raw",
    "protocol_violation",
    "auth_fail",
    "ir_fail",
    "ir_stuck",
    "pa_bound",
    "params_mismatch",
    "qkd_qber",
    "insufficient_material",
    "peer_abort",
    "timeout",
)


class ProtocolAbort(Exception):
    def __init__(self, reason: str, detail: str = ""):
        if reason not in ABORT_REASONS:
            raise ValueError(f"unknown abort reason {reason!r}")
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail
