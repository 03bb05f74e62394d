"""Executable model of a confidential-computing security monitor.

The package simulates a small multi-hart machine (:mod:`confmon.hw`), a
security monitor that boots on it (:mod:`confmon.boot`), hands confidential
memory out through linear page tokens (:mod:`confmon.tracker`), moves harts
between the hypervisor and confidential VMs through a fixed state machine
(:mod:`confmon.fsm`, :mod:`confmon.calls`) and signs attestation reports
(:mod:`confmon.attestation`). :mod:`confmon.harness` attacks the model and
judges the resulting traces against the security invariants.
"""
from .attestation import AttestationReport, Measurement, derive_attestation_key, measure, verify_report
from .boot import BootReport, secure_boot, verify_init_invariants
from .errors import ConfmonError
from .hw import Platform, PrivilegeLevel, create_platform
from .invariants import ALL_INVARIANTS
from .monitor import Lifecycle, Status, WhitelistTable
from .trace import Trace, TraceEvent

__version__ = "0.1.0"

__all__ = [
    "ALL_INVARIANTS",
    "AttestationReport",
    "BootReport",
    "ConfmonError",
    "Lifecycle",
    "Measurement",
    "Platform",
    "PrivilegeLevel",
    "Status",
    "Trace",
    "TraceEvent",
    "WhitelistTable",
    "create_platform",
    "derive_attestation_key",
    "measure",
    "secure_boot",
    "verify_init_invariants",
    "verify_report",
]
