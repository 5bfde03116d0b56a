# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0

__version__ = "0.1.0"

from upstream_aqm_sim.fleet import AsyncFleetRunner
from upstream_aqm_sim.fleet import FleetConfig
from upstream_aqm_sim.fleet import FleetRunner
from upstream_aqm_sim.fleet import FleetSummary
from upstream_aqm_sim.harness import TestConfig
from upstream_aqm_sim.harness import TestReport
from upstream_aqm_sim.harness import run_latency_under_load
from upstream_aqm_sim.qdisc import Discipline

__all__ = [
    "AsyncFleetRunner",
    "Discipline",
    "FleetConfig",
    "FleetRunner",
    "FleetSummary",
    "TestConfig",
    "TestReport",
    "run_latency_under_load",
]
