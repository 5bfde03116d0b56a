# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
from .utils import link
from .utils import sim
from .utils import summary

__all__ = ["link", "sim", "summary"]
