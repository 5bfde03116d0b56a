# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
import upstream_aqm_sim
from upstream_aqm_sim import __version__


def test_version():
    assert __version__ == "0.1.0"


def test_public_api():
    for name in upstream_aqm_sim.__all__:
        assert hasattr(upstream_aqm_sim, name)
