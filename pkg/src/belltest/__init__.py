"""Bell-test analysis toolkit for timetagged photon data."""
from __future__ import annotations

__version__ = "0.1.0"
