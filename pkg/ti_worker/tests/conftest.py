"""Test harness wiring: make the package importable from a source checkout.

Also prepends the source tree to PYTHONPATH so subprocess transports
(`python3 -m ti_worker`) resolve the package even before installation.
"""

import os
import sys
from pathlib import Path

SRC = Path(__file__).resolve().parents[1] / "src"

if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

_existing = os.environ.get("PYTHONPATH", "")
if str(SRC) not in _existing.split(os.pathsep):
    os.environ["PYTHONPATH"] = (
        str(SRC) + (os.pathsep + _existing if _existing else "")
    )
