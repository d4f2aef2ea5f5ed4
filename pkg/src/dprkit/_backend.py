"""Kernel selection: compiled extension when importable, numpy fallback otherwise.

DPRKIT_FORCE_PURE=1 forces the fallback (used by the benchmark and tests).
The choice is made once at import, so a given environment always runs the
same arithmetic and reruns stay reproducible.
"""

from __future__ import annotations

import os

from . import _cd_py

if os.environ.get("DPRKIT_FORCE_PURE") == "1":
    _impl = _cd_py
else:
    try:
        from . import _cd_kernel as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _cd_py

enet_sweeps = _impl.enet_sweeps
BACKEND = _impl.BACKEND_NAME


def available_backends() -> dict:
    """Name -> sweep function for every backend importable right now."""
    out = {_cd_py.BACKEND_NAME: _cd_py.enet_sweeps}
    try:
        from . import _cd_kernel

        out[_cd_kernel.BACKEND_NAME] = _cd_kernel.enet_sweeps
    except ImportError:
        pass
    return out
