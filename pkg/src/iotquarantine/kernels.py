"""Hot-loop kernels, compiled when available.

``BACKEND`` names the implementation in use.  Set ``IOTQ_KERNELS=python`` to
force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
tally_rounds = _pykernels.tally_rounds
shift_convolve = _pykernels.shift_convolve

if os.environ.get("IOTQ_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        tally_rounds = _ckernels.tally_rounds
        shift_convolve = _ckernels.shift_convolve

__all__ = ["BACKEND", "tally_rounds", "shift_convolve"]
