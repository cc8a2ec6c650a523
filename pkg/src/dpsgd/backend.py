"""Select the compiled kernel module, or the numpy fallback.

Set ``DPSGD_PURE_PYTHON=1`` to force the fallback even when the extension
is built.
"""

import logging
import os

from dpsgd import _fallback

logger = logging.getLogger(__name__)

fallback = _fallback
compiled = None

if os.environ.get("DPSGD_PURE_PYTHON", "") not in ("", "0"):
    kernels = _fallback
else:
    try:
        from dpsgd import _ext as compiled
    except ImportError:  # extension not built
        logger.debug("dpsgd._ext not available, using numpy fallback")
        kernels = _fallback
    else:
        kernels = compiled

BACKEND = kernels.BACKEND


def available():
    """Names of the kernel backends importable in this process."""
    return ["python"] + (["compiled"] if compiled is not None else [])


def get(name):
    if name == "python":
        return _fallback
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
