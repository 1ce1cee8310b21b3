"""Hot loops, compiled when available.

The backend is chosen once at import. ``TIERCKPT_BACKEND`` may be set to
``compiled`` (fail if the extension is missing), ``python`` (always numpy), or
``auto`` (default).
"""
import os

from . import _fallback

_requested = os.environ.get("TIERCKPT_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(f"TIERCKPT_BACKEND must be auto, compiled or python, got {_requested!r}")

_native = None
if _requested != "python":
    try:
        from . import _compiled as _native
    except ImportError:
        if _requested == "compiled":
            raise

BACKENDS = {"python": _fallback}
if _native is not None:
    BACKENDS["compiled"] = _native

backend = _native if _native is not None else _fallback
BACKEND_NAME = "compiled" if _native is not None else "python"

fused_adam = backend.fused_adam
threshold_compact = backend.threshold_compact
float_to_half_bits = backend.float_to_half_bits

__all__ = [
    "BACKENDS",
    "BACKEND_NAME",
    "fused_adam",
    "threshold_compact",
    "float_to_half_bits",
]
