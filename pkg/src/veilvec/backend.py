"""Selects the compiled kernel when built, the numpy fallback otherwise.

Override with VEILVEC_BACKEND=compiled|python|auto (default auto). The two
backends implement the same contracts; `tests/test_backends.py` holds them
to numerical agreement and `benchmarks/bench_backends.py` compares speed.
"""

import os

from . import _kernel_py

_choice = os.environ.get("VEILVEC_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise RuntimeError(f"VEILVEC_BACKEND must be auto|compiled|python, "
                       f"got {_choice!r}")

if _choice == "python":
    _impl = _kernel_py
    BACKEND = "python"
else:
    try:
        from . import _kernel as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise RuntimeError(
                "VEILVEC_BACKEND=compiled but the extension is not built; "
                "reinstall with a C compiler available")
        _impl = _kernel_py
        BACKEND = "python"

pav_pool = _impl.pav_pool
train_step_inplace = _impl.train_step_inplace
