"""Hot per-step kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``rbengine.kernels._cyimpl``) is selected at import
when present; otherwise the numpy implementation is used.  Set
``RB_KERNELS=pure`` or ``RB_KERNELS=cython`` to force a backend (forcing
cython raises if the extension is missing).  Both backends consume random
numbers through explicit uniform arrays, so trajectories are identical
across backends; see ``benchmarks/bench_kernels.py`` for a speed comparison.
"""

import os

from rbengine.kernels import _pure

_forced = os.environ.get("RB_KERNELS", "").strip().lower()

if _forced == "pure":
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from rbengine.kernels import _cyimpl as _impl

        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "RB_KERNELS=cython requested but rbengine.kernels._cyimpl "
                "is not built; reinstall with the extension or unset RB_KERNELS"
            ) from None
        _impl = _pure
        BACKEND = "pure"

ideal_actions = _impl.ideal_actions
transitions = _impl.transitions
id_rectify = _impl.id_rectify
priority_actions = _impl.priority_actions
prefix_wnorms = _impl.prefix_wnorms
mean_reward = _impl.mean_reward

HAS_FUSED = hasattr(_impl, "run_simple_policy")
run_simple_policy = getattr(_impl, "run_simple_policy", None)
so_inner_solve = getattr(_impl, "so_inner_solve", None)
max_feasible_m_c = getattr(_impl, "max_feasible_m_c", None)

__all__ = [
    "BACKEND",
    "HAS_FUSED",
    "ideal_actions",
    "transitions",
    "id_rectify",
    "priority_actions",
    "prefix_wnorms",
    "mean_reward",
    "run_simple_policy",
]
