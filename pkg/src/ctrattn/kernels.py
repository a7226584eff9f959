"""Kernel backend selection.

The compiled extension is used when importable; set ``CTRATTN_PURE_PYTHON=1``
to force the numpy fallback (used by the equivalence tests and the benchmark).
"""
from __future__ import annotations

import importlib
import os
from types import ModuleType


def load_backend(name: str | None = None) -> ModuleType:
    if name is None:
        name = "python" if os.environ.get("CTRATTN_PURE_PYTHON") else "cython"
    if name == "python":
        return importlib.import_module("ctrattn._pykernels")
    try:
        return importlib.import_module("ctrattn._ckernels")
    except ImportError:
        return importlib.import_module("ctrattn._pykernels")


_impl = load_backend()
BACKEND = "cython" if _impl.__name__.endswith("_ckernels") else "python"

sumtree_update = _impl.sumtree_update
sumtree_find = _impl.sumtree_find
cluster_gaze = _impl.cluster_gaze
gaze_target = _impl.gaze_target
