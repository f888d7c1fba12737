"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy versions
are used. Setting ``TUMORSEG_KERNELS=python`` forces the numpy versions.
"""

import importlib
import os
from types import ModuleType

__all__ = ["BACKEND", "get_backend", "available_backends",
           "im2col3d", "col2im3d", "min_distances", "resample3d"]


def _load(name: str) -> ModuleType:
    if name == "c":
        return importlib.import_module("tumorseg._ckernels")
    if name == "python":
        return importlib.import_module("tumorseg._pykernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = []
    for name in ("c", "python"):
        try:
            _load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def get_backend(name: str) -> ModuleType:
    return _load(name)


def _select() -> tuple[str, ModuleType]:
    wanted = os.environ.get("TUMORSEG_KERNELS", "").strip().lower()
    if wanted in ("python", "py", "numpy"):
        return "python", _load("python")
    try:
        return "c", _load("c")
    except ImportError:
        if wanted == "c":
            raise
        return "python", _load("python")


BACKEND, _impl = _select()

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
min_distances = _impl.min_distances
resample3d = _impl.resample3d
