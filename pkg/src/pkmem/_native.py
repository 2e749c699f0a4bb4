"""Build-on-first-use loader for the C scatter-add kernels.

The shared object is compiled with the system C compiler into a cache
directory keyed by the source hash (``$PKMEM_CACHE`` or
``~/.cache/pkmem``).  When no compiler is available :func:`load` returns
``None`` and callers fall back to thread-based Python implementations.
"""

from __future__ import annotations

import ctypes
import hashlib
import logging
import os
import shutil
import subprocess
import tempfile
import threading
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# oversubscribed workers must not spin at OpenMP barriers
os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")

_SRC = Path(__file__).with_name("csrc") / "bag_kernels.c"
_FLAGS = ["-O2", "-fopenmp", "-ffp-contract=off", "-fPIC", "-shared"]
_lock = threading.Lock()
_lib = None
_tried = False

_i64p = np.ctypeslib.ndpointer(np.int64, flags="C_CONTIGUOUS")
_u8p = np.ctypeslib.ndpointer(np.uint8, flags="C_CONTIGUOUS")


def _cache_dir() -> Path:
    root = os.environ.get("PKMEM_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "pkmem")
    return Path(root)


def _compile() -> Path | None:
    src = _SRC.read_bytes()
    tag = hashlib.sha256(src + " ".join(_FLAGS).encode()).hexdigest()[:16]
    target = _cache_dir() / f"bag_kernels_{tag}.so"
    if target.exists():
        return target
    cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc")
    if cc is None:
        log.warning("no C compiler found; using Python fallback kernels")
        return None
    target.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=target.parent) as tmp:
        out = Path(tmp) / target.name
        res = subprocess.run([cc, *_FLAGS, str(_SRC), "-o", str(out)], capture_output=True, text=True)
        if res.returncode != 0:
            log.warning("kernel build failed, using Python fallback:\n%s", res.stderr)
            return None
        os.replace(out, target)
    return target


def _declare(lib):
    for suffix, dt in (("f32", np.float32), ("f64", np.float64)):
        fp = np.ctypeslib.ndpointer(dt, flags="C_CONTIGUOUS")
        i64 = ctypes.c_int64
        f = getattr(lib, f"backward_atomics_{suffix}")
        f.argtypes = [fp, fp, _i64p, i64, i64, i64, fp, ctypes.c_int]
        f.restype = None
        f = getattr(lib, f"backward_lock_{suffix}")
        f.argtypes = [fp, fp, _i64p, i64, i64, i64, fp, _u8p, ctypes.c_int]
        f.restype = None
        f = getattr(lib, f"backward_reverse_{suffix}")
        f.argtypes = [fp, fp, _i64p, _i64p, i64, i64, i64, fp, ctypes.c_int]
        f.restype = None


def load():
    """Return the loaded kernel library, or ``None`` if it cannot be built."""
    global _lib, _tried
    if _tried or os.environ.get("PKMEM_NO_NATIVE"):
        return _lib
    with _lock:
        if not _tried:
            try:
                path = _compile()
                if path is not None:
                    lib = ctypes.CDLL(str(path))
                    _declare(lib)
                    _lib = lib
            except OSError as exc:
                log.warning("could not load native kernels: %s", exc)
            _tried = True
    return _lib


def suffix(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"
