"""Kernel dispatch: compiled extension when built, numpy fallback otherwise."""
from . import _kernels_py as python_backend

try:
    from . import _kernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "cython" if compiled_backend is not None else "python"

# numpy's vectorised exp beats the compiled scalar loop here (benchmarks/bench_kernels.py)
softmax_xent = python_backend.softmax_xent
sym_kl = backend.sym_kl
lasso_cd = backend.lasso_cd
adam_update = backend.adam_update

__all__ = ["softmax_xent", "sym_kl", "lasso_cd", "adam_update", "BACKEND_NAME",
           "python_backend", "compiled_backend"]
