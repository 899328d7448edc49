"""Hot numerical kernels: compiled core with a NumPy fallback.

The training loop spends most of its time in a handful of fused
elementwise/reduction loops (softmax, layer norm, activations, the
optimizer update). Those live here behind a flat function interface so the
rest of the package never cares which backend is active.

Backend selection happens once, at import:

* ``cskt._kernels._core`` (Cython extension) when importable,
* otherwise ``cskt._kernels._numpy_ref``.

``CSKT_KERNELS=python`` or ``CSKT_KERNELS=compiled`` forces a backend;
forcing ``compiled`` raises if the extension was not built.

Kernel contract (all float64, C-contiguous):

* ``relu_fwd(x)``, ``relu_bwd(x, g)``, ``sigmoid_fwd(x)``,
  ``sigmoid_bwd(y, g)``: elementwise, any shape.
* ``softmax_fwd(x)``, ``softmax_bwd(y, g)``: x/y/g are ``(rows, n)``;
  softmax along axis 1.
* ``layer_norm_fwd(x, gain, bias, eps) -> (y, xhat, inv_std)`` and
  ``layer_norm_bwd(g, xhat, inv_std, gain) -> (gx, ggain, gbias)``:
  x ``(rows, n)``, gain/bias ``(n,)``, inv_std ``(rows,)``.
* ``adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd)``: in-place on
  p/m/v, any shape.
"""

import os

from . import _numpy_ref


def _load_backend():
    choice = os.environ.get("CSKT_KERNELS", "auto").strip().lower() or "auto"
    if choice not in {"auto", "python", "compiled"}:
        raise ValueError(f"CSKT_KERNELS must be 'auto', 'python' or 'compiled', got {choice!r}")
    if choice == "python":
        return _numpy_ref, "python"
    try:
        from . import _core
    except ImportError:
        if choice == "compiled":
            raise ImportError("CSKT_KERNELS=compiled but the cskt._kernels._core extension is not built")
        return _numpy_ref, "python"
    return _core, "compiled"


_impl, BACKEND = _load_backend()

relu_fwd = _impl.relu_fwd
relu_bwd = _impl.relu_bwd
sigmoid_fwd = _impl.sigmoid_fwd
sigmoid_bwd = _impl.sigmoid_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
adamw_update = _impl.adamw_update


def available_backends():
    """Map backend name -> implementation module, for whatever is importable here."""
    out = {"python": _numpy_ref}
    try:
        from . import _core
    except ImportError:
        pass
    else:
        out["compiled"] = _core
    return out
