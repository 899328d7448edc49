"""Kernel contract: reference semantics, backend parity, env-var selection."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cskt import _kernels
from cskt._kernels import _numpy_ref as ref

RNG = np.random.default_rng(11)

BACKENDS = sorted(_kernels.available_backends().items())


def _rows(r=4, n=9):
    return np.ascontiguousarray(RNG.normal(0.0, 2.0, (r, n)))


# -- reference semantics -----------------------------------------------------


def test_relu_fwd_bwd():
    x = np.array([-1.0, 0.0, 2.5])
    g = np.array([10.0, 20.0, 30.0])
    assert np.array_equal(ref.relu_fwd(x), [0.0, 0.0, 2.5])
    # derivative at exactly 0 is defined as 0
    assert np.array_equal(ref.relu_bwd(x, g), [0.0, 0.0, 30.0])


def test_sigmoid_fwd_bwd():
    x = np.array([0.0, 2.0, -2.0])
    y = ref.sigmoid_fwd(x)
    assert y[0] == 0.5
    assert np.allclose(y, 1.0 / (1.0 + np.exp(-x)), atol=1e-15)
    g = np.array([1.0, 1.0, 1.0])
    assert np.allclose(ref.sigmoid_bwd(y, g), y * (1.0 - y), atol=1e-15)


def test_softmax_fwd_stable_and_normalised():
    x = _rows()
    y = ref.softmax_fwd(x)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    huge = ref.softmax_fwd(np.array([[1e4, 0.0, -1e4]]))
    assert np.isfinite(huge).all()
    assert huge[0, 0] == pytest.approx(1.0)


def test_softmax_bwd_matches_jacobian():
    x = _rows(2, 5)
    y = ref.softmax_fwd(x)
    g = _rows(2, 5)
    got = ref.softmax_bwd(y, g)
    for r in range(2):
        J = np.diag(y[r]) - np.outer(y[r], y[r])
        assert np.allclose(got[r], J @ g[r], atol=1e-12)


def test_layer_norm_fwd_properties():
    x = _rows(3, 8)
    gain = RNG.normal(1.0, 0.1, 8)
    bias = RNG.normal(0.0, 0.1, 8)
    y, xhat, inv_std = ref.layer_norm_fwd(x, gain, bias, 1e-5)
    assert xhat.shape == x.shape and inv_std.shape == (3,)
    assert np.allclose(xhat.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y, xhat * gain + bias, atol=1e-15)
    # eps keeps a constant row finite: inv_std = 1/sqrt(eps)
    _, _, iv = ref.layer_norm_fwd(np.full((1, 4), 3.0), np.ones(4), np.zeros(4), 1e-5)
    assert iv[0] == pytest.approx(1.0 / np.sqrt(1e-5))


def test_layer_norm_bwd_matches_numeric():
    x = _rows(2, 6)
    gain = RNG.normal(1.0, 0.2, 6)
    bias = np.zeros(6)
    eps = 1e-5
    g = _rows(2, 6)

    def loss(x_):
        y, _, _ = ref.layer_norm_fwd(x_, gain, bias, eps)
        return float((y * g).sum())

    _, xhat, inv_std = ref.layer_norm_fwd(x, gain, bias, eps)
    gx, ggain, gbias = ref.layer_norm_bwd(g, xhat, inv_std, gain)
    h = 1e-6
    for r in range(2):
        for c in range(6):
            xp = x.copy(); xp[r, c] += h
            xm = x.copy(); xm[r, c] -= h
            num = (loss(xp) - loss(xm)) / (2 * h)
            assert gx[r, c] == pytest.approx(num, abs=1e-6)
    y, _, _ = ref.layer_norm_fwd(x, gain, bias, eps)
    assert np.allclose(gbias, g.sum(axis=0), atol=1e-15)
    assert np.allclose(ggain, (g * xhat).sum(axis=0), atol=1e-15)


def test_adamw_single_step_oracle():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.0
    p = np.array([1.0])
    g = np.array([0.5])
    m = np.zeros(1)
    v = np.zeros(1)
    ref.adamw_update(p, g, m, v, 1, lr, b1, b2, eps, wd)
    # hand-computed: mhat = g, vhat = g^2, step = lr * g / (|g| + eps)
    assert m[0] == pytest.approx(0.05)
    assert v[0] == pytest.approx(0.00025)
    assert p[0] == pytest.approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8)), abs=1e-12)


def test_adamw_decoupled_weight_decay():
    # zero gradient: the only movement is the decay term p -= lr * wd * p
    p = np.array([2.0])
    m = np.zeros(1)
    v = np.zeros(1)
    ref.adamw_update(p, np.zeros(1), m, v, 1, 0.1, 0.9, 0.999, 1e-8, 0.01)
    assert p[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, abs=1e-15)


def test_adamw_updates_in_place():
    p = np.array([1.0, 2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    pid, mid, vid = id(p), id(m), id(v)
    ref.adamw_update(p, np.array([0.1, -0.2]), m, v, 1, 0.01, 0.9, 0.999, 1e-8, 0.01)
    assert (id(p), id(m), id(v)) == (pid, mid, vid)
    assert (m != 0).all() and (v != 0).all()


# -- backend parity ----------------------------------------------------------


@pytest.mark.parametrize("name,mod", BACKENDS)
def test_backend_parity_bit_exact(name, mod):
    """Every available backend must reproduce the reference bit for bit."""
    x = _rows(5, 16)
    g = _rows(5, 16)
    gain = np.ascontiguousarray(RNG.normal(1.0, 0.1, 16))
    bias = np.ascontiguousarray(RNG.normal(0.0, 0.1, 16))

    assert np.array_equal(mod.relu_fwd(x), ref.relu_fwd(x))
    assert np.array_equal(mod.relu_bwd(x, g), ref.relu_bwd(x, g))
    y = ref.sigmoid_fwd(x)
    assert np.array_equal(mod.sigmoid_fwd(x), y)
    assert np.array_equal(mod.sigmoid_bwd(y, g), ref.sigmoid_bwd(y, g))
    s = ref.softmax_fwd(x)
    assert np.array_equal(mod.softmax_fwd(x), s)
    assert np.array_equal(mod.softmax_bwd(s, g), ref.softmax_bwd(s, g))

    y_ref = ref.layer_norm_fwd(x, gain, bias, 1e-5)
    y_mod = mod.layer_norm_fwd(x, gain, bias, 1e-5)
    for a, b in zip(y_mod, y_ref):
        assert np.array_equal(a, b)
    b_ref = ref.layer_norm_bwd(g, y_ref[1], y_ref[2], gain)
    b_mod = mod.layer_norm_bwd(g, y_ref[1], y_ref[2], gain)
    for a, b in zip(b_mod, b_ref):
        assert np.array_equal(a, b)

    p1 = np.ascontiguousarray(RNG.normal(0, 1, 16))
    p2 = p1.copy()
    grad = np.ascontiguousarray(RNG.normal(0, 1, 16))
    m1, v1 = np.zeros(16), np.zeros(16)
    m2, v2 = np.zeros(16), np.zeros(16)
    for t in (1, 2, 3):
        ref.adamw_update(p1, grad, m1, v1, t, 3e-4, 0.9, 0.999, 1e-8, 0.01)
        mod.adamw_update(p2, grad, m2, v2, t, 3e-4, 0.9, 0.999, 1e-8, 0.01)
    assert np.array_equal(p1, p2)
    assert np.array_equal(m1, m2)
    assert np.array_equal(v1, v2)


def test_active_backend_exposed():
    assert _kernels.BACKEND in _kernels.available_backends()
    for fn in ("relu_fwd", "relu_bwd", "sigmoid_fwd", "sigmoid_bwd",
               "softmax_fwd", "softmax_bwd", "layer_norm_fwd", "layer_norm_bwd",
               "adamw_update"):
        assert callable(getattr(_kernels, fn))


# -- environment selection ---------------------------------------------------


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("CSKT_KERNELS", None)
    else:
        env["CSKT_KERNELS"] = env_value
    return subprocess.run(
        [sys.executable, "-c", "from cskt import _kernels; print(_kernels.BACKEND)"],
        capture_output=True, text=True, env=env,
    )


def test_env_forces_python_backend():
    proc = _backend_in_subprocess("python")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "python"


def test_env_auto_picks_available_backend():
    proc = _backend_in_subprocess("auto")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() in ("python", "compiled")


def test_env_compiled_errors_when_missing():
    if "compiled" in _kernels.available_backends():
        proc = _backend_in_subprocess("compiled")
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.strip() == "compiled"
    else:
        proc = _backend_in_subprocess("compiled")
        assert proc.returncode != 0
        assert "compiled" in proc.stderr


def test_env_rejects_unknown_value():
    proc = _backend_in_subprocess("jit")
    assert proc.returncode != 0
