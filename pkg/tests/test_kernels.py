import numpy as np
import pytest

from stacklqg import _backend, _kernels_py


def random_args(rng, size=3, N=40, varying=True):
    shape = (N + 1, size, size) if varying else (1, size, size)
    A = rng.standard_normal(shape) * 0.3
    Am = A[:1] if not varying else 0.5 * (A[1:] + A[:-1])
    B = np.ascontiguousarray(np.swapaxes(A, 1, 2))
    Bm = np.ascontiguousarray(np.swapaxes(Am, 1, 2))
    C = -np.eye(size)[None] * 0.5
    D = np.eye(size)[None]
    if not varying:
        D = np.ascontiguousarray(np.broadcast_to(D[0], (N, size, size)))
        return A, Am, B, Bm, C, C, D[:1].copy(), D, np.zeros((size, size))
    return A, Am, B, Bm, C, C, D, D, np.zeros((size, size))


def test_backend_selected():
    assert _backend.BACKEND in ("python", "cython")
    assert "python" in _backend.available_backends()


@pytest.mark.skipif("cython" not in _backend.available_backends(), reason="extension not built")
@pytest.mark.parametrize("backward", [False, True])
@pytest.mark.parametrize("symmetrize", [False, True])
@pytest.mark.parametrize("varying", [False, True])
def test_cython_matches_python(rng, backward, symmetrize, varying):
    args = random_args(rng, varying=varying)
    h = 0.01
    ref, bad_ref = _kernels_py.riccati_rk4(*args, h, backward, symmetrize)
    out, bad = _backend.available_backends()["cython"](*args, h, backward, symmetrize)
    assert bad == bad_ref == -1
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("name", sorted(_backend.available_backends()))
def test_rectangular_state(rng, name):
    N = 20
    A = rng.standard_normal((1, 3, 3))
    B = rng.standard_normal((1, 2, 2))
    C = np.zeros((1, 2, 3))
    D = np.ascontiguousarray(np.broadcast_to(np.ones((3, 2)), (N, 3, 2)))
    out, bad = _backend.available_backends()[name](A, A, B, B, C, C, D[:1].copy(), D, np.zeros((3, 2)),
                                                   0.05, False, False)
    assert bad == -1 and out.shape == (N + 1, 3, 2)


def test_force_python_backend(monkeypatch):
    import importlib
    monkeypatch.setenv("STACKLQG_BACKEND", "python")
    mod = importlib.reload(_backend)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("STACKLQG_BACKEND")
        importlib.reload(_backend)
