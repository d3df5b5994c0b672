import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsurerecon.errors import FactorizationError, FormatError, ShapeError
from gsurerecon.tensorcore import cholesky, fft2c, fft2c_batch, ifft2c, ifft2c_batch, load_tensor, save_tensor

from conftest import crandn, rel_err


def dft2c_direct(x, inverse=False):
    """Centered orthonormal DFT by explicit summation; origin at floor(n/2)."""
    H, W = x.shape
    sign = 1 if inverse else -1
    ky = np.arange(H) - H // 2
    kx = np.arange(W) - W // 2
    Fy = np.exp(sign * 2j * np.pi * np.outer(ky, ky) / H)
    Fx = np.exp(sign * 2j * np.pi * np.outer(kx, kx) / W)
    return Fy @ x @ Fx.T / np.sqrt(H * W)


def test_round_trip_16(rng):
    x = crandn(rng, 16, 16)
    assert rel_err(ifft2c(fft2c(x)), x) < 1e-6
    y = crandn(rng, 16, 16)
    assert rel_err(fft2c(ifft2c(y)), y) < 1e-6


def test_parseval_8(rng):
    x = crandn(rng, 8, 8)
    assert abs(np.linalg.norm(fft2c(x)) - np.linalg.norm(x)) / np.linalg.norm(x) < 1e-6


def test_ones_2x2_puts_dc_at_center():
    out = fft2c(np.ones((2, 2), dtype=np.complex128))
    expected = np.zeros((2, 2))
    expected[1, 1] = 2.0
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, dft2c_direct(np.ones((2, 2))), atol=1e-12)


def test_center_delta_4x4_is_constant_quarter():
    y = np.zeros((4, 4), dtype=np.complex128)
    y[2, 2] = 1.0
    np.testing.assert_allclose(ifft2c(y), np.full((4, 4), 0.25), atol=1e-12)
    np.testing.assert_allclose(ifft2c(y), dft2c_direct(y, inverse=True), atol=1e-12)


def test_zeros_stay_zero():
    assert not np.any(ifft2c(np.zeros((5, 7), dtype=np.complex64)))


@pytest.mark.parametrize("shape", [(3, 5), (7, 7), (6, 9), (16, 16)])
def test_matches_direct_dft_odd_and_even(rng, shape):
    x = crandn(rng, *shape)
    assert rel_err(fft2c(x), dft2c_direct(x)) < 1e-10
    assert rel_err(ifft2c(x), dft2c_direct(x, inverse=True)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_unitary_and_inverse_all_sizes(H, W, seed):
    rng = np.random.default_rng(seed)
    x = crandn(rng, H, W)
    k = fft2c(x)
    assert abs(np.linalg.norm(k) - np.linalg.norm(x)) <= 1e-6 * np.linalg.norm(x)
    assert rel_err(ifft2c(k), x) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 32), st.integers(2, 32), st.integers(0, 2**31 - 1))
def test_adjoint_identity(H, W, seed):
    rng = np.random.default_rng(seed)
    a, b = crandn(rng, H, W), crandn(rng, H, W)
    lhs = np.vdot(fft2c(a), b)
    rhs = np.vdot(a, ifft2c(b))
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


def test_torch_and_numpy_agree(rng):
    x = crandn(rng, 2, 3, 8, 6)
    out = fft2c_batch(torch.from_numpy(x)).numpy()
    assert rel_err(out, fft2c_batch(x)) < 1e-12
    assert rel_err(ifft2c_batch(fft2c_batch(x)), x) < 1e-12


def test_rank_checks():
    with pytest.raises(ShapeError):
        fft2c(np.zeros((2, 4, 4), dtype=np.complex64))
    with pytest.raises(ShapeError):
        ifft2c(np.zeros(4, dtype=np.complex64))


# -- cholesky ---------------------------------------------------------------------

def test_cholesky_identity_and_diagonal():
    np.testing.assert_allclose(cholesky(np.eye(4)), np.eye(4), atol=1e-15)
    np.testing.assert_allclose(cholesky(np.diag([4.0, 1.0])), np.diag([2.0, 1.0]), atol=1e-15)


@pytest.mark.parametrize("n", range(1, 9))
def test_cholesky_reconstructs_random_pd(rng, n):
    M = crandn(rng, n, n)
    C = M @ M.conj().T + np.eye(n)
    L = cholesky(C)
    assert np.allclose(L, np.tril(L))
    assert rel_err(L @ L.conj().T, C) < 1e-6


def test_cholesky_names_failing_pivot():
    C = np.diag([1.0, 2.0, -1.0])
    with pytest.raises(FactorizationError, match="pivot 2") as info:
        cholesky(C)
    assert info.value.pivot == 2


def test_cholesky_rejects_non_hermitian():
    with pytest.raises(FactorizationError):
        cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))


# -- CXT files --------------------------------------------------------------------

def test_round_trip_bit_identical(rng, tmp_path):
    t = crandn(rng, 3, 8, 8, dtype=np.complex64)
    save_tensor(tmp_path / "t.cxt", t)
    back = load_tensor(tmp_path / "t.cxt")
    assert back.dtype == np.complex64 and back.shape == (3, 8, 8)
    assert back.tobytes() == t.tobytes()


def test_header_layout(tmp_path):
    t = np.arange(6, dtype=np.complex64).reshape(2, 3)
    save_tensor(tmp_path / "t.cxt", t)
    raw = (tmp_path / "t.cxt").read_bytes()
    assert raw[:8] == b"CXTENS01" and raw[8] == 1 and raw[9] == 2
    assert struct.unpack("<QQ", raw[10:26]) == (2, 3)
    assert np.frombuffer(raw[26:], dtype="<f4").tolist()[:4] == [0.0, 0.0, 1.0, 0.0]
    assert len(raw) == 26 + 6 * 8


def test_float32_payload(tmp_path):
    t = np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)
    save_tensor(tmp_path / "f.cxt", t)
    back = load_tensor(tmp_path / "f.cxt")
    assert back.dtype == np.float32 and back.tobytes() == t.tobytes()


def test_truncated_file(tmp_path, rng):
    save_tensor(tmp_path / "t.cxt", crandn(rng, 4, 4, dtype=np.complex64))
    raw = (tmp_path / "t.cxt").read_bytes()
    (tmp_path / "t.cxt").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="offset"):
        load_tensor(tmp_path / "t.cxt")
    (tmp_path / "t.cxt").write_bytes(raw[:14])
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "t.cxt")


def test_wrong_magic(tmp_path, rng):
    save_tensor(tmp_path / "t.cxt", crandn(rng, 4, dtype=np.complex64))
    raw = bytearray((tmp_path / "t.cxt").read_bytes())
    raw[:8] = b"NOTATENS"
    (tmp_path / "t.cxt").write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_tensor(tmp_path / "t.cxt")
    assert info.value.offset == 0


def test_unknown_dtype_and_trailing_bytes(tmp_path, rng):
    save_tensor(tmp_path / "t.cxt", crandn(rng, 4, dtype=np.complex64))
    raw = bytearray((tmp_path / "t.cxt").read_bytes())
    bad = bytes(raw[:8]) + b"\x09" + bytes(raw[9:])
    (tmp_path / "d.cxt").write_bytes(bad)
    with pytest.raises(FormatError) as info:
        load_tensor(tmp_path / "d.cxt")
    assert info.value.offset == 8
    (tmp_path / "e.cxt").write_bytes(bytes(raw) + b"\x00")
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "e.cxt")
