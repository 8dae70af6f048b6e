from __future__ import annotations

import importlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chunkpd import _pykernels, kernels

try:
    from chunkpd import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def _img(seed, h, w):
    return np.random.default_rng(seed).random((h, w, 3), dtype=np.float32)


def test_checkerboard_upsample_matches_hand_computed_weights():
    # half-pixel centres: output coords map to source {0, .25, .75, 1}; value = x + y - 2xy
    board = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)[:, :, None].repeat(3, axis=2)
    src = np.array([0.0, 0.25, 0.75, 1.0])
    expected = src[:, None] + src[None, :] - 2 * src[:, None] * src[None, :]
    for backend in filter(None, (_pykernels, _ckernels)):
        out = backend.bilinear_resize(board, 4, 4)
        np.testing.assert_allclose(out[:, :, 0], expected, atol=1e-7)
        assert np.all((out[1:3, 1:3] > 0) & (out[1:3, 1:3] < 1))


def test_constant_image_is_a_fixed_point_of_resizing():
    img = np.full((37, 53, 3), 0.5, dtype=np.float32)
    assert np.array_equal(kernels.bilinear_resize(img, 20, 20), np.full((20, 20, 3), 0.5, dtype=np.float32))


def test_quarter_turn_equals_rot90():
    img = _img(0, 17, 17)
    out = _pykernels.rotate_bilinear(img, math.cos(math.pi / 2), math.sin(math.pi / 2), 1.0)
    np.testing.assert_allclose(out, np.rot90(img, 1), atol=1e-5)


def test_rotation_pads_with_fill():
    img = np.zeros((20, 20, 3), dtype=np.float32)
    out = _pykernels.rotate_bilinear(img, math.cos(math.pi / 4), math.sin(math.pi / 4), 1.0)
    assert out[0, 0, 0] == 1.0 and out[10, 10, 0] == 0.0


@needs_ext
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40), st.integers(1, 50), st.integers(1, 50))
def test_backends_agree_on_resize(seed, h, w, oh, ow):
    img = _img(seed, h, w)
    assert np.array_equal(_pykernels.bilinear_resize(img, oh, ow), _ckernels.bilinear_resize(img, oh, ow))


@needs_ext
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.floats(0, 360), st.floats(0, 1))
def test_backends_agree_on_rotation(seed, side, angle, fill):
    img = _img(seed, side, side + 3)
    t = math.radians(angle)
    a = _pykernels.rotate_bilinear(img, math.cos(t), math.sin(t), fill)
    b = _ckernels.rotate_bilinear(img, math.cos(t), math.sin(t), fill)
    assert np.array_equal(a, b)


def test_backend_selection_honours_environment(monkeypatch):
    monkeypatch.setenv("CHUNKPD_KERNELS", "python")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("CHUNKPD_KERNELS")
        importlib.reload(kernels)
