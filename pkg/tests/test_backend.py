"""Numba and numpy kernel paths agree; checkpoint round-trips are lossless."""

import subprocess
import sys

import numpy as np
import pytest

from epidepth import backend, kernels
from epidepth.checkpoint import load_checkpoint, save_checkpoint

rng = np.random.default_rng(99)

needs_numba = pytest.mark.skipif(not backend.NUMBA_AVAILABLE, reason="numba backend inactive")


@needs_numba
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_paths_agree(stride):
    xpad = rng.standard_normal((1, 3, 10, 12))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    a = kernels.conv2d_forward_numba(xpad, w, b, stride)
    bnp = kernels.conv2d_forward_numpy(xpad, w, b, stride)
    np.testing.assert_allclose(a, bnp, rtol=0, atol=1e-12)

    g = rng.standard_normal(a.shape)
    np.testing.assert_allclose(
        kernels.conv2d_backward_input_numba(g, w, stride, 10, 12),
        kernels.conv2d_backward_input_numpy(g, w, stride, 10, 12), rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        kernels.conv2d_backward_kernel_numba(g, xpad, 3, 3, stride),
        kernels.conv2d_backward_kernel_numpy(g, xpad, 3, 3, stride), rtol=0, atol=1e-12)


@needs_numba
def test_bilinear_paths_agree():
    feat = rng.standard_normal((4, 7, 9))
    xy = np.column_stack([rng.uniform(-2, 11, 50), rng.uniform(-2, 9, 50)])
    np.testing.assert_allclose(kernels.bilinear_forward_numba(feat, xy),
                               kernels.bilinear_forward_numpy(feat, xy), rtol=0, atol=1e-12)
    g = rng.standard_normal((50, 4))
    np.testing.assert_allclose(kernels.bilinear_backward_numba(g, xy, 4, 7, 9),
                               kernels.bilinear_backward_numpy(g, xy, 4, 7, 9), rtol=0, atol=1e-12)


def test_env_flag_selects_numpy_path():
    code = ("import epidepth.backend as b; import epidepth.kernels as k; "
            "assert b.BACKEND == 'numpy'; "
            "assert k.conv2d_forward is k.conv2d_forward_numpy")
    proc = subprocess.run([sys.executable, "-c", code],
                          env={"PATH": "/usr/bin:/bin:/usr/local/bin", "EPIDEPTH_NO_NUMBA": "1"},
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        buffers = {
            "feat.stage0.w": rng.standard_normal((4, 2, 3, 3)),
            "feat.stage0.b": rng.standard_normal(4),
            "scalar": np.array(3.14159),
        }
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, buffers)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(buffers)
        for name in buffers:
            assert loaded[name].shape == np.asarray(buffers[name]).shape
            assert np.array_equal(loaded[name], buffers[name])

    def test_manifest_is_text_with_offsets(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"a": np.zeros(3), "b": np.ones((2, 2))})
        lines = (tmp_path / "ckpt.bin.manifest").read_text().strip().splitlines()
        assert lines[0].startswith("epidepth-checkpoint-v1")
        assert lines[1].split() == ["a", "0", "1", "3"]
        assert lines[2].split() == ["b", "24", "2", "2", "2"]

    def test_rejects_foreign_manifest(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"a": np.zeros(3)})
        (tmp_path / "ckpt.bin.manifest").write_text("not-a-checkpoint\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)
