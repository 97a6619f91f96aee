import numpy as np
import pytest

import vtam.autodiff as ad
from vtam.checkpoint import (CKPT_MAGIC, EPISODE_MAGIC, decode_text, encode_text,
                             load_params, load_tensors, save_params, save_tensors)


def test_roundtrip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "alpha": rng.standard_normal((3, 4)).astype(np.float32),
        "beta.gamma": rng.standard_normal((2, 2, 2)).astype(np.float32),
        "scalar": np.array([1.5], dtype=np.float32),
    }
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_tensors(p1, tensors)
    loaded = load_tensors(p1)
    save_tensors(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_insertion_order_preserved(tmp_path):
    path = tmp_path / "o.ckpt"
    save_tensors(path, {"z": np.zeros(1, np.float32), "a": np.ones(1, np.float32)})
    assert list(load_tensors(path)) == ["z", "a"]


def test_episode_magic_rejected_for_checkpoints(tmp_path):
    path = tmp_path / "e.bin"
    save_tensors(path, {"x": np.zeros(2, np.float32)}, magic=EPISODE_MAGIC)
    with pytest.raises(ValueError, match="magic"):
        load_tensors(path, magic=CKPT_MAGIC)


def test_load_params_checks_shapes(tmp_path):
    path = tmp_path / "p.ckpt"
    params = {"w": ad.parameter(np.zeros((2, 3), np.float32))}
    save_params(path, params, prefix="m.")
    good = {"w": ad.parameter(np.ones((2, 3), np.float32))}
    load_params(path, good, prefix="m.")
    np.testing.assert_array_equal(good["w"].data, np.zeros((2, 3)))
    bad = {"w": ad.parameter(np.zeros((3, 2), np.float32))}
    with pytest.raises(ValueError, match="shape"):
        load_params(path, bad, prefix="m.")
    missing = {"v": ad.parameter(np.zeros(1, np.float32))}
    with pytest.raises(KeyError):
        load_params(path, missing, prefix="m.")


def test_text_tensors_roundtrip():
    s = "config_hash=0123abcd"
    assert decode_text(encode_text(s)) == s


def test_missing_file_has_path_context(tmp_path):
    with pytest.raises(OSError, match="nope.ckpt"):
        load_tensors(tmp_path / "nope.ckpt")
