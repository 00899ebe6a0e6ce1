"""
Tests for statesoup.state_store.save_library and load_library.
"""

import numpy as np
import pytest

from statesoup.codec import HEADER_LENGTH_FORMAT
from statesoup.errors import FormatError
from statesoup.errors import TruncatedFileError
from statesoup.gated_linear_core import save_model
from statesoup.state_store import LIBRARY_MAGIC
from statesoup.state_store import SkillLibrary
from statesoup.state_store import load_library
from statesoup.state_store import save_library

from helpers import make_snapshot
from helpers import tiny_model


def _library():
    rng = np.random.default_rng(0)
    return SkillLibrary.create('h', [
        make_snapshot(
            rng.normal(size=(3, 2)), 'bijection-1', shots=32, token_count=128,
            conv_buf=rng.normal(size=(2, 3)), log_decay=-rng.random((3, 2))),
        make_snapshot(rng.normal(size=(3, 2)), 'small-2', shots=4),
    ])


def test_normal(tmp_path):
    """
    Test that a saved library loads back unchanged and in order.
    """
    lib = _library()
    path = str(tmp_path / 'library.ssl')
    save_library(lib, path)
    loaded = load_library(path)
    assert loaded.model_hash == 'h'
    assert loaded.format_version == lib.format_version
    assert loaded.labels == ['bijection-1', 'small-2']
    for ours, theirs in zip(loaded.entries, lib.entries):
        assert ours.meta == theirs.meta
        for layer, expected in zip(ours.layers, theirs.layers):
            np.testing.assert_array_equal(layer.ssm, expected.ssm)
            np.testing.assert_array_equal(layer.conv_buf, expected.conv_buf)
            np.testing.assert_array_equal(layer.log_decay, expected.log_decay)
            assert layer.log_decay.dtype == np.float64


def test_empty(tmp_path):
    """
    Test for a library without entries.
    """
    path = str(tmp_path / 'library.ssl')
    save_library(SkillLibrary.create('h'), path)
    assert load_library(path).entries == ()


def test_magic(tmp_path):
    """
    Test that the file starts with the library magic.
    """
    path = tmp_path / 'library.ssl'
    save_library(_library(), str(path))
    assert path.read_bytes()[:8] == LIBRARY_MAGIC


def test_model_file(tmp_path):
    """
    Test for a model file given as a library.
    """
    path = str(tmp_path / 'model.ssm')
    save_model(tiny_model(), path)
    with pytest.raises(FormatError):
        load_library(path)


def test_truncated(tmp_path):
    """
    Test for a payload cut short.
    """
    path = tmp_path / 'library.ssl'
    save_library(_library(), str(path))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        load_library(str(path))


def test_no_partial_file(tmp_path):
    """
    Test that a failed save leaves no file behind.
    """
    path = tmp_path / 'library.ssl'
    broken = SkillLibrary(
        (make_snapshot(np.ones((2, 2)), 'a'),), 'h', 1)
    broken = broken._replace(entries=(broken.entries[0]._replace(
        layers=(broken.entries[0].layers[0]._replace(
            ssm=np.ones((2, 2), dtype=np.int64)),)),))
    with pytest.raises(FormatError):
        save_library(broken, str(path))
    assert list(tmp_path.iterdir()) == []


@pytest.mark.parametrize('header', [
    b'"library"',
    b'{"format_version": 1, "tensors": null}',
    b'{"format_version": 1, "tensors": [{"nbytes": 4}]}',
    b'{"format_version": 1, "tensors": []}',
    b'{"format_version": 1, "tensors": [], "model_hash": "h",'
    b' "entries": [3]}',
])
def test_malformed_header(tmp_path, header):
    """
    Test that readable JSON with a broken layout is a format error.
    """
    path = tmp_path / 'library.ssl'
    path.write_bytes(
        LIBRARY_MAGIC + HEADER_LENGTH_FORMAT.pack(len(header)) + header)
    with pytest.raises(FormatError):
        load_library(str(path))
