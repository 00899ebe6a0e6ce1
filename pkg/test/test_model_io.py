"""
Tests for statesoup.gated_linear_core.save_model and load_model.
"""

import pytest
import torch

from statesoup.codec import HEADER_LENGTH_FORMAT
from statesoup.codec import write_container
from statesoup.errors import FormatError
from statesoup.errors import TruncatedFileError
from statesoup.errors import UnsupportedVersionError
from statesoup.gated_linear_core import MODEL_MAGIC
from statesoup.gated_linear_core import load_model
from statesoup.gated_linear_core import save_model
from statesoup.state_store import LIBRARY_MAGIC

from helpers import STACKED_CONFIG
from helpers import tiny_model


def test_normal(tmp_path):
    """
    Test that a saved model loads back unchanged.
    """
    model = tiny_model(STACKED_CONFIG, seed=7)
    path = str(tmp_path / 'model.ssm')
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.seed == 7
    assert loaded.model_hash == model.model_hash
    assert list(loaded.tensors) == list(model.tensors)
    for name, tensor in model.tensors.items():
        assert torch.equal(loaded.tensors[name], tensor)


def test_magic(tmp_path):
    """
    Test that the file starts with the model magic.
    """
    path = tmp_path / 'model.ssm'
    save_model(tiny_model(), str(path))
    assert path.read_bytes()[:8] == MODEL_MAGIC


def test_bad_magic(tmp_path):
    """
    Test for a file of another kind.
    """
    path = tmp_path / 'library.ssl'
    write_container(str(path), LIBRARY_MAGIC, {'format_version': 1}, [])
    with pytest.raises(FormatError):
        load_model(str(path))


def test_truncated(tmp_path):
    """
    Test for a payload cut short.
    """
    path = tmp_path / 'model.ssm'
    save_model(tiny_model(), str(path))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncatedFileError):
        load_model(str(path))


def test_unsupported_version(tmp_path):
    """
    Test for a newer format version.
    """
    path = tmp_path / 'model.ssm'
    write_container(str(path), MODEL_MAGIC, {'format_version': 2}, [])
    with pytest.raises(UnsupportedVersionError) as error:
        load_model(str(path))
    assert error.value.version == 2


def test_missing_tensor(tmp_path):
    """
    Test for a manifest that disagrees with the config.
    """
    model = tiny_model()
    path = tmp_path / 'model.ssm'
    header = {
        'format_version': 1,
        'config': model.config._asdict(),
        'seed': 0,
    }
    arrays = [(name, tensor.numpy()) for name, tensor in model.tensors.items()]
    write_container(str(path), MODEL_MAGIC, header, arrays[:-1])
    with pytest.raises(FormatError):
        load_model(str(path))


@pytest.mark.parametrize('header', [
    b'[1, 2, 3]',
    b'{"format_version": 1, "tensors": {"x": 1}}',
    b'{"format_version": 1, "tensors": [{"name": "x"}]}',
    b'{"format_version": 1, "tensors": [7]}',
    b'{"format_version": 1, "tensors": [{"name": "x", "nbytes": 0,'
    b' "offset": 0, "dtype": "<f4", "shape": "ab"}]}',
    b'{"format_version": 1, "tensors": [], "config": {}, "seed": "x"}',
])
def test_malformed_header(tmp_path, header):
    """
    Test that readable JSON with a broken layout is a format error.
    """
    path = tmp_path / 'model.ssm'
    path.write_bytes(
        MODEL_MAGIC + HEADER_LENGTH_FORMAT.pack(len(header)) + header)
    with pytest.raises(FormatError):
        load_model(str(path))
