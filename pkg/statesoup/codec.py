"""
Versioned binary container shared by model and library files, and atomic
file output.

A container is laid out as:

    magic (8 bytes)
    header length (little-endian unsigned 64-bit)
    header (UTF-8 JSON, carries "format_version" and a "tensors" manifest)
    payload (raw little-endian tensors in manifest order)
"""

import contextlib
import json
import os
import struct
import tempfile

import numpy as np

from statesoup.errors import FormatError
from statesoup.errors import TruncatedFileError
from statesoup.errors import UnsupportedVersionError


HEADER_LENGTH_FORMAT = struct.Struct('<Q')
MAGIC_LENGTH = 8

# Only these payload dtypes are written; byte order is always explicit.
PAYLOAD_DTYPES = ('<f4', '<f8')


################################################################################
# Atomic output.
################################################################################
@contextlib.contextmanager
def atomic_output(path, mode='w', **kwargs):
    """
    Open a temporary file next to path and move it over path on success.

    Arguments:
        path -- The final output path.
        mode -- 'w' for text or 'wb' for binary output.

    Keyword arguments are passed to io.open (eg. newline='').
    """
    directory = os.path.dirname(os.path.abspath(path))
    handle, tmp_path = tempfile.mkstemp(
        prefix='.' + os.path.basename(path) + '.', dir=directory)
    try:
        with os.fdopen(handle, mode, **kwargs) as output_file:
            yield output_file
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


################################################################################
# Container.
################################################################################
def build_manifest(named_arrays):
    """
    Returns the tensor manifest for (name, array) pairs.

    Arguments:
        named_arrays -- (name, numpy array) pairs in payload order.
    """
    manifest = []
    offset = 0
    for name, array in named_arrays:
        dtype = array.dtype.newbyteorder('<').str
        if dtype not in PAYLOAD_DTYPES:
            raise FormatError(
                'tensor {0!r} has unsupported dtype {1}'.format(name, dtype))
        nbytes = int(array.size) * array.dtype.itemsize
        manifest.append({
            'name': name,
            'shape': list(array.shape),
            'dtype': dtype,
            'offset': offset,
            'nbytes': nbytes,
        })
        offset += nbytes
    return manifest


def write_container(path, magic, header, named_arrays):
    """
    Write a container file atomically.

    Arguments:
        path -- Output path.
        magic -- The 8-byte file magic.
        header -- A JSON-serializable dict; "tensors" is filled in here.
        named_arrays -- (name, numpy array) pairs in payload order.
    """
    if len(magic) != MAGIC_LENGTH:
        raise FormatError('magic must be 8 bytes: {0!r}'.format(magic))
    named_arrays = list(named_arrays)
    header = dict(header, tensors=build_manifest(named_arrays))
    encoded_header = json.dumps(
        header, sort_keys=True, ensure_ascii=False).encode('utf-8')

    with atomic_output(path, 'wb') as output_file:
        output_file.write(magic)
        output_file.write(HEADER_LENGTH_FORMAT.pack(len(encoded_header)))
        output_file.write(encoded_header)
        for (_, array), entry in zip(named_arrays, header['tensors']):
            output_file.write(
                np.ascontiguousarray(array, dtype=entry['dtype']).tobytes())


def read_container(path, magic, accepted_versions):
    """
    Read a container file and returns (header, {name: array}).

    Arrays are read-only views of the payload.

    Arguments:
        path -- Input path.
        magic -- The expected 8-byte magic.
        accepted_versions -- Format versions this reader understands.
    """
    with open(path, 'rb') as input_file:
        data = input_file.read()
    return decode_container(data, magic, accepted_versions, source=path)


def decode_container(data, magic, accepted_versions, source='<bytes>'):
    """
    Decode container bytes; see read_container.
    """
    if data[:MAGIC_LENGTH] != magic:
        raise FormatError('{0}: bad magic {1!r}, expected {2!r}'.format(
            source, data[:MAGIC_LENGTH], magic))

    prefix_end = MAGIC_LENGTH + HEADER_LENGTH_FORMAT.size
    if len(data) < prefix_end:
        raise TruncatedFileError('{0}: missing header length'.format(source))
    (header_length,) = HEADER_LENGTH_FORMAT.unpack(
        data[MAGIC_LENGTH:prefix_end])
    header_end = prefix_end + header_length
    if len(data) < header_end:
        raise TruncatedFileError('{0}: header cut short'.format(source))
    try:
        header = json.loads(data[prefix_end:header_end].decode('utf-8'))
    except ValueError as error:
        raise FormatError('{0}: unreadable header: {1}'.format(source, error))
    if not isinstance(header, dict):
        raise FormatError('{0}: header is not an object'.format(source))

    version = header.get('format_version')
    if version not in accepted_versions:
        raise UnsupportedVersionError(version, accepted_versions)

    manifest = header.get('tensors', [])
    if not isinstance(manifest, list):
        raise FormatError('{0}: tensor manifest is not a list'.format(source))
    payload = memoryview(data)[header_end:]
    try:
        arrays = _decode_payload(manifest, payload, source)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as error:
        raise FormatError('{0}: malformed manifest: {1!r}'.format(
            source, error))
    return header, arrays


def _decode_payload(manifest, payload, source):
    expected_length = sum(int(entry['nbytes']) for entry in manifest)
    if len(payload) != expected_length:
        raise TruncatedFileError(
            '{0}: payload has {1} bytes, manifest declares {2}'.format(
                source, len(payload), expected_length))

    arrays = {}
    offset = 0
    for entry in manifest:
        if entry['offset'] != offset or entry['dtype'] not in PAYLOAD_DTYPES:
            raise FormatError(
                '{0}: bad manifest entry {1!r}'.format(source, entry['name']))
        count = int(np.prod(entry['shape'], dtype=np.int64))
        nbytes = count * np.dtype(entry['dtype']).itemsize
        if count < 0 or nbytes != entry['nbytes']:
            raise FormatError(
                '{0}: tensor {1!r} size disagrees with its shape'.format(
                    source, entry['name']))
        array = np.frombuffer(
            payload, dtype=entry['dtype'], count=count, offset=offset)
        arrays[entry['name']] = array.reshape(entry['shape'])
        offset += entry['nbytes']
    return arrays
