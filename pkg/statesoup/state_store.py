"""
Skill library of labeled state snapshots: flattening, cosine similarity,
nearest-neighbor retrieval, binary persistence and CSV export.
"""

import csv
import logging
from collections import namedtuple

import numpy as np

from statesoup.codec import atomic_output
from statesoup.codec import read_container
from statesoup.codec import write_container
from statesoup.errors import EmptyLibraryError
from statesoup.errors import FormatError
from statesoup.errors import HashMismatchError
from statesoup.errors import ShapeError
from statesoup.errors import ZeroNormError
from statesoup.gated_linear_core import SnapshotMeta
from statesoup.gated_linear_core import StateSnapshot
from statesoup.gated_linear_core import make_layer_state


logger = logging.getLogger(__name__)

LIBRARY_MAGIC = b'SSOUPL1\x00'
LIBRARY_FORMAT_VERSION = 1

STATE_KINDS = ('ssm', 'conv')


################################################################################
# Data structures.
################################################################################
class SkillLibrary(namedtuple(
        'SkillLibrary', ('entries', 'model_hash', 'format_version'))):
    """
    Ordered, immutable collection of StateSnapshots sharing a model hash.
    """
    __slots__ = ()

    @staticmethod
    def create(model_hash, entries=()):
        """
        Create a SkillLibrary, checking every entry against model_hash.

        Arguments:
            model_hash -- The hash shared by all entries.
            entries -- A StateSnapshot iterable; the order is kept.
        """
        entries = tuple(entries)
        for entry in entries:
            if entry.meta.model_hash != model_hash:
                raise HashMismatchError(model_hash, entry.meta.model_hash)
        return SkillLibrary(entries, model_hash, LIBRARY_FORMAT_VERSION)

    @property
    def labels(self):
        """
        Returns the task label of every entry, in order.
        """
        return [entry.meta.task_label for entry in self.entries]


RetrievalQuery = namedtuple(  # pylint: disable=C0103
    'RetrievalQuery', ('query', 'layer_index', 'state_kind'),
    defaults=(0, 'ssm'))


def default_layer_index(num_layers):
    """
    Returns the zero-based index of the ceil(L/2)-th layer (mid-depth).
    """
    return (num_layers + 1) // 2 - 1


################################################################################
# Vectors.
################################################################################
def flatten_state(snapshot, layer_index, kind='ssm'):
    """
    Returns the row-major flattening of one layer's state as float64.

    Arguments:
        snapshot -- A StateSnapshot.
        layer_index -- Zero-based layer index.
        kind -- 'ssm' (D*N values) or 'conv' (W*D values).
    """
    if not 0 <= layer_index < len(snapshot.layers):
        raise ShapeError('layer {0} out of range for {1} layers'.format(
            layer_index, len(snapshot.layers)))
    if kind not in STATE_KINDS:
        raise ValueError('state kind must be one of {0}, got {1!r}'.format(
            STATE_KINDS, kind))
    layer = snapshot.layers[layer_index]
    matrix = layer.ssm if kind == 'ssm' else layer.conv_buf
    return np.ravel(matrix, order='C').astype(np.float64)


def cosine_similarity(u, v):
    """
    Returns u.v / (|u| |v|) clipped to [-1, 1].

    Arguments:
        u -- A real vector.
        v -- A real vector of the same length.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError('vectors must be 1-D and equally long: {0} vs {1}'
                         .format(u.shape, v.shape))
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u == 0 or norm_v == 0:
        raise ZeroNormError('cosine similarity of a zero-norm vector')
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def library_matrix(lib, layer_index, kind='ssm'):
    """
    Returns the (entries, M) matrix of flattened library states.
    """
    return np.stack([
        flatten_state(entry, layer_index, kind) for entry in lib.entries])


def retrieve_nearest(lib, query, **kwargs):
    """
    Returns (entry index, similarity) of the library entry closest to the
    query by cosine similarity; ties go to the lowest index.

    Arguments:
        lib -- A SkillLibrary.
        query -- A RetrievalQuery.

    Keyword arguments:
        matrix -- Precomputed library_matrix for the query's layer and kind.
    """
    if not lib.entries:
        raise EmptyLibraryError('cannot retrieve from an empty library')
    if query.query.meta.model_hash != lib.model_hash:
        raise HashMismatchError(lib.model_hash, query.query.meta.model_hash)

    vector = flatten_state(query.query, query.layer_index, query.state_kind)
    query_norm = np.linalg.norm(vector)
    if query_norm == 0:
        raise ZeroNormError('query state has zero norm')

    matrix = kwargs.get('matrix')
    if matrix is None:
        matrix = library_matrix(lib, query.layer_index, query.state_kind)
    norms = np.linalg.norm(matrix, axis=1)

    # Zero-norm entries carry no evidence and are never returned.
    similarities = np.full(len(norms), -np.inf)
    usable = norms > 0
    similarities[usable] = np.clip(
        matrix[usable] @ vector / (norms[usable] * query_norm), -1.0, 1.0)
    if not np.any(usable):
        raise ZeroNormError('every library entry has zero norm')
    best = int(np.argmax(similarities))
    return best, float(similarities[best])


################################################################################
# Persistence.
################################################################################
def save_library(lib, path):
    """
    Write a SkillLibrary in the SSOUPL1 format.
    """
    entries = []
    named_arrays = []
    for index, entry in enumerate(lib.entries):
        entries.append({
            'meta': entry.meta._asdict(),
            'num_layers': len(entry.layers),
        })
        for layer_index, layer in enumerate(entry.layers):
            prefix = 'entries.{0}.layers.{1}.'.format(index, layer_index)
            named_arrays.append((prefix + 'ssm', layer.ssm))
            named_arrays.append((prefix + 'conv_buf', layer.conv_buf))
            named_arrays.append((prefix + 'log_decay', layer.log_decay))

    header = {
        'format_version': lib.format_version,
        'model_hash': lib.model_hash,
        'entries': entries,
    }
    write_container(path, LIBRARY_MAGIC, header, named_arrays)
    logger.debug('saved %d library entries to %s', len(entries), path)


def load_library(path):
    """
    Read a SkillLibrary written by save_library.
    """
    header, arrays = read_container(
        path, LIBRARY_MAGIC, (LIBRARY_FORMAT_VERSION,))
    try:
        model_hash = header['model_hash']
        entries = []
        for index, entry in enumerate(header['entries']):
            layers = []
            for layer_index in range(entry['num_layers']):
                prefix = 'entries.{0}.layers.{1}.'.format(index, layer_index)
                layers.append(make_layer_state(
                    arrays[prefix + 'ssm'], arrays[prefix + 'conv_buf'],
                    arrays[prefix + 'log_decay']))
            entries.append(StateSnapshot(
                tuple(layers), SnapshotMeta(**entry['meta'])))
    except (KeyError, TypeError) as error:
        raise FormatError('{0}: bad library header: {1}'.format(path, error))
    return SkillLibrary.create(model_hash, entries)


def export_states_csv(lib, layer_index, kind, path):
    """
    Write one CSV row per library entry with its flattened state and
    returns the number of data rows.

    Arguments:
        lib -- A SkillLibrary.
        layer_index -- Zero-based layer index.
        kind -- 'ssm' or 'conv'.
        path -- Output CSV path.
    """
    vectors = [flatten_state(entry, layer_index, kind) for entry in lib.entries]
    width = len(vectors[0]) if vectors else 0
    with atomic_output(path, 'w', newline='') as output_file:
        writer = csv.writer(output_file)
        writer.writerow(
            ['task_label', 'shots', 'token_count']
            + ['v{0}'.format(i) for i in range(width)])
        for entry, vector in zip(lib.entries, vectors):
            writer.writerow(
                [entry.meta.task_label, entry.meta.shots,
                 entry.meta.token_count]
                + ['{0:.9g}'.format(value) for value in vector])
    return len(vectors)
