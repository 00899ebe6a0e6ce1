"""
Synthetic in-context learning tasks in the (question -> answer \\n) format,
randomized-label controls, accuracy evaluation and the chunked corpus used
by the sequential mixing experiment.

Tasks come in families: every task of a family shares the same question
tokens, and each task maps them bijectively onto its own answer tokens, so
only the context tells which mapping is in use.
"""

import json
import logging
import os
from collections import namedtuple

import numpy as np

from statesoup.errors import CorpusError
from statesoup.errors import InsufficientExamplesError
from statesoup.errors import ShapeError
from statesoup.gated_linear_core import process_batch


logger = logging.getLogger(__name__)

ARROW = 254
NEWLINE = 255
RESERVED_TOKENS = (ARROW, NEWLINE)
VOCAB_SIZE = 256

NUM_PAIRS = 64
SMALL_NUM_PAIRS = 48
TASK_KINDS = ('bijection', 'small', 'randomized')

# Stream tags keep the seeded RNG streams of different purposes apart.
_FAMILY_STREAM = 0x51
_TASK_STREAM = 0x52
_CORPUS_STREAM = 0x53
_TEXT_STREAM = 0x54


################################################################################
# Data structures.
################################################################################
class TaskSpec(namedtuple('TaskSpec', (
        'task_id', 'kind', 'seed', 'questions', 'answers', 'randomized'))):
    """
    A synthetic task: questions[i] maps to answers[i]. Example ids are
    indices into questions.
    """
    __slots__ = ()

    @property
    def mapping(self):
        """
        Returns the question to answer mapping as a dict.
        """
        return dict(zip(self.questions, self.answers))

    @property
    def num_examples(self):
        """
        Returns the number of question/answer pairs.
        """
        return len(self.questions)


Demonstration = namedtuple(  # pylint: disable=C0103
    'Demonstration', ('tokens', 'k', 'example_ids'))

CorpusTriple = namedtuple(  # pylint: disable=C0103
    'CorpusTriple', ('c1', 'c2', 'c_test'))


################################################################################
# Tasks.
################################################################################
def _usable_tokens(vocab_size):
    return np.array(
        [token for token in range(vocab_size) if token not in RESERVED_TOKENS])


def family_tokens(family_seed=0, vocab_size=VOCAB_SIZE):
    """
    Returns (question tokens, answer pool) shared by a task family.
    """
    usable = _usable_tokens(vocab_size)
    if len(usable) < 2 * NUM_PAIRS:
        raise ShapeError('vocabulary of {0} is too small for tasks'.format(
            vocab_size))
    rng = np.random.default_rng([_FAMILY_STREAM, family_seed])
    shuffled = rng.permutation(usable)
    return (tuple(int(x) for x in sorted(shuffled[:NUM_PAIRS])),
            tuple(int(x) for x in sorted(shuffled[NUM_PAIRS:])))


def _draw_answers(family_seed, seed, num_pairs, answer_pool, retry=0):
    rng = np.random.default_rng([_TASK_STREAM, family_seed, seed, retry])
    return tuple(int(x) for x in rng.choice(
        answer_pool, size=num_pairs, replace=False))


def make_task(kind, seed, **kwargs):
    """
    Returns a deterministic TaskSpec.

    Arguments:
        kind -- 'bijection' (64 pairs), 'small' (48 pairs) or 'randomized'
                (randomized-label control of the bijection task).
        seed -- Task seed.

    Keyword arguments:
        family_seed -- Seed of the shared question set (default: 0).
        vocab_size -- Vocabulary size (default: 256).
    """
    family_seed = kwargs.get('family_seed', 0)
    vocab_size = kwargs.get('vocab_size', VOCAB_SIZE)
    if kind not in TASK_KINDS:
        raise ValueError('task kind must be one of {0}, got {1!r}'.format(
            TASK_KINDS, kind))
    if kind == 'randomized':
        return randomize_task(make_task(
            'bijection', seed, family_seed=family_seed, vocab_size=vocab_size))

    questions, answer_pool = family_tokens(family_seed, vocab_size)
    num_pairs = NUM_PAIRS if kind == 'bijection' else SMALL_NUM_PAIRS
    questions = questions[:num_pairs]
    answers = _draw_answers(family_seed, seed, num_pairs, answer_pool)

    # Seed 0 is the family reference; other seeds must differ from it.
    if seed != 0:
        reference = _draw_answers(family_seed, 0, num_pairs, answer_pool)
        retry = 1
        while answers == reference:
            answers = _draw_answers(
                family_seed, seed, num_pairs, answer_pool, retry)
            retry += 1

    task_id = '{0}-{1}'.format(kind, seed)
    if family_seed:
        task_id = 'f{0}-{1}'.format(family_seed, task_id)
    return TaskSpec(task_id, kind, seed, questions, answers, False)


def randomize_task(task):
    """
    Returns the randomized-label control of a task: same question and
    answer tokens, but every use draws its answer afresh from the answer
    set, so the pairing carries no information.
    """
    return task._replace(
        task_id=task.task_id + '-randomized', kind='randomized',
        randomized=True)


def resample_task(task, rng, answer_pool=None):
    """
    Returns a task with the same questions mapped by a fresh bijection
    onto distinct tokens of answer_pool (default: the task's own answers).
    """
    pool = np.asarray(task.answers if answer_pool is None else answer_pool)
    if len(pool) < task.num_examples:
        raise InsufficientExamplesError(
            'answer pool of {0} tokens for {1} questions'.format(
                len(pool), task.num_examples))
    answers = rng.choice(pool, size=task.num_examples, replace=False)
    return task._replace(answers=tuple(int(x) for x in answers))


def chance_level(task):
    """
    Returns the accuracy of guessing answers uniformly.
    """
    return 1.0 / len(set(task.answers))


def example_answer(task, example_id, rng):
    """
    Returns the answer token of an example; randomized tasks draw it.
    """
    if task.randomized:
        return int(task.answers[rng.integers(len(task.answers))])
    return int(task.answers[example_id])


def split_examples(task, rng, fraction=0.5):
    """
    Returns (library ids, held-out ids) partitioning a task's examples.

    Arguments:
        task -- A TaskSpec.
        rng -- A numpy Generator.
        fraction -- Share of examples going to the library side.
    """
    order = rng.permutation(task.num_examples)
    cut = int(round(fraction * task.num_examples))
    return (tuple(int(x) for x in sorted(order[:cut])),
            tuple(int(x) for x in sorted(order[cut:])))


################################################################################
# Demonstrations and evaluation.
################################################################################
def _draw_ids(available, count, rng, allow_repeats):
    if count > len(available) and (not allow_repeats or not available):
        raise InsufficientExamplesError(
            '{0} examples requested, {1} available'.format(
                count, len(available)))
    ids = []
    while len(ids) < count:
        ids.extend(int(x) for x in rng.permutation(available))
    return ids[:count]


def sample_demonstrations(task, k, rng, exclude=frozenset(), **kwargs):
    """
    Returns a k-shot Demonstration formatted q, ARROW, a, NEWLINE per
    example, with k distinct examples not in exclude.

    Arguments:
        task -- A TaskSpec.
        k -- Number of examples.
        rng -- A numpy Generator.
        exclude -- Example ids that must not be used.

    Keyword arguments:
        allow_repeats -- Cycle through the available examples when k exceeds
                         them instead of raising (default: False).
    """
    allow_repeats = kwargs.get('allow_repeats', False)
    if k < 0:
        raise ValueError('k must be >= 0, got {0}'.format(k))
    exclude = frozenset(exclude)
    available = [i for i in range(task.num_examples) if i not in exclude]
    example_ids = _draw_ids(available, k, rng, allow_repeats)

    tokens = []
    for example_id in example_ids:
        tokens.extend((
            task.questions[example_id], ARROW,
            example_answer(task, example_id, rng), NEWLINE))
    return Demonstration(tokens, k, tuple(example_ids))


def eval_icl_accuracy(model, init, task, n_samples, rng,
                      exclude=frozenset(), **kwargs):
    """
    Returns the fraction of test queries answered correctly from a state.

    Each query feeds [q, ARROW] from init; it is correct when the argmax of
    the logits after ARROW (lowest token id on ties) is the answer.

    Arguments:
        model -- ModelParams.
        init -- The StateSnapshot holding the in-context examples.
        task -- A TaskSpec.
        n_samples -- Number of test queries; examples are reused only when
                     n_samples exceeds the available ones.
        rng -- A numpy Generator.
        exclude -- Example ids not usable as test queries.

    Keyword arguments:
        batch_size -- Queries per forward pass (default: 256).
    """
    batch_size = kwargs.get('batch_size', 256)

    # For testing.
    _process_batch = kwargs.get('_process_batch', process_batch)

    if n_samples < 1:
        raise ValueError('n_samples must be >= 1, got {0}'.format(n_samples))
    exclude = frozenset(exclude)
    available = [i for i in range(task.num_examples) if i not in exclude]
    if not available:
        raise InsufficientExamplesError('exclusion leaves no test queries')
    test_ids = _draw_ids(available, n_samples, rng, allow_repeats=True)
    expected = np.array([example_answer(task, i, rng) for i in test_ids])
    queries = np.array([[task.questions[i], ARROW] for i in test_ids])

    correct = 0
    for start in range(0, n_samples, batch_size):
        rows = queries[start:start + batch_size]
        _, logits = _process_batch(model, [init] * len(rows), rows)
        predicted = np.argmax(np.asarray(logits)[:, -1], axis=-1)
        correct += int(np.sum(predicted == expected[start:start + batch_size]))
    return correct / float(n_samples)


def dump_task_json(task, output_file):
    """
    Dump a task as one JSON line for audit.

    Arguments:
        task -- A TaskSpec.
        output_file -- A file to output.
    """
    record = {
        'task_id': task.task_id,
        'kind': task.kind,
        'seed': task.seed,
        'randomized': task.randomized,
        'mapping': [[q, a] for q, a in zip(task.questions, task.answers)],
    }
    json.dump(record, output_file, ensure_ascii=False, sort_keys=True)
    output_file.write(os.linesep)


################################################################################
# Sequential corpus.
################################################################################
def _markov_tables(rng, num_topics, alphabet_size, branching, vocab_size):
    usable = _usable_tokens(vocab_size)
    alphabets = np.stack([
        rng.choice(usable, size=alphabet_size, replace=False)
        for _ in range(num_topics)])
    successors = rng.integers(
        alphabet_size, size=(num_topics, alphabet_size, alphabet_size,
                             branching))
    probabilities = rng.dirichlet(
        np.full(branching, 0.5), size=(num_topics, alphabet_size,
                                       alphabet_size))
    return alphabets, successors, np.cumsum(probabilities, axis=-1)


def _synthetic_corpus(seed, n_sequences, chunk_len, **kwargs):
    num_topics = kwargs.get('num_topics', 8)
    alphabet_size = kwargs.get('alphabet_size', 32)
    branching = kwargs.get('branching', 4)
    vocab_size = kwargs.get('vocab_size', VOCAB_SIZE)
    split = kwargs.get('split', 0)

    # The chains depend on the seed only; the split picks the sequences.
    alphabets, successors, cumulative = _markov_tables(
        np.random.default_rng([_CORPUS_STREAM, seed]),
        num_topics, alphabet_size, branching, vocab_size)
    rng = np.random.default_rng([_CORPUS_STREAM, seed, split + 1])

    length = 3 * chunk_len
    triples = []
    for _ in range(n_sequences):
        topic = rng.integers(num_topics)
        symbols = np.empty(length, dtype=np.int64)
        symbols[:2] = rng.integers(alphabet_size, size=2)
        draws = rng.random(length)
        for position in range(2, length):
            context = (topic, symbols[position - 2], symbols[position - 1])
            choice = np.searchsorted(
                cumulative[context], draws[position],
                side='right')
            symbols[position] = successors[context][min(choice, branching - 1)]
        tokens = alphabets[topic][symbols]
        triples.append(_split_triple(tokens, chunk_len))
    return triples


def _split_triple(tokens, chunk_len):
    tokens = np.asarray(tokens, dtype=np.int64)
    return CorpusTriple(
        tokens[:chunk_len], tokens[chunk_len:2 * chunk_len],
        tokens[2 * chunk_len:3 * chunk_len])


def _text_corpus(path, n_sequences, chunk_len, **kwargs):
    seed = kwargs.get('seed', 0)
    try:
        with open(path, 'rb') as input_file:
            data = np.frombuffer(input_file.read(), dtype=np.uint8)
    except OSError as error:
        raise CorpusError('cannot read corpus {0}: {1}'.format(path, error))

    length = 3 * chunk_len
    if len(data) < length:
        raise CorpusError('{0} has {1} bytes, needs at least {2}'.format(
            path, len(data), length))
    if len(data) >= n_sequences * length:
        starts = [i * length for i in range(n_sequences)]
    else:
        logger.warning(
            '%s holds fewer than %d disjoint windows; windows overlap',
            path, n_sequences)
        rng = np.random.default_rng([_TEXT_STREAM, seed])
        starts = rng.integers(len(data) - length + 1, size=n_sequences)
    return [_split_triple(data[start:start + length], chunk_len)
            for start in starts]


def make_sequential_corpus(source, seed_or_path, n_sequences, chunk_len,
                           **kwargs):
    """
    Returns n_sequences CorpusTriples (c1, c2, c_test) of chunk_len tokens.

    Arguments:
        source -- 'synthetic' (seeded topic-mixture order-2 Markov chains)
                  or 'text-file' (raw bytes of a file).
        seed_or_path -- The seed for 'synthetic', the path for 'text-file'.
        n_sequences -- Number of triples.
        chunk_len -- Tokens per chunk.

    Keyword arguments:
        num_topics, alphabet_size, branching -- Synthetic chain shape.
        split -- Synthetic sequence stream; splits share the chains.
        seed -- Window seed for short text files.
    """
    if n_sequences < 1 or chunk_len < 1:
        raise CorpusError('n_sequences and chunk_len must be >= 1')
    if source == 'synthetic':
        return _synthetic_corpus(seed_or_path, n_sequences, chunk_len, **kwargs)
    if source == 'text-file':
        return _text_corpus(seed_or_path, n_sequences, chunk_len, **kwargs)
    raise CorpusError('unknown corpus source {0!r}'.format(source))
