#!/usr/bin/env python

"""
Experiment runners over state libraries and soups, and the command line
entry point.
"""

import argparse
import csv
import json
import logging
import os
import sys
from collections import OrderedDict
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import stats

from statesoup import __version__
from statesoup.codec import atomic_output
from statesoup.errors import ConfigError
from statesoup.errors import HashMismatchError
from statesoup.errors import InsufficientExamplesError
from statesoup.errors import StateSoupError
from statesoup.gated_linear_core import ModelConfig
from statesoup.gated_linear_core import batch_sequence_loss
from statesoup.gated_linear_core import boundary_state
from statesoup.gated_linear_core import load_model
from statesoup.gated_linear_core import process_batch
from statesoup.gated_linear_core import save_model
from statesoup.gated_linear_core import zero_state
from statesoup.icl_tasks import TASK_KINDS
from statesoup.icl_tasks import chance_level
from statesoup.icl_tasks import dump_task_json
from statesoup.icl_tasks import eval_icl_accuracy
from statesoup.icl_tasks import make_sequential_corpus
from statesoup.icl_tasks import make_task
from statesoup.icl_tasks import sample_demonstrations
from statesoup.icl_tasks import split_examples
from statesoup.soup_mixing import STRATEGY_ALIASES
from statesoup.soup_mixing import MixRecipe
from statesoup.soup_mixing import a_decay_combine
from statesoup.soup_mixing import mean_mix
from statesoup.soup_mixing import mix_states
from statesoup.state_store import STATE_KINDS
from statesoup.state_store import RetrievalQuery
from statesoup.state_store import SkillLibrary
from statesoup.state_store import default_layer_index
from statesoup.state_store import export_states_csv
from statesoup.state_store import library_matrix
from statesoup.state_store import load_library
from statesoup.state_store import retrieve_nearest
from statesoup.state_store import save_library
from statesoup.trainer import TrainConfig
from statesoup.trainer import train
from statesoup.trainer import validate_train_config


logger = logging.getLogger(__name__)

DEFAULT_TASKS = (
    ('bijection', 0), ('bijection', 1), ('small', 2),
    ('bijection', 3), ('bijection', 4), ('bijection', 5),
)
DEFAULT_CONTROLS = (('randomized', 0),)

# Tags of the per-cell RNG streams.
_SPLIT = 1
_LIBRARY = 2
_RETRIEVAL = 3
_SHUFFLE = 4
_MIXING = 5
_RETRIEVE_MIX = 6
_EVALUATION = 7
_ICL = 8

# Corpus splits sharing one set of synthetic chains.
TRAIN_SPLIT = 0
EVAL_SPLIT = 1

RETRIEVAL_COLUMNS = (
    'task', 'k', 'n_queries', 'same_task_rate', 'shuffled_rate',
    'mean_similarity')
MIXING_COLUMNS = (
    'task', 'k', 'n_states', 'total_shots', 'n_test', 'baseline_accuracy',
    'soup_accuracy')
RETRIEVE_MIX_COLUMNS = (
    'task', 'k', 'condition', 'n_queries', 'n_test', 'accuracy',
    'same_task_rate')
SEQUENTIAL_COLUMNS = ('condition', 'mean_nll', 'stderr', 'n_sequences')
ICL_COLUMNS = (
    'task', 'k', 'randomized', 'n_test', 'accuracy', 'chance', 'p_value')

SEQUENTIAL_CONDITIONS = ('sequential', 'c2_only', 'mean_mix', 'a_decay')

# Extra sequential row, written only when the A-decay suffix carries conv.
FROM_ZERO_CONDITION = 'a_decay_from_zero'


################################################################################
# Configuration.
################################################################################
ExperimentConfig = namedtuple(  # pylint: disable=C0103
    'ExperimentConfig',
    ('model_path', 'library_path', 'tasks', 'controls', 'states_per_task',
     'library_shots', 'query_shots', 'queries_per_cell', 'n_test',
     'total_shots', 'chunk_len', 'n_sequences', 'corpus_source',
     'corpus_path', 'seed', 'family_seed', 'output_dir', 'layer',
     'state_kind', 'strategy', 'mix_weights', 'library_fraction',
     'test_reserve', 'carry_conv', 'allow_repeats', 'eval_batch',
     'workers'),
    defaults=(
        None, None, DEFAULT_TASKS, DEFAULT_CONTROLS, 10,
        32, (1, 2, 4, 8, 16, 32), 10, 500,
        32, 100, 1000, 'synthetic',
        None, 0, 0, 'out', None,
        'ssm', 'mean', None, 0.5,
        8, True, True, 256,
        1))


def validate_experiment_config(cfg):
    """
    Raise ConfigError unless cfg satisfies the ExperimentConfig invariants.
    """
    if not cfg.query_shots or not cfg.tasks:
        raise ConfigError('task list and shot schedule must be non-empty')
    counts = (
        ('states_per_task', cfg.states_per_task),
        ('library_shots', cfg.library_shots),
        ('queries_per_cell', cfg.queries_per_cell),
        ('n_test', cfg.n_test), ('total_shots', cfg.total_shots),
        ('chunk_len', cfg.chunk_len), ('n_sequences', cfg.n_sequences),
        ('eval_batch', cfg.eval_batch), ('workers', cfg.workers),
    ) + tuple(('query_shots', k) for k in cfg.query_shots)
    for name, value in counts:
        if not isinstance(value, int) or value < 1:
            raise ConfigError('{0} must be an integer >= 1, got {1!r}'.format(
                name, value))
    for kind, _ in tuple(cfg.tasks) + tuple(cfg.controls):
        if kind not in TASK_KINDS:
            raise ConfigError('unknown task kind {0!r}'.format(kind))
    if cfg.strategy not in STRATEGY_ALIASES:
        raise ConfigError('unknown strategy {0!r}'.format(cfg.strategy))
    if cfg.state_kind not in STATE_KINDS:
        raise ConfigError('unknown state kind {0!r}'.format(cfg.state_kind))
    if not 0.0 < cfg.library_fraction < 1.0:
        raise ConfigError('library_fraction must lie in (0, 1)')
    if cfg.test_reserve < 0:
        raise ConfigError('test_reserve must be >= 0')


def _task_pairs(value):
    pairs = []
    for item in value:
        if isinstance(item, dict):
            pairs.append((item['kind'], int(item['seed'])))
        else:
            kind, seed = item
            pairs.append((kind, int(seed)))
    return tuple(pairs)


def _section(record_type, values, name):
    unknown = set(values) - set(record_type._fields)
    if unknown:
        raise ConfigError('unknown {0} keys: {1}'.format(
            name, ', '.join(sorted(unknown))))
    return record_type(**values)


def load_config(path=None):
    """
    Returns (ModelConfig, TrainConfig, ExperimentConfig) from a JSON file
    with optional "model", "train" and "experiment" sections.

    Arguments:
        path -- JSON config path, or None for all defaults.
    """
    data = {}
    if path is not None:
        with open(path) as input_file:
            try:
                data = json.load(input_file)
            except ValueError as error:
                raise ConfigError('{0}: {1}'.format(path, error))
    unknown = set(data) - {'model', 'train', 'experiment'}
    if unknown:
        raise ConfigError('unknown config sections: {0}'.format(
            ', '.join(sorted(unknown))))

    model_config = _section(ModelConfig, data.get('model', {}), 'model')
    train_values = dict(data.get('train', {}))
    if 'betas' in train_values:
        train_values['betas'] = tuple(train_values['betas'])
    tconfig = _section(TrainConfig, train_values, 'train')

    values = dict(data.get('experiment', {}))
    for key in ('tasks', 'controls'):
        if key in values:
            values[key] = _task_pairs(values[key])
    for key in ('query_shots', 'mix_weights'):
        if values.get(key) is not None:
            values[key] = tuple(values[key])
    cfg = _section(ExperimentConfig, values, 'experiment')
    return model_config, tconfig, cfg


def make_tasks(pairs, family_seed=0):
    """
    Returns TaskSpecs for (kind, seed) pairs.
    """
    return [make_task(kind, seed, family_seed=family_seed)
            for kind, seed in pairs]


################################################################################
# Inner functions.
################################################################################
def _rng(cfg, stream, *keys):
    return np.random.default_rng([cfg.seed, stream] + [int(k) for k in keys])


def _task_key(task):
    return (task.seed, TASK_KINDS.index(task.kind))


def task_split(task, cfg):
    """
    Returns (library ids, held-out ids) of a task; fixed for a config.
    """
    rng = _rng(cfg, _SPLIT, cfg.family_seed, *_task_key(task))
    return split_examples(task, rng, cfg.library_fraction)


def resolve_layer(cfg, config):
    """
    Returns the layer index used for retrieval.
    """
    layer = default_layer_index(config.num_layers) \
        if cfg.layer is None else cfg.layer
    if not 0 <= layer < config.num_layers:
        raise ConfigError('layer {0} out of range for {1} layers'.format(
            layer, config.num_layers))
    return layer


def demonstration_states(model, task, demos, **kwargs):
    """
    Returns the states after processing each demonstration from zero,
    labeled with the task id and shot count.

    Arguments:
        model -- ModelParams.
        task -- The TaskSpec the demonstrations come from.
        demos -- Demonstrations of equal length.
    """
    # For testing.
    _process_batch = kwargs.get('_process_batch', process_batch)

    if not demos:
        return []
    zero = zero_state(model.config)
    rows = np.array([demo.tokens for demo in demos], dtype=np.int64)
    rows = rows.reshape(len(demos), -1)
    states, _ = _process_batch(model, [zero] * len(demos), rows)
    return [
        state._replace(meta=state.meta._replace(
            task_label=task.task_id, shots=demo.k))
        for state, demo in zip(states, demos)]


def _soup(states, cfg):
    strategy = STRATEGY_ALIASES[cfg.strategy]
    weights = cfg.mix_weights if strategy == 'weighted' else None
    return mix_states(states, MixRecipe(strategy, weights))


def _clip_test(cfg, task, num_excluded):
    available = task.num_examples - num_excluded
    if available < 1:
        raise InsufficientExamplesError(
            '{0}: no test queries left'.format(task.task_id))
    if task.randomized:
        # Fresh labels make repeated queries independent trials.
        return cfg.n_test
    if cfg.n_test > available:
        logger.warning('%s: n_test clipped from %d to %d',
                       task.task_id, cfg.n_test, available)
    return min(cfg.n_test, available)


def _map_cells(cfg, func, cells):
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            return list(executor.map(func, cells))
    return [func(cell) for cell in cells]


def _macro_rows(rows, keys, values):
    groups = OrderedDict()
    for row in rows:
        groups.setdefault(tuple(row[key] for key in keys), []).append(row)
    macro = []
    for group_key, members in groups.items():
        record = OrderedDict(zip(keys, group_key))
        record['n_tasks'] = len(members)
        for value in values:
            record[value] = float(np.mean([member[value] for member in members]))
        record['aggregation'] = 'macro'
        macro.append(record)
    return macro


def _metadata(model, tasks, cfg):
    return {
        'scale': 'desk-scale toy model',
        'statesoup_version': __version__,
        'model_hash': model.model_hash,
        'model_config': model.config._asdict(),
        'model_seed': model.seed,
        'tasks': [
            {'task_id': task.task_id, 'kind': task.kind, 'seed': task.seed}
            for task in tasks],
        'experiment': cfg._asdict(),
    }


def write_table(path, columns, rows, metadata=None):
    """
    Write rows as CSV atomically, with an optional <path>.meta.json sidecar.

    Arguments:
        path -- Output CSV path.
        columns -- Column names in order.
        rows -- Dicts keyed by column name.
        metadata -- A JSON-serializable dict.
    """
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        os.makedirs(directory)
    with atomic_output(path, 'w', newline='') as output_file:
        writer = csv.DictWriter(
            output_file, fieldnames=list(columns), extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    if metadata is not None:
        with atomic_output(os.path.splitext(path)[0] + '.meta.json') \
                as output_file:
            json.dump(metadata, output_file, indent=2, sort_keys=True)
            output_file.write(os.linesep)
    logger.info('wrote %d rows to %s', len(rows), path)


def _output(cfg, name):
    if cfg.output_dir is None:
        return None
    return os.path.join(cfg.output_dir, name)


################################################################################
# Experiment runners.
################################################################################
def build_library(model, tasks, cfg, **kwargs):
    """
    Returns a SkillLibrary of cfg.states_per_task states per task, each from
    a cfg.library_shots demonstration over the task's library half.

    Arguments:
        model -- ModelParams.
        tasks -- TaskSpec list.
        cfg -- ExperimentConfig.
    """
    entries = []
    for task in tasks:
        library_ids, heldout_ids = task_split(task, cfg)
        if cfg.library_shots > len(library_ids):
            if not cfg.allow_repeats:
                raise InsufficientExamplesError(
                    '{0}: {1}-shot library states need {1} library examples,'
                    ' {2} available'.format(
                        task.task_id, cfg.library_shots, len(library_ids)))
            logger.warning('%s: library demonstrations repeat examples',
                           task.task_id)
        rng = _rng(cfg, _LIBRARY, cfg.family_seed, *_task_key(task))
        demos = [
            sample_demonstrations(
                task, cfg.library_shots, rng, exclude=heldout_ids,
                allow_repeats=cfg.allow_repeats)
            for _ in range(cfg.states_per_task)]
        entries.extend(demonstration_states(model, task, demos, **kwargs))
        logger.info('library: %d states for %s', len(demos), task.task_id)
    return SkillLibrary.create(model.model_hash, entries)


def run_retrieval_experiment(model, lib, cfg, **kwargs):
    """
    Returns rows of the same-task top-1 retrieval rate per task and k.

    Query states come from k-shot demonstrations over each task's held-out
    half. shuffled_rate repeats the scoring against library labels permuted
    at random (the chance baseline).

    Arguments:
        model -- ModelParams.
        lib -- SkillLibrary built by build_library.
        cfg -- ExperimentConfig; the task list is cfg.tasks.

    Keyword arguments:
        tasks -- TaskSpec list overriding cfg.tasks.
    """
    tasks = kwargs.get('tasks') or make_tasks(cfg.tasks, cfg.family_seed)

    # For testing.
    _demonstration_states = kwargs.get(
        '_demonstration_states', demonstration_states)

    if lib.model_hash != model.model_hash:
        raise HashMismatchError(model.model_hash, lib.model_hash)
    layer = resolve_layer(cfg, model.config)
    matrix = library_matrix(lib, layer, cfg.state_kind)
    labels = lib.labels
    shuffled_labels = list(_rng(cfg, _SHUFFLE).permutation(labels))

    def run_cell(cell):
        """ One (task, k) cell. """
        task, k = cell
        library_ids, _ = task_split(task, cfg)
        rng = _rng(cfg, _RETRIEVAL, cfg.family_seed, *(_task_key(task) + (k,)))
        demos = [
            sample_demonstrations(
                task, k, rng, exclude=library_ids,
                allow_repeats=cfg.allow_repeats)
            for _ in range(cfg.queries_per_cell)]
        hits = shuffled_hits = 0
        similarities = []
        for query in _demonstration_states(model, task, demos):
            index, similarity = retrieve_nearest(
                lib, RetrievalQuery(query, layer, cfg.state_kind),
                matrix=matrix)
            hits += labels[index] == task.task_id
            shuffled_hits += shuffled_labels[index] == task.task_id
            similarities.append(similarity)
        logger.info('retrieval %s k=%d: %d/%d', task.task_id, k, hits,
                    len(demos))
        return OrderedDict([
            ('task', task.task_id), ('k', k), ('n_queries', len(demos)),
            ('same_task_rate', hits / float(len(demos))),
            ('shuffled_rate', shuffled_hits / float(len(demos))),
            ('mean_similarity', float(np.mean(similarities))),
        ])

    cells = [(task, k) for task in tasks for k in cfg.query_shots]
    rows = _map_cells(cfg, run_cell, cells)
    path = _output(cfg, 'retrieval.csv')
    if path:
        write_table(path, RETRIEVAL_COLUMNS, rows, _metadata(model, tasks, cfg))
    return rows


def run_mixing_experiment(model, tasks, cfg, **kwargs):
    """
    Returns rows comparing one k-shot state (baseline) with the soup of
    total_shots / k states from disjoint k-shot demonstrations.

    Both conditions use the same total_shots examples and are scored on
    the same test queries, none of which is among those examples.

    Arguments:
        model -- ModelParams.
        tasks -- TaskSpec list.
        cfg -- ExperimentConfig.
    """
    # For testing.
    _demonstration_states = kwargs.get(
        '_demonstration_states', demonstration_states)
    _eval_icl_accuracy = kwargs.get('_eval_icl_accuracy', eval_icl_accuracy)

    for k in cfg.query_shots:
        if cfg.total_shots % k:
            raise ConfigError('k={0} does not divide total_shots={1}'.format(
                k, cfg.total_shots))
        if STRATEGY_ALIASES[cfg.strategy] == 'weighted' and (
                cfg.mix_weights is None
                or len(cfg.mix_weights) != cfg.total_shots // k):
            raise ConfigError(
                'weighted soups of {0} states need {0} mix_weights'.format(
                    cfg.total_shots // k))

    def run_cell(cell):
        """ One (task, k) cell. """
        task, k = cell
        rng = _rng(cfg, _MIXING, cfg.family_seed, *_task_key(task))
        demo = sample_demonstrations(
            task, cfg.total_shots, rng, allow_repeats=cfg.allow_repeats)
        used = frozenset(demo.example_ids)
        n_test = _clip_test(cfg, task, len(used))

        demos = []
        for index in range(cfg.total_shots // k):
            ids = demo.example_ids[index * k:(index + 1) * k]
            tokens = demo.tokens[4 * index * k:4 * (index + 1) * k]
            demos.append(demo._replace(tokens=tokens, k=k, example_ids=ids))
        states = _demonstration_states(model, task, demos)

        accuracies = []
        for state in (states[0], _soup(states, cfg)):
            eval_rng = _rng(
                cfg, _EVALUATION, cfg.family_seed, *(_task_key(task) + (k,)))
            accuracies.append(_eval_icl_accuracy(
                model, state, task, n_test, eval_rng, exclude=used,
                batch_size=cfg.eval_batch))
        logger.info('mixing %s k=%d: baseline %.3f soup %.3f',
                    task.task_id, k, accuracies[0], accuracies[1])
        return OrderedDict([
            ('task', task.task_id), ('k', k), ('n_states', len(states)),
            ('total_shots', cfg.total_shots), ('n_test', n_test),
            ('baseline_accuracy', accuracies[0]),
            ('soup_accuracy', accuracies[1]),
        ])

    cells = [(task, k) for task in tasks for k in cfg.query_shots]
    rows = _map_cells(cfg, run_cell, cells)
    path = _output(cfg, 'mixing.csv')
    if path:
        metadata = _metadata(model, tasks, cfg)
        write_table(path, MIXING_COLUMNS, rows, metadata)
        write_table(
            _output(cfg, 'mixing_macro.csv'),
            ('k', 'n_tasks', 'baseline_accuracy', 'soup_accuracy',
             'aggregation'),
            _macro_rows(rows, ('k',), ('baseline_accuracy', 'soup_accuracy')),
            metadata)
    return rows


def run_retrieve_and_mix_experiment(model, lib, cfg, **kwargs):
    """
    Returns rows of accuracy from a k-shot query state alone and from the
    soup of the query state with its nearest library state.

    Query demonstrations and test queries come from each task's held-out
    half; test_reserve held-out examples are kept out of every query
    demonstration so test queries always remain.

    Arguments:
        model -- ModelParams.
        lib -- SkillLibrary built by build_library.
        cfg -- ExperimentConfig; the task list is cfg.tasks.

    Keyword arguments:
        tasks -- TaskSpec list overriding cfg.tasks.
    """
    tasks = kwargs.get('tasks') or make_tasks(cfg.tasks, cfg.family_seed)

    # For testing.
    _demonstration_states = kwargs.get(
        '_demonstration_states', demonstration_states)
    _eval_icl_accuracy = kwargs.get('_eval_icl_accuracy', eval_icl_accuracy)
    _retrieve_nearest = kwargs.get('_retrieve_nearest', retrieve_nearest)

    if lib.model_hash != model.model_hash:
        raise HashMismatchError(model.model_hash, lib.model_hash)
    layer = resolve_layer(cfg, model.config)
    matrix = library_matrix(lib, layer, cfg.state_kind)
    labels = lib.labels

    def run_cell(cell):
        """ One (task, k) cell, both conditions. """
        task, k = cell
        library_ids, heldout_ids = task_split(task, cfg)
        rng = _rng(cfg, _RETRIEVE_MIX, cfg.family_seed,
                   *(_task_key(task) + (k,)))
        reserve = frozenset(int(x) for x in rng.choice(
            heldout_ids, size=min(cfg.test_reserve, len(heldout_ids)),
            replace=False))
        demos = [
            sample_demonstrations(
                task, k, rng, exclude=frozenset(library_ids) | reserve,
                allow_repeats=cfg.allow_repeats)
            for _ in range(cfg.queries_per_cell)]

        alone, mixed, hits, n_tests = [], [], 0, []
        queries = _demonstration_states(model, task, demos)
        for index, (query, demo) in enumerate(zip(queries, demos)):
            nearest, _ = _retrieve_nearest(
                lib, RetrievalQuery(query, layer, cfg.state_kind),
                matrix=matrix)
            hits += labels[nearest] == task.task_id
            soup = _soup([query, lib.entries[nearest]], cfg)

            exclude = frozenset(library_ids) | frozenset(demo.example_ids)
            n_test = _clip_test(cfg, task, len(exclude))
            n_tests.append(n_test)
            for state, results in ((query, alone), (soup, mixed)):
                eval_rng = _rng(cfg, _EVALUATION, cfg.family_seed,
                                *(_task_key(task) + (k, index)))
                results.append(_eval_icl_accuracy(
                    model, state, task, n_test, eval_rng, exclude=exclude,
                    batch_size=cfg.eval_batch))
        logger.info('retrieve+mix %s k=%d: query %.3f mixed %.3f',
                    task.task_id, k, np.mean(alone), np.mean(mixed))

        rows = []
        for condition, results in (('query', alone),
                                   ('query+retrieved', mixed)):
            rows.append(OrderedDict([
                ('task', task.task_id), ('k', k), ('condition', condition),
                ('n_queries', len(demos)),
                ('n_test', int(np.min(n_tests))),
                ('accuracy', float(np.mean(results))),
                ('same_task_rate', hits / float(len(demos))),
            ]))
        return rows

    cells = [(task, k) for task in tasks for k in cfg.query_shots]
    rows = [row for pair in _map_cells(cfg, run_cell, cells) for row in pair]
    path = _output(cfg, 'retrieve_mix.csv')
    if path:
        metadata = _metadata(model, tasks, cfg)
        write_table(path, RETRIEVE_MIX_COLUMNS, rows, metadata)
        write_table(
            _output(cfg, 'retrieve_mix_macro.csv'),
            ('k', 'condition', 'n_tasks', 'accuracy', 'aggregation'),
            _macro_rows(rows, ('k', 'condition'), ('accuracy',)),
            metadata)
    return rows


def run_sequential_mixing_experiment(model, corpus, cfg, **kwargs):
    """
    Returns one row per condition with the mean and standard error of the
    loss on c_test read from:

        sequential -- c1 then c2 processed in one pass;
        c2_only -- c2 processed from zero;
        mean_mix -- mean of the separately processed c1 and c2 states;
        a_decay -- c1 state A-decay combined with the c2 state, where c2
                   starts from the c1 conv context when cfg.carry_conv;
        a_decay_from_zero -- c1 state A-decay combined with the c2 state
                             processed from zero; only with cfg.carry_conv,
                             since a_decay is that already otherwise.

    Arguments:
        model -- ModelParams.
        corpus -- CorpusTriple list.
        cfg -- ExperimentConfig.
    """
    # For testing.
    _process_batch = kwargs.get('_process_batch', process_batch)
    _batch_sequence_loss = kwargs.get(
        '_batch_sequence_loss', batch_sequence_loss)

    corpus = list(corpus)
    if not corpus:
        raise InsufficientExamplesError('empty corpus')
    zero = zero_state(model.config)
    conditions = SEQUENTIAL_CONDITIONS
    if cfg.carry_conv:
        conditions += (FROM_ZERO_CONDITION,)

    def run_cell(start):
        """ One batch of triples. """
        triples = corpus[start:start + cfg.eval_batch]
        c1, c2, c_test = (
            np.stack([getattr(triple, field) for triple in triples])
            for field in ('c1', 'c2', 'c_test'))
        zeros = [zero] * len(triples)

        after_c1, _ = _process_batch(model, zeros, c1)
        after_both, _ = _process_batch(model, after_c1, c2)
        c2_alone, _ = _process_batch(model, zeros, c2)
        if cfg.carry_conv:
            origins = [boundary_state(state) for state in after_c1]
        else:
            origins = zeros
        suffixes, _ = _process_batch(model, origins, c2, reset_decay=True)

        states = OrderedDict([
            ('sequential', after_both),
            ('c2_only', c2_alone),
            ('mean_mix', [mean_mix([a, b])
                          for a, b in zip(after_c1, c2_alone)]),
            ('a_decay', [a_decay_combine(a, b)
                         for a, b in zip(after_c1, suffixes)]),
            (FROM_ZERO_CONDITION, [a_decay_combine(a, b)
                                   for a, b in zip(after_c1, c2_alone)]),
        ])
        return OrderedDict(
            (condition, _batch_sequence_loss(model, states[condition], c_test))
            for condition in conditions)

    batches = _map_cells(
        cfg, run_cell, range(0, len(corpus), cfg.eval_batch))
    rows = []
    for condition in conditions:
        losses = np.concatenate([batch[condition] for batch in batches])
        stderr = float(np.std(losses, ddof=1) / np.sqrt(len(losses))) \
            if len(losses) > 1 else 0.0
        rows.append(OrderedDict([
            ('condition', condition), ('mean_nll', float(np.mean(losses))),
            ('stderr', stderr), ('n_sequences', len(losses)),
        ]))
        logger.info('sequential %s: %.4f +- %.4f', condition,
                    rows[-1]['mean_nll'], stderr)

    path = _output(cfg, 'sequential.csv')
    if path:
        write_table(path, SEQUENTIAL_COLUMNS, rows, _metadata(model, [], cfg))
    return rows


def run_icl_evaluation(model, tasks, controls, cfg, **kwargs):
    """
    Returns rows of k-shot accuracy per task and per randomized control,
    with a two-sided binomial p-value against chance for the controls.

    Arguments:
        model -- ModelParams.
        tasks -- TaskSpec list.
        controls -- Randomized-label TaskSpec list.
        cfg -- ExperimentConfig.
    """
    # For testing.
    _demonstration_states = kwargs.get(
        '_demonstration_states', demonstration_states)
    _eval_icl_accuracy = kwargs.get('_eval_icl_accuracy', eval_icl_accuracy)

    def run_cell(cell):
        """ One (task, k) cell. """
        task, k = cell
        rng = _rng(cfg, _ICL, cfg.family_seed, *(_task_key(task) + (k,)))
        demo = sample_demonstrations(
            task, k, rng, allow_repeats=cfg.allow_repeats)
        used = frozenset(demo.example_ids)
        n_test = _clip_test(cfg, task, len(used))
        (state,) = _demonstration_states(model, task, [demo])
        accuracy = _eval_icl_accuracy(
            model, state, task, n_test, rng, exclude=used,
            batch_size=cfg.eval_batch)
        p_value = ''
        if task.randomized:
            correct = int(round(accuracy * n_test))
            p_value = float(stats.binomtest(
                correct, n_test, chance_level(task)).pvalue)
        return OrderedDict([
            ('task', task.task_id), ('k', k), ('randomized', task.randomized),
            ('n_test', n_test), ('accuracy', accuracy),
            ('chance', chance_level(task)), ('p_value', p_value),
        ])

    all_tasks = list(tasks) + list(controls)
    cells = [(task, k) for task in all_tasks for k in cfg.query_shots]
    rows = _map_cells(cfg, run_cell, cells)
    path = _output(cfg, 'eval_icl.csv')
    if path:
        write_table(path, ICL_COLUMNS, rows, _metadata(model, all_tasks, cfg))
    return rows


################################################################################
# Application functions.
################################################################################
def parse_args(argv):
    """
    Parse commandline arguments.

    Arguments:
        argv -- An argument list without the program name.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '--config', metavar='path',
        help='JSON config with "model", "train", "experiment" sections.')
    common.add_argument(
        '--seed', metavar='int', type=int, default=None,
        help='Seed for training and experiments.')
    common.add_argument(
        '--model', metavar='path', default=None,
        help='Model file (default: <out>/model.ssm).')
    common.add_argument(
        '--library', metavar='path', default=None,
        help='Library file (default: <out>/library.ssl).')
    common.add_argument(
        '--strategy', metavar='str', default=None,
        choices=sorted(STRATEGY_ALIASES),
        help='Soup strategy (mean, weighted, adecay).')
    common.add_argument(
        '--layer', metavar='int', type=int, default=None,
        help='Zero-based layer used for retrieval and export.')
    common.add_argument(
        '--kind', metavar='str', default=None, choices=STATE_KINDS,
        help='State kind used for retrieval and export (ssm, conv).')
    common.add_argument(
        '--k', metavar='int', type=int, default=None,
        help='Run a single shot count instead of the schedule.')
    common.add_argument(
        '--out', metavar='dir', default=None,
        help='Output directory (default: out).')
    common.add_argument(
        '--log-level', metavar='str', default='INFO',
        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'),
        help='Logging level (default: INFO).')

    parser = argparse.ArgumentParser(prog='statesoup')
    parser.add_argument(
        '-v', '--version', action='version',
        version='%(prog)s {0}'.format(__version__))
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True
    descriptions = OrderedDict([
        ('train', 'Train a model on task streams and corpus text.'),
        ('build-library', 'Build the skill library of a trained model.'),
        ('retrieve', 'Run the retrieval experiment.'),
        ('mix', 'Run the mixing (and retrieve-and-mix) experiments.'),
        ('eval-icl', 'Evaluate k-shot accuracy and randomized controls.'),
        ('eval-seq', 'Run the sequential mixing experiment.'),
        ('export-states', 'Export flattened library states as CSV.'),
    ])
    for name, description in descriptions.items():
        subparsers.add_parser(name, parents=[common], help=description)
    return parser.parse_args(argv)


def apply_overrides(args, tconfig, cfg):
    """
    Returns (TrainConfig, ExperimentConfig) with commandline overrides.
    """
    if args.seed is not None:
        tconfig = tconfig._replace(seed=args.seed)
        cfg = cfg._replace(seed=args.seed)
    overrides = {
        'model_path': args.model, 'library_path': args.library,
        'strategy': args.strategy, 'layer': args.layer,
        'state_kind': args.kind, 'output_dir': args.out,
    }
    cfg = cfg._replace(**{
        key: value for key, value in overrides.items() if value is not None})
    if args.k is not None:
        cfg = cfg._replace(query_shots=(args.k,))
    return tconfig, cfg


def _model_path(cfg):
    return cfg.model_path or os.path.join(cfg.output_dir, 'model.ssm')


def _library_path(cfg):
    return cfg.library_path or os.path.join(cfg.output_dir, 'library.ssl')


def _load_library_for(model, cfg):
    lib = load_library(_library_path(cfg))
    if lib.model_hash != model.model_hash:
        raise HashMismatchError(model.model_hash, lib.model_hash)
    return lib


def _corpus(cfg, split):
    if cfg.corpus_source == 'text-file':
        return make_sequential_corpus(
            'text-file', cfg.corpus_path, cfg.n_sequences, cfg.chunk_len,
            seed=cfg.seed + split)
    return make_sequential_corpus(
        'synthetic', cfg.seed, cfg.n_sequences, cfg.chunk_len, split=split)


def _dump_tasks(cfg, tasks):
    with atomic_output(os.path.join(cfg.output_dir, 'tasks.jsonl')) \
            as output_file:
        for task in tasks:
            dump_task_json(task, output_file)


def command_train(model_config, tconfig, cfg):
    """ The train subcommand. """
    tasks = make_tasks(cfg.tasks, cfg.family_seed)
    model, _ = train(
        model_config, tconfig, tasks, _corpus(cfg, TRAIN_SPLIT),
        metrics_path=os.path.join(cfg.output_dir, 'metrics.jsonl'))
    save_model(model, os.path.join(cfg.output_dir, 'model.ssm'))
    _dump_tasks(cfg, tasks)


def command_build_library(_, __, cfg):
    """ The build-library subcommand. """
    model = load_model(_model_path(cfg))
    tasks = make_tasks(cfg.tasks, cfg.family_seed)
    lib = build_library(model, tasks, cfg)
    save_library(lib, os.path.join(cfg.output_dir, 'library.ssl'))
    _dump_tasks(cfg, tasks)


def command_retrieve(_, __, cfg):
    """ The retrieve subcommand. """
    model = load_model(_model_path(cfg))
    run_retrieval_experiment(model, _load_library_for(model, cfg), cfg)


def command_mix(_, __, cfg):
    """ The mix subcommand. """
    model = load_model(_model_path(cfg))
    run_mixing_experiment(model, make_tasks(cfg.tasks, cfg.family_seed), cfg)
    if cfg.library_path or os.path.exists(_library_path(cfg)):
        run_retrieve_and_mix_experiment(
            model, _load_library_for(model, cfg), cfg)


def command_eval_icl(_, __, cfg):
    """ The eval-icl subcommand. """
    model = load_model(_model_path(cfg))
    tasks = make_tasks(cfg.tasks, cfg.family_seed)
    controls = make_tasks(cfg.controls, cfg.family_seed)
    run_icl_evaluation(model, tasks, controls, cfg)
    _dump_tasks(cfg, tasks + controls)


def command_eval_seq(_, __, cfg):
    """ The eval-seq subcommand. """
    model = load_model(_model_path(cfg))
    run_sequential_mixing_experiment(model, _corpus(cfg, EVAL_SPLIT), cfg)


def command_export_states(_, __, cfg):
    """ The export-states subcommand. """
    model = load_model(_model_path(cfg))
    lib = _load_library_for(model, cfg)
    if not os.path.isdir(cfg.output_dir):
        os.makedirs(cfg.output_dir)
    count = export_states_csv(
        lib, resolve_layer(cfg, model.config), cfg.state_kind,
        os.path.join(cfg.output_dir, 'states.csv'))
    logger.info('exported %d states', count)


COMMANDS = {
    'train': command_train,
    'build-library': command_build_library,
    'retrieve': command_retrieve,
    'mix': command_mix,
    'eval-icl': command_eval_icl,
    'eval-seq': command_eval_seq,
    'export-states': command_export_states,
}


def main(argv=None, **kwargs):
    """
    Run a subcommand and returns the exit code: 0 on success, 1 on a
    runtime error, 2 on a usage error.
    """
    # For tests.
    _parse_args = kwargs.get('_parse_args', parse_args)
    _commands = kwargs.get('_commands', COMMANDS)

    try:
        args = _parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exit_request:
        return exit_request.code

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        model_config, tconfig, cfg = load_config(args.config)
        tconfig, cfg = apply_overrides(args, tconfig, cfg)
        validate_train_config(tconfig)
        validate_experiment_config(cfg)
        if not os.path.isdir(cfg.output_dir):
            os.makedirs(cfg.output_dir)
        _commands[args.command](model_config, tconfig, cfg)
    except (StateSoupError, OSError) as error:
        message = ' '.join(str(error).split())
        sys.stderr.write('statesoup: error: {0}: {1}{2}'.format(
            type(error).__name__, message, os.linesep))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
