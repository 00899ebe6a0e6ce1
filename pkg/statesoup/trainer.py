"""
Next-token training of the gated-linear model on a mixture of in-context
learning streams and sequential corpus text.
"""

import contextlib
import json
import logging
import math
import os
from collections import OrderedDict
from collections import namedtuple

import numpy as np
import torch

from statesoup.codec import atomic_output
from statesoup.errors import ConfigError
from statesoup.errors import CorpusError
from statesoup.errors import NonFiniteError
from statesoup.errors import TrainingDivergedError
from statesoup.gated_linear_core import ModelParams
from statesoup.gated_linear_core import batch_loss
from statesoup.gated_linear_core import init_model
from statesoup.icl_tasks import resample_task
from statesoup.icl_tasks import sample_demonstrations


logger = logging.getLogger(__name__)

_TRAIN_STREAM = 0x71


################################################################################
# Data structures.
################################################################################
TrainConfig = namedtuple(  # pylint: disable=C0103
    'TrainConfig',
    ('steps', 'batch', 'seq_len', 'lr', 'betas', 'eps', 'mixture', 'seed',
     'clip_norm', 'min_shots', 'max_shots', 'log_every'),
    defaults=(20000, 32, 128, 3e-4, (0.9, 0.999), 1e-8, 0.7, 0, 1.0, 4, 32,
              100))


def validate_train_config(tconfig):
    """
    Raise ConfigError unless tconfig satisfies the TrainConfig invariants.
    """
    if not 0.0 <= tconfig.mixture <= 1.0:
        raise ConfigError('mixture must lie in [0, 1], got {0}'.format(
            tconfig.mixture))
    if not tconfig.lr > 0:
        raise ConfigError('lr must be > 0, got {0}'.format(tconfig.lr))
    if tconfig.steps < 0 or tconfig.batch < 1 or tconfig.seq_len < 1:
        raise ConfigError('steps, batch and seq_len must be positive')
    if not 1 <= tconfig.min_shots <= tconfig.max_shots:
        raise ConfigError('need 1 <= min_shots <= max_shots')
    if len(tconfig.betas) != 2 or tconfig.clip_norm <= 0:
        raise ConfigError('betas must be a pair and clip_norm > 0')


################################################################################
# Batches.
################################################################################
def answer_pool(tasks):
    """
    Returns the sorted answer tokens used anywhere in the task family.
    """
    return tuple(sorted(set(
        int(answer) for task in tasks for answer in task.answers)))


def _icl_stream(tasks, pool, tconfig, rng, length):
    # One fresh mapping per row, shared by all of its segments.
    task = resample_task(tasks[rng.integers(len(tasks))], rng, pool)
    tokens = []
    while len(tokens) < length:
        shots = int(rng.integers(tconfig.min_shots, tconfig.max_shots + 1))
        shots = min(shots, task.num_examples)
        tokens.extend(sample_demonstrations(task, shots, rng).tokens)
    return np.asarray(tokens[:length], dtype=np.int64)


def _corpus_window(corpus, rng, length):
    triple = corpus[rng.integers(len(corpus))]
    stream = np.concatenate([triple.c1, triple.c2, triple.c_test])
    if len(stream) < length:
        raise CorpusError('corpus sequences have {0} tokens, need {1}'.format(
            len(stream), length))
    start = rng.integers(len(stream) - length + 1)
    return np.asarray(stream[start:start + length], dtype=np.int64)


def make_training_batch(tasks, corpus, tconfig, rng):
    """
    Returns a (batch, seq_len + 1) token matrix.

    A row is an in-context learning stream with probability tconfig.mixture,
    otherwise a window of corpus text. A stream picks a task, redraws its
    bijection onto the family's answer pool, and concatenates k-shot
    demonstrations of that fresh mapping with k uniform in
    [min_shots, max_shots].

    Arguments:
        tasks -- TaskSpec list (the training family).
        corpus -- CorpusTriple list.
        tconfig -- A TrainConfig.
        rng -- A numpy Generator.
    """
    length = tconfig.seq_len + 1
    pool = answer_pool(tasks) if tasks else ()
    rows = []
    for _ in range(tconfig.batch):
        if rng.random() < tconfig.mixture:
            rows.append(_icl_stream(tasks, pool, tconfig, rng, length))
        else:
            rows.append(_corpus_window(corpus, rng, length))
    return np.stack(rows)


################################################################################
# Gradients.
################################################################################
def _trainable(model, dtype):
    return OrderedDict(
        (name, tensor.detach().to(dtype).clone().requires_grad_(True))
        for name, tensor in model.tensors.items())


def compute_gradients(model, batch, **kwargs):
    """
    Returns (mean next-token NLL, OrderedDict of gradients by tensor name),
    differentiating through the unrolled recurrence.

    Arguments:
        model -- ModelParams.
        batch -- (B, T) token rows with T >= 2.

    Keyword arguments:
        dtype -- Compute dtype (default: torch.float32).
    """
    dtype = kwargs.get('dtype', torch.float32)
    tensors = _trainable(model, dtype)
    loss = batch_loss(tensors, model.config, torch.as_tensor(np.asarray(batch)))
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteError('loss is not finite: {0}'.format(value))
    loss.backward()
    return value, OrderedDict(
        (name, tensor.grad.detach().clone())
        for name, tensor in tensors.items())


def train_step(tensors, optimizer, batch, config, clip_norm):
    """
    Run one clipped optimizer step and returns the loss before it.

    Parameters are left untouched when the loss is not finite.

    Arguments:
        tensors -- Name to trainable tensor mapping.
        optimizer -- A torch optimizer over tensors.
        batch -- (B, T) long tensor.
        config -- ModelConfig.
        clip_norm -- Global gradient norm limit.
    """
    optimizer.zero_grad()
    loss = batch_loss(tensors, config, batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        return value
    loss.backward()
    torch.nn.utils.clip_grad_norm_(list(tensors.values()), clip_norm)
    optimizer.step()
    return value


def train(config, tconfig, tasks, corpus, **kwargs):
    """
    Train a model from init_model(config, tconfig.seed) and returns
    (ModelParams, metrics log).

    Arguments:
        config -- ModelConfig.
        tconfig -- TrainConfig.
        tasks -- Non-empty TaskSpec list.
        corpus -- CorpusTriple list (non-empty unless mixture is 1).

    Keyword arguments:
        metrics_path -- JSONL file receiving {step, loss, lr} per step. It is
                        moved into place only when training completes.
    """
    metrics_path = kwargs.get('metrics_path')

    # For testing.
    _make_training_batch = kwargs.get(
        '_make_training_batch', make_training_batch)

    validate_train_config(tconfig)
    tasks = list(tasks)
    corpus = list(corpus)
    if not tasks:
        raise ConfigError('training needs at least one task')
    if tconfig.mixture < 1.0 and not corpus:
        raise ConfigError('training needs a non-empty corpus')

    model = init_model(config, tconfig.seed)
    tensors = _trainable(model, torch.float32)
    optimizer = torch.optim.Adam(
        list(tensors.values()), lr=tconfig.lr, betas=tuple(tconfig.betas),
        eps=tconfig.eps)
    rng = np.random.default_rng([_TRAIN_STREAM, tconfig.seed])

    metrics = []
    last_finite = None
    with contextlib.ExitStack() as stack:
        metrics_file = None
        if metrics_path:
            metrics_file = stack.enter_context(atomic_output(metrics_path))
        for step in range(tconfig.steps):
            batch = torch.from_numpy(
                _make_training_batch(tasks, corpus, tconfig, rng))
            loss = train_step(
                tensors, optimizer, batch, config, tconfig.clip_norm)
            if not math.isfinite(loss):
                logger.error(
                    'diverged at step %d: loss %s, last finite %s',
                    step, loss, last_finite)
                raise TrainingDivergedError(step, loss, last_finite)
            last_finite = loss

            record = {'step': step, 'loss': loss, 'lr': tconfig.lr}
            metrics.append(record)
            if metrics_file is not None:
                json.dump(record, metrics_file, sort_keys=True)
                metrics_file.write(os.linesep)
            if step % tconfig.log_every == 0 or step == tconfig.steps - 1:
                logger.info('step %d/%d loss %.4f', step, tconfig.steps, loss)

    trained = OrderedDict(
        (name, tensor.detach().clone()) for name, tensor in tensors.items())
    return ModelParams(config, tconfig.seed, trained), metrics
