"""
State soups: mean, weighted and A-decay combinations of snapshots.
"""

import logging
from collections import namedtuple
from functools import reduce

import numpy as np

from statesoup.errors import HashMismatchError
from statesoup.errors import MixRecipeError
from statesoup.errors import NonFiniteError
from statesoup.errors import ShapeError
from statesoup.gated_linear_core import SnapshotMeta
from statesoup.gated_linear_core import StateSnapshot
from statesoup.gated_linear_core import make_layer_state


logger = logging.getLogger(__name__)

STRATEGIES = ('mean', 'weighted', 'a_decay')

# Names accepted on the command line.
STRATEGY_ALIASES = {
    'mean': 'mean',
    'weighted': 'weighted',
    'adecay': 'a_decay',
    'a_decay': 'a_decay',
}


################################################################################
# Data structures.
################################################################################
MixRecipe = namedtuple(  # pylint: disable=C0103
    'MixRecipe', ('strategy', 'weights'), defaults=('mean', None))


def validate_recipe(recipe, num_states):
    """
    Raise MixRecipeError unless recipe can mix num_states snapshots.
    """
    if recipe.strategy not in STRATEGIES:
        raise MixRecipeError('unknown strategy {0!r} (known: {1})'.format(
            recipe.strategy, ', '.join(STRATEGIES)))
    if recipe.strategy == 'weighted':
        _normalized_weights(recipe.weights, num_states)


def _normalized_weights(weights, num_states):
    if weights is None:
        raise MixRecipeError('weighted mixing needs weights')
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (num_states,):
        raise MixRecipeError('{0} weights for {1} states'.format(
            weights.size, num_states))
    if not np.all(np.isfinite(weights)):
        raise MixRecipeError('weights must be finite')
    total = weights.sum()
    if total == 0:
        raise MixRecipeError('weights sum to zero')
    return weights / total


################################################################################
# Inner functions.
################################################################################
def _check_operands(states):
    if not states:
        raise MixRecipeError('nothing to mix')
    model_hash = states[0].meta.model_hash
    for state in states[1:]:
        if state.meta.model_hash != model_hash:
            raise HashMismatchError(model_hash, state.meta.model_hash)
        if len(state.layers) != len(states[0].layers):
            raise ShapeError('snapshots have different layer counts')


def _mixed_label(states):
    labels = []
    for state in states:
        if state.meta.task_label not in labels:
            labels.append(state.meta.task_label)
    return '+'.join(labels)


def _linear_combination(states, weights):
    """
    Sum weights[i] * states[i] over ssm and conv tensors in ascending i.
    """
    layers = []
    for index in range(len(states[0].layers)):
        ssm = np.zeros(states[0].layers[index].ssm.shape)
        conv_buf = np.zeros(states[0].layers[index].conv_buf.shape)
        for weight, state in zip(weights, states):
            ssm += weight * state.layers[index].ssm.astype(np.float64)
            conv_buf += weight * state.layers[index].conv_buf.astype(np.float64)
        layers.append(make_layer_state(
            ssm, conv_buf, np.zeros(ssm.shape)))

    meta = SnapshotMeta(
        task_label=_mixed_label(states),
        shots=sum(state.meta.shots for state in states),
        token_count=max(state.meta.token_count for state in states),
        model_hash=states[0].meta.model_hash)
    return StateSnapshot(tuple(layers), meta)


################################################################################
# API functions.
################################################################################
def mean_mix(states):
    """
    Returns the elementwise mean of snapshots.

    The decay accumulator of the result is zero; shots add up and the token
    count is the largest one.

    Arguments:
        states -- A non-empty StateSnapshot list sharing a model hash.
    """
    states = list(states)
    _check_operands(states)
    mixed = _linear_combination(states, [1.0] * len(states))
    return _scaled(mixed, 1.0 / len(states))


def _scaled(state, factor):
    layers = tuple(
        make_layer_state(
            layer.ssm.astype(np.float64) * factor,
            layer.conv_buf.astype(np.float64) * factor,
            layer.log_decay)
        for layer in state.layers)
    return state._replace(layers=layers)


def weighted_mix(states, weights):
    """
    Returns sum(w_i * state_i) with the weights normalized to sum 1.

    Arguments:
        states -- A non-empty StateSnapshot list sharing a model hash.
        weights -- Finite reals, one per state, with non-zero sum.
    """
    states = list(states)
    _check_operands(states)
    return _linear_combination(
        states, _normalized_weights(weights, len(states)))


def a_decay_combine(prefix, suffix, **kwargs):
    """
    Returns the state of prefix followed by suffix, combining recurrent
    states through the suffix's decay:

        ssm = suffix.ssm + exp(suffix.log_decay) * prefix.ssm

    Exact for one layer when the suffix was processed from
    boundary_state(prefix) with reset_decay; approximate for stacked
    layers. Conv buffers are taken from the suffix.

    Arguments:
        prefix -- The earlier StateSnapshot.
        suffix -- The later StateSnapshot, processed with reset_decay.

    Keyword arguments:
        carry_decay -- Return prefix.log_decay + suffix.log_decay instead of
                       zero, so that combinations can be nested.
    """
    carry_decay = kwargs.get('carry_decay', False)
    _check_operands([prefix, suffix])

    layers = []
    for before, after in zip(prefix.layers, suffix.layers):
        log_decay = after.log_decay
        if not np.all(np.isfinite(log_decay)):
            raise NonFiniteError('suffix decay accumulator is not finite')
        if np.any(log_decay > 0):
            raise NonFiniteError('suffix decay accumulator must be <= 0')
        ssm = after.ssm.astype(np.float64) \
            + np.exp(log_decay) * before.ssm.astype(np.float64)
        if carry_decay:
            new_decay = before.log_decay + log_decay
        else:
            new_decay = np.zeros(log_decay.shape)
        layers.append(make_layer_state(ssm, after.conv_buf, new_decay))

    meta = SnapshotMeta(
        task_label=_mixed_label([prefix, suffix]),
        shots=prefix.meta.shots + suffix.meta.shots,
        token_count=prefix.meta.token_count + suffix.meta.token_count,
        model_hash=prefix.meta.model_hash)
    return StateSnapshot(tuple(layers), meta)


def mix_states(states, recipe):
    """
    Mix snapshots following a MixRecipe.

    The a_decay strategy folds a_decay_combine left to right, so every
    operand after the first must carry the decay of its own tokens.

    Arguments:
        states -- A non-empty StateSnapshot list.
        recipe -- A MixRecipe.
    """
    states = list(states)
    validate_recipe(recipe, len(states))
    if recipe.strategy == 'mean':
        return mean_mix(states)
    if recipe.strategy == 'weighted':
        return weighted_mix(states, recipe.weights)
    _check_operands(states)
    return reduce(a_decay_combine, states)
