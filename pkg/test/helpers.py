"""
Shared builders for the statesoup tests.
"""

import numpy as np

from statesoup.gated_linear_core import ModelConfig
from statesoup.gated_linear_core import SnapshotMeta
from statesoup.gated_linear_core import StateSnapshot
from statesoup.gated_linear_core import init_model
from statesoup.gated_linear_core import make_layer_state


# Small enough for finite differences.
TINY_CONFIG = ModelConfig(
    vocab_size=8, embed_dim=4, state_dim=2, num_layers=1, conv_width=2)

# Full byte vocabulary, so task and corpus tokens fit.
BYTE_CONFIG = ModelConfig(
    vocab_size=256, embed_dim=8, state_dim=4, num_layers=1, conv_width=2)

STACKED_CONFIG = BYTE_CONFIG._replace(num_layers=2, conv_width=3)


def tiny_model(config=TINY_CONFIG, seed=0):
    """
    Returns an initialized model of a small config.
    """
    return init_model(config, seed)


def max_relative_error(actual, expected):
    """
    Returns max|actual - expected| / max|expected|.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = np.max(np.abs(expected))
    if scale == 0:
        return float(np.max(np.abs(actual)))
    return float(np.max(np.abs(actual - expected)) / scale)


def make_snapshot(ssm, label='', model_hash='h', **kwargs):
    """
    Returns a one-layer snapshot with the given recurrent state.

    Keyword arguments:
        conv_buf -- Conv buffer (default: zeros of shape (2, D)).
        log_decay -- Decay accumulator (default: zeros).
        shots -- meta.shots.
        token_count -- meta.token_count.
    """
    ssm = np.asarray(ssm, dtype=np.float64)
    conv_buf = kwargs.get('conv_buf', np.zeros((2, ssm.shape[0])))
    log_decay = kwargs.get('log_decay', np.zeros(ssm.shape))
    meta = SnapshotMeta(
        task_label=label, shots=kwargs.get('shots', 0),
        token_count=kwargs.get('token_count', 0), model_hash=model_hash)
    return StateSnapshot((make_layer_state(ssm, conv_buf, log_decay),), meta)
