"""
Tests for statesoup.gated_linear_core.sequence_loss.
"""

import math
from collections import OrderedDict

import numpy as np
import pytest
import torch

from statesoup.errors import SequenceTooShortError
from statesoup.gated_linear_core import batch_loss
from statesoup.gated_linear_core import batch_sequence_loss
from statesoup.gated_linear_core import sequence_loss
from statesoup.gated_linear_core import zero_state

from helpers import TINY_CONFIG
from helpers import tiny_model


def _uniform_model():
    model = tiny_model()
    tensors = OrderedDict(model.tensors)
    tensors['embedding'] = torch.zeros_like(tensors['embedding'])
    return model._replace(tensors=tensors)


def test_uniform_model():
    """
    Test that all-zero logits cost log V per token.
    """
    loss = sequence_loss(_uniform_model(), zero_state(TINY_CONFIG), [1, 2, 3, 4])
    assert loss == pytest.approx(math.log(TINY_CONFIG.vocab_size), rel=1e-9)


def test_matches_training_loss():
    """
    Test that the inference loss from zero matches the training loss.
    """
    model = tiny_model()
    tokens = np.array([[1, 2, 3, 4, 5], [7, 6, 5, 4, 3]])
    zero = zero_state(TINY_CONFIG)
    losses = batch_sequence_loss(model, [zero, zero], tokens)
    expected = batch_loss(model.tensors, TINY_CONFIG, torch.from_numpy(tokens))
    assert losses.shape == (2,)
    assert float(np.mean(losses)) == pytest.approx(float(expected), rel=1e-4)


def test_too_short():
    """
    Test for sequences shorter than two tokens.
    """
    with pytest.raises(SequenceTooShortError):
        sequence_loss(tiny_model(), zero_state(TINY_CONFIG), [1])
