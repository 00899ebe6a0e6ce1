"""
Tests for statesoup.exp_harness.build_library.
"""

import pytest
from mock import patch

from statesoup.errors import InsufficientExamplesError
from statesoup.exp_harness import ExperimentConfig
from statesoup.exp_harness import build_library
from statesoup.exp_harness import make_tasks
from statesoup.exp_harness import task_split

from helpers import STACKED_CONFIG
from helpers import tiny_model


CFG = ExperimentConfig(
    tasks=(('bijection', 0), ('small', 2)), states_per_task=2,
    library_shots=4, output_dir=None)


def test_normal():
    """
    Test entry count, order and metadata.
    """
    model = tiny_model(STACKED_CONFIG)
    tasks = make_tasks(CFG.tasks)
    lib = build_library(model, tasks, CFG)
    assert lib.model_hash == model.model_hash
    assert lib.labels == ['bijection-0', 'bijection-0', 'small-2', 'small-2']
    for entry in lib.entries:
        assert entry.meta.shots == 4
        assert entry.meta.token_count == 16
        assert len(entry.layers) == STACKED_CONFIG.num_layers


def test_library_half_only():
    """
    Test that library demonstrations avoid held-out examples.
    """
    seen = []

    def demonstration_states_mock(model, task, demos):
        """ Mock for statesoup.exp_harness.demonstration_states. """
        seen.extend((task, demo) for demo in demos)
        return []

    with patch('statesoup.exp_harness.demonstration_states',
               side_effect=demonstration_states_mock):
        build_library(
            tiny_model(STACKED_CONFIG), make_tasks(CFG.tasks),
            CFG._replace(states_per_task=5, library_shots=8))
    assert len(seen) == 10
    for task, demo in seen:
        _, heldout = task_split(task, CFG)
        assert not set(demo.example_ids) & set(heldout)


def test_not_enough_examples():
    """
    Test for library demonstrations longer than the library half.
    """
    with pytest.raises(InsufficientExamplesError):
        build_library(
            tiny_model(STACKED_CONFIG), make_tasks(CFG.tasks),
            CFG._replace(library_shots=40, allow_repeats=False))
