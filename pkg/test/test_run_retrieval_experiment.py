"""
Tests for statesoup.exp_harness.run_retrieval_experiment.
"""

import csv
import json

import numpy as np
import pytest

from statesoup.errors import HashMismatchError
from statesoup.exp_harness import ExperimentConfig
from statesoup.exp_harness import RETRIEVAL_COLUMNS
from statesoup.exp_harness import build_library
from statesoup.exp_harness import make_tasks
from statesoup.exp_harness import run_retrieval_experiment
from statesoup.state_store import SkillLibrary

from helpers import STACKED_CONFIG
from helpers import TINY_CONFIG
from helpers import make_snapshot
from helpers import tiny_model


CFG = ExperimentConfig(
    tasks=(('bijection', 0), ('bijection', 1), ('small', 2)),
    query_shots=(1, 4), queries_per_cell=3, output_dir=None)

DIRECTIONS = {
    'bijection-0': [[1.0, 0.0], [0.0, 0.0]],
    'bijection-1': [[0.0, 1.0], [0.0, 0.0]],
    'small-2': [[0.0, 0.0], [1.0, 1.0]],
}


def _setup():
    model = tiny_model(TINY_CONFIG)
    lib = SkillLibrary.create(model.model_hash, [
        make_snapshot(ssm, label, model.model_hash)
        for label, ssm in DIRECTIONS.items()])

    def demonstration_states_mock(model, task, demos):
        """ Mock for statesoup.exp_harness.demonstration_states. """
        return [
            make_snapshot(
                np.asarray(DIRECTIONS[task.task_id]) * (1 + demo.k),
                task.task_id, model.model_hash, shots=demo.k)
            for demo in demos]
    return model, lib, demonstration_states_mock


def test_normal():
    """
    Test rates when queries point at their own task.
    """
    model, lib, stub = _setup()
    rows = run_retrieval_experiment(
        model, lib, CFG, _demonstration_states=stub)
    assert [(row['task'], row['k']) for row in rows] == [
        ('bijection-0', 1), ('bijection-0', 4), ('bijection-1', 1),
        ('bijection-1', 4), ('small-2', 1), ('small-2', 4)]
    for row in rows:
        assert row['n_queries'] == 3
        assert row['same_task_rate'] == 1.0
        assert row['mean_similarity'] == pytest.approx(1.0)
        assert 0.0 <= row['shuffled_rate'] <= 1.0


def test_workers():
    """
    Test that worker threads give the same rows.
    """
    model, lib, stub = _setup()
    serial = run_retrieval_experiment(
        model, lib, CFG, _demonstration_states=stub)
    threaded = run_retrieval_experiment(
        model, lib, CFG._replace(workers=3), _demonstration_states=stub)
    assert serial == threaded


def test_output(tmp_path):
    """
    Test the CSV table and its metadata sidecar.
    """
    model, lib, stub = _setup()
    cfg = CFG._replace(output_dir=str(tmp_path))
    run_retrieval_experiment(model, lib, cfg, _demonstration_states=stub)
    with open(str(tmp_path / 'retrieval.csv'), newline='') as input_file:
        rows = list(csv.DictReader(input_file))
    assert len(rows) == 6
    assert tuple(rows[0]) == RETRIEVAL_COLUMNS
    metadata = json.loads((tmp_path / 'retrieval.meta.json').read_text())
    assert metadata['model_hash'] == model.model_hash
    assert metadata['scale'] == 'desk-scale toy model'


def test_real_model():
    """
    Test a real model and library end to end.
    """
    model = tiny_model(STACKED_CONFIG)
    cfg = CFG._replace(
        tasks=(('bijection', 0), ('bijection', 1)), states_per_task=2,
        library_shots=4, query_shots=(2,), queries_per_cell=2)
    lib = build_library(model, make_tasks(cfg.tasks), cfg)
    rows = run_retrieval_experiment(model, lib, cfg)
    assert len(rows) == 2
    for row in rows:
        assert 0.0 <= row['same_task_rate'] <= 1.0
        assert -1.0 <= row['mean_similarity'] <= 1.0


def test_hash_mismatch():
    """
    Test for a library of another model.
    """
    model, _, stub = _setup()
    lib = SkillLibrary.create('other', [
        make_snapshot(np.ones((2, 2)), 'a', 'other')])
    with pytest.raises(HashMismatchError):
        run_retrieval_experiment(model, lib, CFG, _demonstration_states=stub)
