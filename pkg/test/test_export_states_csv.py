"""
Tests for statesoup.state_store.export_states_csv.
"""

import csv

from statesoup.state_store import SkillLibrary
from statesoup.state_store import export_states_csv

from helpers import make_snapshot


def test_normal(tmp_path):
    """
    Test header and rows.
    """
    lib = SkillLibrary.create('h', [
        make_snapshot([[1.0, 2.0], [3.0, 0.5]], 'bijection-0', shots=4,
                      token_count=16),
        make_snapshot([[0.0, -1.0], [0.25, 8.0]], 'small-2', shots=8,
                      token_count=32),
    ])
    path = tmp_path / 'states.csv'
    assert export_states_csv(lib, 0, 'ssm', str(path)) == 2

    with open(str(path), newline='') as input_file:
        rows = list(csv.reader(input_file))
    assert rows[0] == ['task_label', 'shots', 'token_count',
                       'v0', 'v1', 'v2', 'v3']
    assert rows[1] == ['bijection-0', '4', '16', '1', '2', '3', '0.5']
    assert rows[2] == ['small-2', '8', '32', '0', '-1', '0.25', '8']


def test_conv(tmp_path):
    """
    Test exporting conv buffers.
    """
    lib = SkillLibrary.create('h', [
        make_snapshot([[1.0, 2.0], [3.0, 0.5]], 'a',
                      conv_buf=[[9.0, 8.0], [7.0, 6.0]])])
    path = tmp_path / 'states.csv'
    export_states_csv(lib, 0, 'conv', str(path))
    with open(str(path), newline='') as input_file:
        rows = list(csv.reader(input_file))
    assert rows[1][3:] == ['9', '8', '7', '6']


def test_empty(tmp_path):
    """
    Test for an empty library.
    """
    path = tmp_path / 'states.csv'
    assert export_states_csv(SkillLibrary.create('h'), 0, 'ssm', str(path)) == 0
    with open(str(path), newline='') as input_file:
        assert list(csv.reader(input_file)) == [
            ['task_label', 'shots', 'token_count']]
