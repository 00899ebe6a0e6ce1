"""
Tests for statesoup.icl_tasks.dump_task_json.
"""

import json
from io import StringIO

from statesoup.icl_tasks import dump_task_json
from statesoup.icl_tasks import make_task


def test_normal():
    """
    Test for a task record.
    """
    task = make_task('small', 2)
    output_file = StringIO()
    dump_task_json(task, output_file)

    output_file.seek(0)
    result = json.loads(output_file.read())
    assert result['task_id'] == 'small-2'
    assert result['kind'] == 'small'
    assert result['seed'] == 2
    assert result['randomized'] is False
    assert len(result['mapping']) == 48
    assert result['mapping'][0] == [task.questions[0], task.answers[0]]


def test_one_line_per_task():
    """
    Test that records are newline separated.
    """
    output_file = StringIO()
    for seed in range(3):
        dump_task_json(make_task('bijection', seed), output_file)
    lines = output_file.getvalue().splitlines()
    assert [json.loads(line)['task_id'] for line in lines] == [
        'bijection-0', 'bijection-1', 'bijection-2']
