"""
Tests for statesoup.exp_harness.parse_args.
"""

import pytest

from statesoup.exp_harness import parse_args


def test_normal():
    """
    Test a subcommand with options.
    """
    args = parse_args([
        'mix', '--seed', '3', '--strategy', 'adecay', '--k', '4',
        '--out', 'results', '--layer', '1', '--kind', 'conv'])
    assert args.command == 'mix'
    assert args.seed == 3
    assert args.strategy == 'adecay'
    assert args.k == 4
    assert args.out == 'results'
    assert args.layer == 1
    assert args.kind == 'conv'


def test_defaults():
    """
    Test that unset options stay unset.
    """
    args = parse_args(['eval-seq'])
    assert args.config is None
    assert args.seed is None
    assert args.model is None
    assert args.strategy is None
    assert args.log_level == 'INFO'


@pytest.mark.parametrize('argv', [
    [], ['fit'], ['mix', '--strategy', 'median'], ['retrieve', '--k', 'x'],
    ['export-states', '--kind', 'gate'],
])
def test_usage_errors(argv):
    """
    Test that bad command lines exit with status 2.
    """
    with pytest.raises(SystemExit) as error:
        parse_args(argv)
    assert error.value.code == 2


def test_version(capsys):
    """
    Test the version option.
    """
    with pytest.raises(SystemExit) as error:
        parse_args(['--version'])
    assert error.value.code == 0
    assert 'statesoup' in capsys.readouterr().out
