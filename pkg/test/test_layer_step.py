"""
Tests for statesoup.gated_linear_core.layer_step.
"""

import numpy as np
import pytest
import torch

from statesoup.errors import NonFiniteError
from statesoup.errors import ShapeError
from statesoup.gated_linear_core import RMS_NORM_EPS
from statesoup.gated_linear_core import LayerParams
from statesoup.gated_linear_core import layer_step
from statesoup.gated_linear_core import make_layer_state

from helpers import STACKED_CONFIG
from helpers import max_relative_error
from helpers import tiny_model


def _silu(values):
    return values / (1.0 + np.exp(-values))


def _softplus(values):
    return np.log1p(np.exp(values))


def scalar_step(params, state, x):
    """
    Reference step written with explicit loops over state entries.
    """
    p = {name: tensor.double().numpy() for name, tensor in
         params._asdict().items()}
    dim, num_states = state.ssm.shape

    hidden = x / np.sqrt(np.mean(x ** 2) + RMS_NORM_EPS) * p['norm']
    projected = (p['in_proj'] @ hidden).astype(np.float32).astype(np.float64)
    gate = p['gate_proj'] @ hidden

    window = np.vstack([state.conv_buf.astype(np.float64), projected])
    frame = window[1:]
    u = _silu(np.sum(frame * p['conv_kernel'], axis=0))
    delta = _softplus(p['w_delta'] @ u + p['b_delta'])
    input_b = u @ p['w_b']
    readout_c = u @ p['w_c']
    rate = np.exp(p['a_log'])

    ssm = state.ssm.astype(np.float64).copy()
    log_decay = state.log_decay.copy()
    for d in range(dim):
        for n in range(num_states):
            log_a = -delta[d] * rate[n]
            ssm[d, n] = np.exp(log_a) * ssm[d, n] \
                + delta[d] * u[d] * input_b[n]
            log_decay[d, n] += log_a
    ssm = ssm.astype(np.float32).astype(np.float64)
    y = np.array([
        sum(ssm[d, n] * readout_c[n] for n in range(num_states))
        for d in range(dim)])
    output = p['out_proj'] @ (y * _silu(gate))
    return ssm, window[1:], log_decay, output


def _random_state(rng, config):
    shape = (config.embed_dim, config.state_dim)
    return make_layer_state(
        rng.normal(size=shape),
        rng.normal(size=(config.conv_width, config.embed_dim)),
        -rng.random(shape))


def test_matches_scalar_loop():
    """
    Test against the explicit-loop reference.
    """
    model = tiny_model(STACKED_CONFIG)
    rng = np.random.default_rng(0)
    params = model.layer(1)
    state = _random_state(rng, STACKED_CONFIG)
    x = rng.normal(size=STACKED_CONFIG.embed_dim)

    new_state, output = layer_step(params, state, x)
    ssm, conv_buf, log_decay, expected_output = scalar_step(params, state, x)
    assert max_relative_error(new_state.ssm, ssm) < 1e-5
    assert max_relative_error(new_state.conv_buf, conv_buf) < 1e-6
    assert max_relative_error(new_state.log_decay, log_decay) < 1e-9
    assert max_relative_error(output, expected_output) < 1e-5


def test_identity_transition():
    """
    Test that with A = 1 the state only accumulates its drive.
    """
    model = tiny_model(STACKED_CONFIG)
    rng = np.random.default_rng(1)
    params = model.layer(0)
    params = params._replace(a_log=torch.full_like(params.a_log, -100.0))
    state = _random_state(rng, STACKED_CONFIG)
    empty = make_layer_state(
        np.zeros(state.ssm.shape), state.conv_buf, state.log_decay)
    x = rng.normal(size=STACKED_CONFIG.embed_dim)

    stepped, _ = layer_step(params, state, x)
    driven, _ = layer_step(params, empty, x)
    np.testing.assert_allclose(
        stepped.ssm - driven.ssm, state.ssm, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(stepped.log_decay, state.log_decay, atol=1e-12)


def test_conv_buffer_shift():
    """
    Test that the conv buffer drops its oldest row.
    """
    model = tiny_model(STACKED_CONFIG)
    rng = np.random.default_rng(2)
    state = _random_state(rng, STACKED_CONFIG)
    new_state, _ = layer_step(
        model.layer(0), state, rng.normal(size=STACKED_CONFIG.embed_dim))
    np.testing.assert_array_equal(new_state.conv_buf[:-1], state.conv_buf[1:])


def test_bad_input():
    """
    Test for wrong input shapes and non-finite inputs.
    """
    model = tiny_model(STACKED_CONFIG)
    state = _random_state(np.random.default_rng(3), STACKED_CONFIG)
    with pytest.raises(ShapeError):
        layer_step(model.layer(0), state, np.zeros(3))
    with pytest.raises(NonFiniteError):
        layer_step(model.layer(0), state, np.full(8, np.nan))


def test_layer_params_fields():
    """
    Test that layer parameters come in a fixed field order.
    """
    assert LayerParams._fields[0] == 'norm'
    assert LayerParams._fields[-1] == 'out_proj'
