"""
Stacked gated-linear recurrent language model whose states are values.

Every layer keeps a D x N recurrent state updated as

    ssm_t = A_t * ssm_{t-1} + (delta_t * u_t) outer B_t

with a diagonal, input-dependent transition A_t = exp(-delta_t outer rate).
Because A_t never depends on the state, each layer is linear in its initial
state, and the running sum of log A_t (the decay accumulator) is enough to
move a state across a processed chunk.
"""

import hashlib
import json
import logging
import math
from collections import OrderedDict
from collections import namedtuple

import numpy as np
import torch
import torch.nn.functional as F

from statesoup.codec import read_container
from statesoup.codec import write_container
from statesoup.errors import ConfigError
from statesoup.errors import FormatError
from statesoup.errors import HashMismatchError
from statesoup.errors import NonFiniteError
from statesoup.errors import SequenceTooShortError
from statesoup.errors import ShapeError
from statesoup.errors import TokenRangeError


logger = logging.getLogger(__name__)

MODEL_MAGIC = b'SSOUPM1\x00'
MODEL_FORMAT_VERSION = 1

DTYPES = ('f32-storage/f64-accumulate',)
STORAGE_DTYPE = torch.float32
ACCUMULATE_DTYPE = torch.float64
RMS_NORM_EPS = 1e-6

# Products of these ranges keep exp(-delta * rate) inside [0.9, 0.999].
INIT_DELTA_RANGE = (0.011, 0.1)
INIT_RATE_RANGE = (0.1, 1.0)


################################################################################
# Data structures.
################################################################################
ModelConfig = namedtuple(  # pylint: disable=C0103
    'ModelConfig',
    ('vocab_size', 'embed_dim', 'state_dim', 'num_layers', 'conv_width',
     'dtype'),
    defaults=(256, 64, 16, 4, 4, DTYPES[0]))

LayerParams = namedtuple(  # pylint: disable=C0103
    'LayerParams',
    ('norm', 'in_proj', 'gate_proj', 'conv_kernel', 'w_delta', 'b_delta',
     'w_b', 'w_c', 'a_log', 'out_proj'))

LayerState = namedtuple(  # pylint: disable=C0103
    'LayerState', ('ssm', 'conv_buf', 'log_decay'))

SnapshotMeta = namedtuple(  # pylint: disable=C0103
    'SnapshotMeta', ('task_label', 'shots', 'token_count', 'model_hash'),
    defaults=('', 0, 0, ''))

StateSnapshot = namedtuple(  # pylint: disable=C0103
    'StateSnapshot', ('layers', 'meta'))

# Parameters of every layer cast to one compute dtype.
_Network = namedtuple('_Network', ('embedding', 'layers', 'final_norm'))


class ModelParams(namedtuple('ModelParams', ('config', 'seed', 'tensors'))):
    """
    Learned parameters: the config, the init seed and an ordered mapping of
    tensor name to float32 torch tensor. Treated as immutable.
    """
    __slots__ = ()

    def layer(self, index):
        """
        Returns the LayerParams of a layer.

        Arguments:
            index -- Zero-based layer index.
        """
        return layer_params(self.tensors, index)

    @property
    def model_hash(self):
        """
        Returns the hash of the model config.
        """
        return config_hash(self.config)


def validate_config(config):
    """
    Raise ConfigError unless config satisfies the ModelConfig invariants.
    """
    for field in config._fields[:-1]:
        value = getattr(config, field)
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ConfigError('{0} must be an integer >= 1, got {1!r}'.format(
                field, value))
    if config.dtype not in DTYPES:
        raise ConfigError('dtype must be one of {0}, got {1!r}'.format(
            DTYPES, config.dtype))


def config_hash(config):
    """
    Returns a stable hex digest of a ModelConfig.
    """
    canonical = json.dumps(
        {key: (int(value) if isinstance(value, np.integer) else value)
         for key, value in config._asdict().items()},
        sort_keys=True)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def tensor_shapes(config):
    """
    Returns an ordered mapping of parameter name to shape.
    """
    dim, state, width = config.embed_dim, config.state_dim, config.conv_width
    layer_shapes = LayerParams(
        norm=(dim,), in_proj=(dim, dim), gate_proj=(dim, dim),
        conv_kernel=(width, dim), w_delta=(dim, dim), b_delta=(dim,),
        w_b=(dim, state), w_c=(dim, state), a_log=(state,),
        out_proj=(dim, dim))

    shapes = OrderedDict([('embedding', (config.vocab_size, dim))])
    for index in range(config.num_layers):
        for field, shape in zip(LayerParams._fields, layer_shapes):
            shapes['layers.{0}.{1}'.format(index, field)] = shape
    shapes['final_norm'] = (dim,)
    return shapes


def layer_params(tensors, index):
    """
    Returns the LayerParams of a layer from a name to tensor mapping.
    """
    return LayerParams(*(
        tensors['layers.{0}.{1}'.format(index, field)]
        for field in LayerParams._fields))


def make_layer_state(ssm, conv_buf, log_decay):
    """
    Returns a LayerState holding read-only copies in storage dtypes.
    """
    return LayerState(
        _frozen(ssm, np.float32), _frozen(conv_buf, np.float32),
        _frozen(log_decay, np.float64))


def _frozen(values, dtype):
    array = np.array(values, dtype=dtype)
    array.flags.writeable = False
    return array


def validate_snapshot(config, snapshot):
    """
    Raise unless a snapshot belongs to a model with the given config.
    """
    expected_hash = config_hash(config)
    if snapshot.meta.model_hash != expected_hash:
        raise HashMismatchError(expected_hash, snapshot.meta.model_hash)
    if len(snapshot.layers) != config.num_layers:
        raise ShapeError('snapshot has {0} layers, model has {1}'.format(
            len(snapshot.layers), config.num_layers))
    ssm_shape = (config.embed_dim, config.state_dim)
    conv_shape = (config.conv_width, config.embed_dim)
    for index, layer in enumerate(snapshot.layers):
        if (layer.ssm.shape != ssm_shape
                or layer.log_decay.shape != ssm_shape
                or layer.conv_buf.shape != conv_shape):
            raise ShapeError('layer {0} state has wrong shapes'.format(index))


################################################################################
# Initialization and states.
################################################################################
def init_model(config, seed):
    """
    Returns deterministic initial ModelParams.

    Arguments:
        config -- A ModelConfig.
        seed -- An integer seed.
    """
    validate_config(config)
    generator = torch.Generator().manual_seed(int(seed))
    dim, width = config.embed_dim, config.conv_width

    def normal(shape, std):
        """ Gaussian draw in float64. """
        return torch.randn(
            shape, generator=generator, dtype=torch.float64) * std

    def log_uniform(shape, low, high):
        """ Log-uniform draw in float64. """
        unit = torch.rand(shape, generator=generator, dtype=torch.float64)
        return torch.exp(math.log(low) + unit * (math.log(high) - math.log(low)))

    initializers = {
        'embedding': lambda shape: normal(shape, dim ** -0.5),
        'norm': torch.ones,
        'final_norm': torch.ones,
        'in_proj': lambda shape: normal(shape, dim ** -0.5),
        'gate_proj': lambda shape: normal(shape, dim ** -0.5),
        'conv_kernel': lambda shape: normal(shape, width ** -0.5),
        'w_delta': lambda shape: normal(shape, 0.1 * dim ** -0.5),
        # Inverse softplus of the initial step sizes.
        'b_delta': lambda shape: _inverse_softplus(
            log_uniform(shape, *INIT_DELTA_RANGE)),
        'w_b': lambda shape: normal(shape, dim ** -0.5),
        'w_c': lambda shape: normal(shape, dim ** -0.5),
        'a_log': lambda shape: torch.linspace(
            math.log(INIT_RATE_RANGE[0]), math.log(INIT_RATE_RANGE[1]),
            shape[0], dtype=torch.float64),
        'out_proj': lambda shape: normal(
            shape, dim ** -0.5 / math.sqrt(2 * config.num_layers)),
    }

    tensors = OrderedDict()
    for name, shape in tensor_shapes(config).items():
        field = name.rsplit('.', 1)[-1]
        tensors[name] = initializers[field](shape).to(STORAGE_DTYPE)
    return ModelParams(config, int(seed), tensors)


def _inverse_softplus(values):
    return values + torch.log(-torch.expm1(-values))


def zero_state(config):
    """
    Returns the all-zero StateSnapshot of a model config.
    """
    validate_config(config)
    ssm_shape = (config.embed_dim, config.state_dim)
    conv_shape = (config.conv_width, config.embed_dim)
    layers = tuple(
        make_layer_state(
            np.zeros(ssm_shape), np.zeros(conv_shape), np.zeros(ssm_shape))
        for _ in range(config.num_layers))
    return StateSnapshot(layers, SnapshotMeta(model_hash=config_hash(config)))


def boundary_state(snapshot):
    """
    Returns a snapshot with zero recurrent state and decay but the conv
    buffers of the given snapshot.

    A chunk processed from here sees the same local context as in a joint
    run, so its recurrent state can be A-decay combined with the snapshot's
    one exactly for a single layer.
    """
    layers = tuple(
        make_layer_state(
            np.zeros_like(layer.ssm), layer.conv_buf,
            np.zeros_like(layer.log_decay))
        for layer in snapshot.layers)
    return StateSnapshot(
        layers, SnapshotMeta(model_hash=snapshot.meta.model_hash))


def transition_coefficients(params, inputs):
    """
    Returns the per-step transitions A_t for post-activation inputs u_t.

    Arguments:
        params -- LayerParams.
        inputs -- (..., D) array of post-conv, post-activation inputs.
    """
    with torch.no_grad():
        u = torch.as_tensor(np.asarray(inputs), dtype=ACCUMULATE_DTYPE)
        w_delta = params.w_delta.to(ACCUMULATE_DTYPE)
        b_delta = params.b_delta.to(ACCUMULATE_DTYPE)
        rate = torch.exp(params.a_log.to(ACCUMULATE_DTYPE))
        delta = F.softplus(u @ w_delta.t() + b_delta)
        return torch.exp(-delta.unsqueeze(-1) * rate).numpy()


################################################################################
# Recurrence.
################################################################################
def _rms_norm(x, scale):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + RMS_NORM_EPS) * scale


def _network(tensors, config, dtype):
    cast = {name: tensor.to(dtype) for name, tensor in tensors.items()}
    return _Network(
        cast['embedding'],
        [layer_params(cast, index) for index in range(config.num_layers)],
        cast['final_norm'])


def _layer_window(params, x, conv_buf, ssm, log_decay, storage=None):
    """
    Run one layer block over a window of positions.

    Arguments:
        params -- LayerParams in the compute dtype.
        x -- (B, T, D) residual stream entering the layer.
        conv_buf -- (B, W, D) last W pre-conv inputs, oldest first.
        ssm -- (B, D, N) recurrent state.
        log_decay -- (B, D, N) decay accumulator, or None to skip it.
        storage -- Dtype the state is rounded to after every step, or None.

    Returns (block output, conv_buf, ssm, log_decay); the residual add is
    left to the caller.
    """
    width = conv_buf.shape[1]
    steps = x.shape[1]

    hidden = _rms_norm(x, params.norm)
    projected = hidden @ params.in_proj.t()
    if storage is not None:
        projected = projected.to(storage).to(x.dtype)
    gate = hidden @ params.gate_proj.t()

    # frames[:, t, :, w] is window[:, t + 1 + w]; w = W - 1 is position t.
    window = torch.cat([conv_buf, projected], dim=1)
    frames = window.unfold(1, width, 1)[:, 1:]
    u = F.silu((frames * params.conv_kernel.t()).sum(-1))

    delta = F.softplus(u @ params.w_delta.t() + params.b_delta)
    input_b = u @ params.w_b
    readout_c = u @ params.w_c
    rate = torch.exp(params.a_log)

    readouts = []
    for step in range(steps):
        log_a = -delta[:, step].unsqueeze(-1) * rate
        drive = (delta[:, step] * u[:, step]).unsqueeze(-1) \
            * input_b[:, step].unsqueeze(-2)
        ssm = torch.exp(log_a) * ssm + drive
        if storage is not None:
            ssm = ssm.to(storage).to(x.dtype)
        if log_decay is not None:
            log_decay = log_decay + log_a
        readouts.append((ssm * readout_c[:, step].unsqueeze(-2)).sum(-1))

    y = torch.stack(readouts, dim=1)
    output = (y * F.silu(gate)) @ params.out_proj.t()
    return output, window[:, steps:], ssm, log_decay


def _run_network(network, layer_states, tokens, storage=None):
    """
    Run every layer over a token window.

    Arguments:
        network -- A _Network.
        layer_states -- Per layer (conv_buf, ssm, log_decay) batched tensors.
        tokens -- (B, T) long tensor, T >= 1.
        storage -- See _layer_window.

    Returns (new layer states, (B, T, V) logits).
    """
    x = network.embedding[tokens]
    new_states = []
    for params, (conv_buf, ssm, log_decay) in zip(network.layers, layer_states):
        output, conv_buf, ssm, log_decay = _layer_window(
            params, x, conv_buf, ssm, log_decay, storage)
        x = x + output
        new_states.append((conv_buf, ssm, log_decay))
    logits = _rms_norm(x, network.final_norm) @ network.embedding.t()
    return new_states, logits


def _check_tokens(tokens, vocab_size):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= vocab_size)][0]
        raise TokenRangeError('token {0} outside vocabulary of size {1}'.format(
            int(bad), vocab_size))


def _as_token_matrix(tokens):
    array = np.asarray(tokens)
    if array.size == 0:
        array = array.reshape(array.shape[0] if array.ndim else 0, 0)
    if array.ndim != 2:
        raise ShapeError('token matrix must be 2-D, got shape {0}'.format(
            array.shape))
    if array.size and not np.issubdtype(array.dtype, np.integer):
        raise TokenRangeError('token ids must be integers')
    return array.astype(np.int64)


def layer_step(params, state, inputs):
    """
    Advance one layer by one position.

    Arguments:
        params -- LayerParams of the layer.
        state -- The LayerState before the step.
        inputs -- The D-dim residual stream entering the layer.

    Returns (new LayerState, D-dim block output before the residual add).
    """
    x = np.asarray(inputs, dtype=np.float64)
    dim = params.in_proj.shape[0]
    if x.shape != (dim,):
        raise ShapeError('input must have shape ({0},), got {1}'.format(
            dim, x.shape))
    if not np.all(np.isfinite(x)):
        raise NonFiniteError('layer input is not finite')

    with torch.no_grad():
        cast = LayerParams(*(
            torch.as_tensor(tensor).to(ACCUMULATE_DTYPE) for tensor in params))
        output, conv_buf, ssm, log_decay = _layer_window(
            cast,
            torch.from_numpy(x).view(1, 1, dim),
            torch.from_numpy(np.asarray(state.conv_buf, np.float64))[None],
            torch.from_numpy(np.asarray(state.ssm, np.float64))[None],
            torch.from_numpy(np.asarray(state.log_decay, np.float64))[None],
            storage=STORAGE_DTYPE)
    new_state = make_layer_state(
        ssm[0].numpy(), conv_buf[0].numpy(), log_decay[0].numpy())
    return new_state, output[0, 0].numpy()


def process_batch(model, states, tokens, reset_decay=False):
    """
    Process equal-length token rows, each from its own state.

    Arguments:
        model -- ModelParams.
        states -- StateSnapshot list, one per row.
        tokens -- (B, T) token ids.
        reset_decay -- Zero the decay accumulators before processing.

    Returns (list of new StateSnapshots, (B, T, V) float64 logits).
    """
    config = model.config
    token_matrix = _as_token_matrix(tokens)
    if token_matrix.shape[0] != len(states):
        raise ShapeError('{0} token rows for {1} states'.format(
            token_matrix.shape[0], len(states)))
    _check_tokens(token_matrix, config.vocab_size)
    for state in states:
        validate_snapshot(config, state)

    steps = token_matrix.shape[1]
    if steps == 0:
        if reset_decay:
            states = [
                StateSnapshot(
                    tuple(make_layer_state(
                        layer.ssm, layer.conv_buf,
                        np.zeros_like(layer.log_decay))
                        for layer in state.layers),
                    state.meta)
                for state in states]
        return list(states), np.zeros((len(states), 0, config.vocab_size))

    layer_states = []
    for index in range(config.num_layers):
        conv_buf = np.stack([s.layers[index].conv_buf for s in states])
        ssm = np.stack([s.layers[index].ssm for s in states])
        if reset_decay:
            log_decay = np.zeros(ssm.shape)
        else:
            log_decay = np.stack([s.layers[index].log_decay for s in states])
        layer_states.append(tuple(
            torch.from_numpy(array.astype(np.float64))
            for array in (conv_buf, ssm, log_decay)))

    with torch.no_grad():
        network = _network(model.tensors, config, ACCUMULATE_DTYPE)
        new_layer_states, logits = _run_network(
            network, layer_states, torch.from_numpy(token_matrix),
            storage=STORAGE_DTYPE)

    snapshots = []
    for row, state in enumerate(states):
        layers = tuple(
            make_layer_state(
                ssm[row].numpy(), conv_buf[row].numpy(),
                log_decay[row].numpy())
            for conv_buf, ssm, log_decay in new_layer_states)
        meta = state.meta._replace(token_count=state.meta.token_count + steps)
        snapshots.append(StateSnapshot(layers, meta))
    return snapshots, logits.numpy()


def forward_step(model, state, token):
    """
    Feed one token.

    Returns (new StateSnapshot, vocab-size logits).
    """
    if not isinstance(token, (int, np.integer)):
        raise TokenRangeError('token must be an integer, got {0!r}'.format(
            token))
    snapshots, logits = process_batch(model, [state], [[token]])
    return snapshots[0], logits[0, 0]


def process_sequence(model, state, tokens, reset_decay=False):
    """
    Feed a token sequence.

    Arguments:
        model -- ModelParams.
        state -- The initial StateSnapshot.
        tokens -- Token id list.
        reset_decay -- Zero the decay accumulator first, so the returned one
                       covers exactly these tokens.

    Returns (new StateSnapshot, (T, V) logits).
    """
    row = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    snapshots, logits = process_batch(model, [state], row, reset_decay)
    return snapshots[0], logits[0]


################################################################################
# Losses.
################################################################################
def _next_token_nll(logits, targets):
    log_probs = torch.log_softmax(torch.as_tensor(logits), dim=-1)
    picked = torch.gather(
        log_probs, -1, torch.as_tensor(targets).unsqueeze(-1)).squeeze(-1)
    return -picked


def batch_sequence_loss(model, states, tokens):
    """
    Returns the per-row mean next-token NLL of token rows, each row read
    from its own state.

    Arguments:
        model -- ModelParams.
        states -- StateSnapshot list.
        tokens -- (B, T) token ids with T >= 2.
    """
    token_matrix = _as_token_matrix(tokens)
    if token_matrix.shape[1] < 2:
        raise SequenceTooShortError('loss needs at least 2 tokens')
    _, logits = process_batch(model, states, token_matrix[:, :-1])
    nll = _next_token_nll(logits, torch.from_numpy(token_matrix[:, 1:]))
    losses = nll.mean(dim=1).numpy()
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError('sequence loss is not finite')
    return losses


def sequence_loss(model, state, tokens):
    """
    Returns the mean next-token NLL of tokens read from state.
    """
    row = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    return float(batch_sequence_loss(model, [state], row)[0])


def batch_loss(tensors, config, tokens):
    """
    Returns the differentiable mean next-token NLL of token rows processed
    from the zero state.

    Arguments:
        tensors -- Name to tensor mapping; its dtype is the compute dtype.
        config -- ModelConfig.
        tokens -- (B, T) long tensor with T >= 2.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() != 2 or tokens.shape[1] < 2:
        raise SequenceTooShortError('loss needs (B, T) tokens with T >= 2')
    _check_tokens(tokens.numpy(), config.vocab_size)

    dtype = tensors['embedding'].dtype
    network = _network(tensors, config, dtype)
    batch = tokens.shape[0]
    layer_states = [
        (torch.zeros(batch, config.conv_width, config.embed_dim, dtype=dtype),
         torch.zeros(batch, config.embed_dim, config.state_dim, dtype=dtype),
         None)
        for _ in range(config.num_layers)]
    _, logits = _run_network(network, layer_states, tokens[:, :-1])
    return F.cross_entropy(
        logits.reshape(-1, config.vocab_size), tokens[:, 1:].reshape(-1))


################################################################################
# Persistence.
################################################################################
def save_model(model, path):
    """
    Write ModelParams in the SSOUPM1 format.
    """
    header = {
        'format_version': MODEL_FORMAT_VERSION,
        'config': model.config._asdict(),
        'seed': model.seed,
        'model_hash': model.model_hash,
    }
    write_container(path, MODEL_MAGIC, header, (
        (name, tensor.detach().cpu().numpy())
        for name, tensor in model.tensors.items()))
    logger.debug('saved model %s to %s', model.model_hash, path)


def load_model(path):
    """
    Read ModelParams written by save_model.
    """
    header, arrays = read_container(
        path, MODEL_MAGIC, (MODEL_FORMAT_VERSION,))
    try:
        config = ModelConfig(**header['config'])
        seed = int(header.get('seed', 0))
    except (KeyError, TypeError, ValueError) as error:
        raise FormatError('{0}: bad model config: {1}'.format(path, error))
    validate_config(config)

    shapes = tensor_shapes(config)
    if list(arrays) != list(shapes):
        raise FormatError('{0}: tensor names do not match the config'.format(
            path))
    tensors = OrderedDict()
    for name, shape in shapes.items():
        if arrays[name].shape != shape or arrays[name].dtype != np.float32:
            raise FormatError('{0}: tensor {1!r} has wrong layout'.format(
                path, name))
        tensors[name] = torch.from_numpy(arrays[name].copy())
    return ModelParams(config, seed, tensors)
